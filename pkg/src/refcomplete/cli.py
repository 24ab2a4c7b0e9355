"""Command-line entry point.

Subcommands map one-to-one onto the pipeline stages:

    gen-data            synthesize a training dataset + benchmark subset
    train               train a model from a dataset directory
    complete            complete one masked image from a checkpoint
    evaluate            run the benchmark evaluation and write a report
    ablate-mask-ratio   train/evaluate one model per grid-mask ratio
    serve               start the HTTP service

Every run writes ``run.json`` (resolved config + seed) next to its outputs,
so any result is reproducible from that file plus the inputs. Exit codes:
0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import BenchmarkLoadError, ConfigurationError, InvalidArgumentError
from .model import ModelConfig
from .training import TrainConfig


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise CliError(message, exit_code=1)


def _config_keys() -> list[str]:
    keys = [f"model.{f.name}" for f in dataclasses.fields(ModelConfig)]
    keys += [f"train.{f.name}" for f in dataclasses.fields(TrainConfig)]
    return keys


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(type(current[0])(v) for v in raw.split(","))
    return raw


def load_configs(config_path: str | None,
                 overrides: list[str]) -> tuple[ModelConfig, TrainConfig]:
    """JSON config file ({"model": {...}, "train": {...}}) plus
    ``--set section.key=value`` overrides; unknown keys are rejected."""
    model_d = ModelConfig().to_dict()
    train_d = TrainConfig().to_dict()
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}", exit_code=2)
        data = json.loads(path.read_text())
        for section, target in (("model", model_d), ("train", train_d)):
            for key, value in data.get(section, {}).items():
                if key not in target:
                    raise CliError(f"unknown config key {section}.{key}")
                target[key] = value
        unknown = set(data) - {"model", "train"}
        if unknown:
            raise CliError(f"unknown config sections {sorted(unknown)}")
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        section, _, name = key.partition(".")
        target = {"model": model_d, "train": train_d}.get(section)
        if target is None or name not in target:
            raise CliError(f"unknown config key {key!r}")
        target[name] = _coerce(target[name], raw)
    try:
        return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)
    except (InvalidArgumentError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}")


def write_run_record(out_dir: Path, command: str, model_config: ModelConfig,
                     train_config: TrainConfig | None, extra: dict) -> None:
    record = {"command": command, "model": model_config.to_dict(), **extra}
    if train_config is not None:
        record["train"] = train_config.to_dict()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    except OSError as exc:
        raise CliError(f"cannot write run record under {out_dir}: {exc}", exit_code=2)


def cmd_gen_data(args) -> int:
    from .synth import generate_dataset

    if args.figures < 1:
        raise CliError("figures must be >= 1")
    model_config, train_config = load_configs(args.config, args.set or [])
    try:
        info = generate_dataset(args.out, args.figures, args.seed,
                                n_benchmark_groups=args.benchmark_groups,
                                size=model_config.image_size)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", exit_code=2)
    write_run_record(Path(args.out), "gen-data", model_config, train_config,
                     {"seed": args.seed, "figures": args.figures,
                      "benchmark_groups": args.benchmark_groups})
    print(json.dumps(info))
    return 0


def cmd_train(args) -> int:
    from .synth import load_training_dataset
    from .training import train_loop

    model_config, train_config = load_configs(args.config, args.set or [])
    if args.seed is not None:
        train_config = dataclasses.replace(train_config, seed=args.seed)
    if args.iterations is not None:
        train_config = dataclasses.replace(train_config, iterations=args.iterations)
    dataset = load_training_dataset(args.dataset)
    out = Path(args.out)
    write_run_record(out, "train", model_config, train_config,
                     {"dataset": str(args.dataset), "seed": train_config.seed})
    model, losses = train_loop(dataset, train_config, model_config=model_config,
                               out_dir=out)
    print(f"trained {len(losses)} steps; final loss "
          f"{losses[-1] if losses else float('nan'):.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_complete(args) -> int:
    import base64

    import numpy as np

    from .diffusion import SamplerConfig, make_schedule, sample_completion
    from .model import load_checkpoint
    from .pngio import load_mask, load_raster, save_raster
    from .synth import ReferencePart

    model = load_checkpoint(args.ckpt)
    source = load_raster(args.source)
    mask = load_mask(args.mask)
    references = []
    for spec in args.ref or []:
        parts = spec.split(":")
        if len(parts) != 3:
            raise CliError(f"--ref expects label:image.png:mask.png, got {spec!r}")
        label, image_path, mask_path = parts
        references.append(ReferencePart(label=label, image=load_raster(image_path),
                                        mask=load_mask(mask_path)))
    sampler = SamplerConfig(steps=args.steps, guidance_scale=args.guidance)
    schedule = make_schedule()
    completed = sample_completion(model, references, source, mask, schedule,
                                  sampler, seed=args.seed, prompt=args.prompt)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_raster(out, completed)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", exit_code=2)
    write_run_record(out.parent, "complete", model.config, None,
                     {"seed": args.seed, "steps": args.steps,
                      "guidance": args.guidance, "source": str(args.source)})
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .benchmark import (checkpoint_completer, identity_oracle_completer,
                            load_benchmark, run_eval)
    from .diffusion import SamplerConfig, make_schedule

    groups = load_benchmark(args.benchmark)
    if args.identity_oracle:
        completer = identity_oracle_completer()
        from .model import ModelConfig as MC
        model_config = MC()
    else:
        if not args.ckpt:
            raise CliError("evaluate needs --ckpt (or --identity-oracle)")
        from .model import load_checkpoint

        model = load_checkpoint(args.ckpt)
        model_config = model.config
        completer = checkpoint_completer(
            model, make_schedule(),
            SamplerConfig(steps=args.steps, guidance_scale=args.guidance))
    out = Path(args.report)
    report = run_eval(completer, groups, seed=args.seed, results_dir=out,
                      drop_references=args.drop_references,
                      max_references=args.max_references)
    write_run_record(out, "evaluate", model_config, None,
                     {"seed": args.seed, "benchmark": str(args.benchmark),
                      "drop_references": args.drop_references,
                      "steps": args.steps, "guidance": args.guidance})
    print(report.to_table())
    return 0


def cmd_ablate_mask_ratio(args) -> int:
    from .benchmark import ablation_grid, load_benchmark, run_mask_ratio_ablation
    from .diffusion import SamplerConfig
    from .synth import load_training_dataset

    model_config, train_config = load_configs(args.config, args.set or [])
    ratios = [float(r) / 100.0 for r in args.ratios.split(",")]
    dataset = load_training_dataset(args.dataset)
    groups = load_benchmark(args.benchmark)
    out = Path(args.out)
    write_run_record(out, "ablate-mask-ratio", model_config, train_config,
                     {"ratios": ratios, "seed": args.seed})
    reports = run_mask_ratio_ablation(
        dataset, groups, ratios=ratios, train_config=train_config,
        model_config=model_config,
        sampler_config=SamplerConfig(steps=args.steps, guidance_scale=args.guidance),
        seed=args.seed, results_dir=out)
    grid = ablation_grid(reports)
    (out / "ablation_grid.txt").write_text(grid)
    print(grid)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import DEFAULT_QUEUE_DEPTH, create_app

    app = create_app(args.ckpt, args.benchmark,
                     queue_depth=args.queue_depth or DEFAULT_QUEUE_DEPTH)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> _Parser:
    epilog = "config keys (settable via config file or --set):\n  " + \
        "\n  ".join(_config_keys())
    parser = _Parser(prog="refcomplete", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter,
                     epilog=epilog)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="JSON config file (model/train sections)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key, e.g. model.base_channels=32")

    p = sub.add_parser("gen-data", help="generate synthetic dataset + benchmark")
    p.add_argument("--figures", type=int, default=200)
    p.add_argument("--benchmark-groups", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    add_config_args(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    add_config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("complete", help="complete one masked image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--ref", action="append", metavar="LABEL:IMG:MASK")
    p.add_argument("--prompt", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a benchmark")
    p.add_argument("--ckpt")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--drop-references", action="store_true")
    p.add_argument("--max-references", type=int, default=None)
    p.add_argument("--identity-oracle", action="store_true",
                   help="score an oracle that returns ground truth (harness check)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate-mask-ratio",
                       help="sweep grid/body mask ratios (trains one model each)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--ratios", default="0,25,50,75,100",
                   help="comma-separated percentages")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    add_config_args(p)
    p.set_defaults(fn=cmd_ablate_mask_ratio)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--benchmark", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--queue-depth", type=int, default=None)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (InvalidArgumentError, ConfigurationError, BenchmarkLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
