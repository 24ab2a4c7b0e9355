"""Benchmark data model and evaluation runner.

A benchmark is a directory with one JSON manifest listing groups by
relative path:

    benchmark/manifest.json
    benchmark/<group_id>/{source,mask,gt}.png
    benchmark/<group_id>/refs/<label>.png, <label>_mask.png

Evaluation completes each group's source under its mask and scores the
result against ground truth with the full metric suite; results land in
``results/<run_id>/`` with a CSV report and per-group completion images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BenchmarkLoadError, InvalidArgumentError
from .masks import Mask, validate_mask
from .metrics import (
    MetricReport,
    aggregate_report,
    embedding_similarity,
    masked_psnr,
    masked_ssim,
    perceptual_distance,
)
from .pngio import Raster, load_mask, load_raster, save_mask, save_raster
from .synth import PART_LABELS, ReferencePart

MANIFEST_NAME = "manifest.json"


@dataclass
class BenchmarkGroup:
    group_id: str
    source: Raster
    source_mask: Mask
    references: list[ReferencePart]
    prompt: str | None
    ground_truth: Raster
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.source_mask.sum() == 0:
            raise BenchmarkLoadError(f"group {self.group_id}: source mask is empty")
        if self.source.shape != self.ground_truth.shape:
            raise BenchmarkLoadError(f"group {self.group_id}: size mismatch")
        if self.source.shape[:2] != self.source_mask.shape:
            raise BenchmarkLoadError(f"group {self.group_id}: mask size mismatch")
        outside = ~self.source_mask.astype(bool)
        if not np.array_equal(self.source[outside], self.ground_truth[outside]):
            raise BenchmarkLoadError(
                f"group {self.group_id}: ground truth differs from source outside the mask")
        if not self.references:
            raise BenchmarkLoadError(f"group {self.group_id}: needs >= 1 reference")
        for ref in self.references:
            if ref.label not in PART_LABELS:
                raise BenchmarkLoadError(
                    f"group {self.group_id}: unknown reference label {ref.label!r}")
            if ref.mask.sum() == 0:
                raise BenchmarkLoadError(
                    f"group {self.group_id}: reference mask {ref.label} is empty")
            if ref.image.shape[:2] != ref.mask.shape:
                raise BenchmarkLoadError(
                    f"group {self.group_id}: reference {ref.label} mask size mismatch")


def save_benchmark(bench_dir: str | Path, groups: list[BenchmarkGroup]) -> None:
    root = Path(bench_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for g in groups:
        gdir = root / g.group_id
        (gdir / "refs").mkdir(parents=True, exist_ok=True)
        save_raster(gdir / "source.png", g.source)
        save_mask(gdir / "mask.png", g.source_mask)
        save_raster(gdir / "gt.png", g.ground_truth)
        refs = []
        for ref in g.references:
            save_raster(gdir / "refs" / f"{ref.label}.png", ref.image)
            save_mask(gdir / "refs" / f"{ref.label}_mask.png", ref.mask)
            refs.append({"label": ref.label,
                         "image": f"{g.group_id}/refs/{ref.label}.png",
                         "mask": f"{g.group_id}/refs/{ref.label}_mask.png",
                         "caption": ref.caption})
        entries.append({
            "group_id": g.group_id,
            "source": f"{g.group_id}/source.png",
            "mask": f"{g.group_id}/mask.png",
            "ground_truth": f"{g.group_id}/gt.png",
            "prompt": g.prompt,
            "references": refs,
            "meta": g.meta,
        })
    manifest = {"version": 1, "groups": entries}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_benchmark(bench_dir: str | Path) -> list[BenchmarkGroup]:
    """Load and validate every group; fail fast naming the offending group."""
    root = Path(bench_dir)
    manifest_path = root / MANIFEST_NAME if root.is_dir() else root
    root = manifest_path.parent
    if not manifest_path.exists():
        raise BenchmarkLoadError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    entries = manifest.get("groups", [])
    if not entries:
        raise BenchmarkLoadError("no groups in manifest")
    groups = []
    for entry in entries:
        gid = entry.get("group_id", "<missing id>")

        def _file(rel: str) -> Path:
            p = root / rel
            if not p.exists():
                raise BenchmarkLoadError(f"group {gid}: missing file {p}")
            return p

        refs = []
        for r in entry.get("references", []):
            refs.append(ReferencePart(
                label=r["label"],
                image=load_raster(_file(r["image"])),
                mask=load_mask(_file(r["mask"])),
                caption=r.get("caption", ""),
            ))
        group = BenchmarkGroup(
            group_id=gid,
            source=load_raster(_file(entry["source"])),
            source_mask=load_mask(_file(entry["mask"])),
            references=refs,
            prompt=entry.get("prompt"),
            ground_truth=load_raster(_file(entry["ground_truth"])),
            meta=entry.get("meta", {}),
        )
        group.validate()
        groups.append(group)
    return groups


def score_group(completed: Raster, group: BenchmarkGroup) -> dict[str, float]:
    prompt = group.prompt or ""
    return {
        "clip_i_analog": embedding_similarity(completed, group.ground_truth, "toy-clip"),
        "clip_t_analog": embedding_similarity(prompt, completed, "toy-clip"),
        "dino_analog": embedding_similarity(completed, group.ground_truth, "toy-dino"),
        "dreamsim_analog": perceptual_distance(completed, group.ground_truth,
                                               group.source_mask, "toy-dreamsim"),
        "lpips_analog": perceptual_distance(completed, group.ground_truth,
                                            group.source_mask, "toy-lpips"),
        "psnr": masked_psnr(completed, group.ground_truth, group.source_mask),
        "ssim": masked_ssim(completed, group.ground_truth, group.source_mask),
    }


def run_eval(
    completer,
    groups: list[BenchmarkGroup],
    seed: int = 0,
    results_dir: str | Path | None = None,
    drop_references: bool = False,
    max_references: int | None = None,
) -> MetricReport:
    """Complete every group with ``completer(group, refs, seed)`` and score.

    ``completer`` is any callable returning a Raster -- the checkpointed
    sampler in production, or an identity oracle in tests. Deterministic
    under a fixed seed; never mutates benchmark files.
    """
    if not groups:
        raise InvalidArgumentError("benchmark is empty")
    rows = {}
    out = Path(results_dir) if results_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for group in sorted(groups, key=lambda g: g.group_id):
        refs = [] if drop_references else list(group.references)
        if max_references is not None:
            refs = refs[:max_references]
        try:
            completed = completer(group, refs, seed)
        except Exception as exc:
            raise RuntimeError(f"completion failed for group {group.group_id}") from exc
        rows[group.group_id] = score_group(completed, group)
        if out is not None:
            save_raster(out / f"{group.group_id}_completed.png", completed)
    backends = {"embedding": "toy-clip/toy-dino",
                "perceptual": "toy-lpips/toy-dreamsim"}
    report = aggregate_report(rows, backends=backends)
    if out is not None:
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.txt").write_text(report.to_table())
    return report


def checkpoint_completer(model, schedule, sampler_config):
    """Adapter from a loaded model to the ``run_eval`` completer interface."""
    from .diffusion import sample_completion

    def complete(group: BenchmarkGroup, refs, seed: int) -> Raster:
        return sample_completion(model, refs, group.source, group.source_mask,
                                 schedule, sampler_config, seed=seed,
                                 prompt=group.prompt)

    return complete


def identity_oracle_completer():
    """Upper-bound stub: returns the ground truth itself."""

    def complete(group: BenchmarkGroup, refs, seed: int) -> Raster:
        return group.ground_truth.copy()

    return complete


ABLATION_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
ABLATION_ROWS = ("clip_i_analog", "dino_analog", "dreamsim_analog")


def run_mask_ratio_ablation(
    dataset,
    groups: list[BenchmarkGroup],
    ratios=ABLATION_RATIOS,
    train_config=None,
    model_config=None,
    sampler_config=None,
    seed: int = 0,
    results_dir: str | Path | None = None,
) -> dict[float, MetricReport]:
    """Train one model per grid/body mask ratio (shared seed) and evaluate
    each on the same benchmark; returns one report per ratio."""
    from dataclasses import replace

    from .diffusion import SamplerConfig, make_schedule
    from .training import TrainConfig, train_loop

    train_config = train_config or TrainConfig()
    sampler_config = sampler_config or SamplerConfig()
    reports: dict[float, MetricReport] = {}
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise InvalidArgumentError(f"mask ratio {ratio} outside [0,1]")
        cfg = replace(train_config, mask_random_ratio=float(ratio), seed=seed)
        out = Path(results_dir) / f"ratio_{int(round(ratio * 100)):03d}" \
            if results_dir is not None else None
        model, _ = train_loop(dataset, cfg, model_config=model_config, out_dir=out)
        schedule = make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)
        completer = checkpoint_completer(model, schedule, sampler_config)
        reports[float(ratio)] = run_eval(completer, groups, seed=seed,
                                         results_dir=out)
    return reports


def ablation_grid(reports: dict[float, MetricReport]) -> str:
    """Aligned text grid: metric rows x ratio columns."""
    ratios = sorted(reports)
    headers = ["metric"] + [f"{int(round(r * 100))}%" for r in ratios]
    lines = []
    for row in ABLATION_ROWS:
        cells = [f"{reports[r].means[row]:.4f}" for r in ratios]
        from .metrics import _DISPLAY

        lines.append([_DISPLAY.get(row, row)] + cells)
    widths = [max(len(h), max(len(l[i]) for l in lines)) for i, h in enumerate(headers)]

    def fmt(cells):
        return "  ".join(c.rjust(w) for c, w in zip(cells, widths))

    return "\n".join([fmt(headers)] + [fmt(l) for l in lines])
