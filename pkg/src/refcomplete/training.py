"""Training loop: reference dropping, per-step mask resampling, Adam
updates, loss logging and checkpointing.

The two drop events: with probability ``p_drop_all`` every reference (and
the prompt) is removed for the step, which is also what the unconditional
guidance branch sees at sampling time; otherwise each reference is removed
independently with probability ``p_drop_each``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule, make_schedule, q_sample, training_loss
from .errors import InvalidArgumentError
from .masks import MaskSpec, apply_mask, downsample_mask, sample_training_mask
from .model import Model, ModelConfig, encode_image_to_latent, save_checkpoint
from .synth import ReferencePart, TrainingSample


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    iterations: int = 2000
    p_drop_all: float = 0.2
    p_drop_each: float = 0.2
    mask_random_ratio: float = 0.5
    seed: int = 0
    resample_masks: bool = True
    masked_only_loss: bool = False
    checkpoint_every: int = 500
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for p in (self.p_drop_all, self.p_drop_each, self.mask_random_ratio):
            if not 0.0 <= p <= 1.0:
                raise InvalidArgumentError(f"probability {p} outside [0,1]")
        if self.learning_rate < 0 or self.batch_size < 1 or self.iterations < 0:
            raise InvalidArgumentError("bad learning_rate/batch_size/iterations")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """The full-scale recipe (large pretrained-backbone runs); the class
        defaults are the toy recipe that trains on a CPU in minutes."""
        return cls(learning_rate=2e-5, batch_size=64, iterations=30_000)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def drop_references(refs: list[ReferencePart], rng: np.random.Generator,
                    p_all: float, p_each: float) -> list[ReferencePart]:
    """All-or-nothing drop with probability ``p_all``; otherwise each
    reference independently dropped with probability ``p_each``."""
    if not 0.0 <= p_all <= 1.0 or not 0.0 <= p_each <= 1.0:
        raise InvalidArgumentError("drop probabilities must lie in [0,1]")
    if rng.random() < p_all:
        return []
    return [r for r in refs if rng.random() >= p_each]


class Adam:
    """First-order adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def prepare_item(model: Model, sample: TrainingSample, rng: np.random.Generator,
                 config: TrainConfig):
    """Per-item conditioning: drop references, resample the source mask."""
    refs = drop_references(sample.references, rng, config.p_drop_all,
                           config.p_drop_each)
    prompt = sample.prompt if refs else None  # all-drop also drops the prompt
    if config.resample_masks and sample.silhouette is not None:
        spec = MaskSpec(random_ratio=config.mask_random_ratio)
        mask = sample_training_mask(sample.silhouette, rng, spec)
    else:
        mask = sample.source_mask
    return refs, prompt, mask


def train_step(model: Model, batch: list[TrainingSample],
               schedule: NoiseSchedule, optimizer: Adam,
               rng: np.random.Generator, config: TrainConfig) -> float:
    """One optimization step over a batch; returns the scalar loss.

    All reference encodes run in one backbone walk and all items in one
    batched complete forward."""
    cfg = model.config
    items, noisies, lmasks, maskeds, ts, targets = [], [], [], [], [], []
    for sample in batch:
        refs, prompt, mask = prepare_item(model, sample, rng, config)
        x0 = encode_image_to_latent(sample.target, cfg.latent_factor) * 2.0 - 1.0
        latent_mask = downsample_mask(mask, cfg.latent_factor)
        masked_latent = encode_image_to_latent(
            apply_mask(sample.target, mask, 0.0), cfg.latent_factor) * 2.0 - 1.0
        t = int(rng.integers(schedule.T))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        noisy = q_sample(x0, t, eps, schedule).astype(np.float32)
        items.append((refs, prompt))
        noisies.append(noisy)
        lmasks.append(latent_mask)
        maskeds.append(masked_latent)
        ts.append(t)
        targets.append(eps)
    caches = model.encode_reference_batch(items)
    pred = model.complete_forward_batch(np.stack(noisies), np.stack(lmasks),
                                        np.stack(maskeds), np.array(ts), caches)
    total = training_loss(pred, np.stack(targets),
                          np.stack(lmasks) if config.masked_only_loss else None,
                          masked_only=config.masked_only_loss)
    loss_value = float(total.data)
    if not np.isfinite(loss_value):
        raise RuntimeError(f"non-finite training loss {loss_value}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    optimizer.zero_grad()
    return loss_value


def train_loop(dataset: list[TrainingSample], train_config: TrainConfig,
               model_config: ModelConfig | None = None,
               out_dir: str | Path | None = None,
               model: Model | None = None) -> tuple[Model, list[float]]:
    """Full training run; returns the model and the per-step loss curve.

    With ``out_dir`` set, writes ``loss.csv`` (one row per iteration),
    periodic checkpoints and a final ``model.ckpt``. A frozen reference
    branch (train_reference_encoder=False) receives no updates.
    """
    if not dataset:
        raise InvalidArgumentError("dataset is empty")
    if model is None:
        model = Model(model_config or ModelConfig(), seed=train_config.seed)
    schedule = make_schedule(train_config.schedule_T, train_config.beta_start,
                             train_config.beta_end)
    optimizer = Adam(model.trainable_params(), lr=train_config.learning_rate,
                     beta1=train_config.adam_beta1, beta2=train_config.adam_beta2,
                     eps=train_config.adam_eps)
    rng = np.random.default_rng(train_config.seed)
    losses: list[float] = []

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    csv_file = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            csv_file = open(out / "loss.csv", "w", newline="")
        except OSError as exc:
            raise OSError(f"cannot write training outputs under {out}: {exc}") from exc
        writer = csv.writer(csv_file)
        writer.writerow(["step", "loss"])

    try:
        for step in range(1, train_config.iterations + 1):
            idx = rng.integers(0, len(dataset), size=train_config.batch_size)
            batch = [dataset[int(i)] for i in idx]
            loss = train_step(model, batch, schedule, optimizer, rng, train_config)
            losses.append(loss)
            if writer is not None:
                writer.writerow([step, f"{loss:.6f}"])
            if out is not None and train_config.checkpoint_every > 0 \
                    and step % train_config.checkpoint_every == 0:
                save_checkpoint(model, out / f"ckpt_{step:06d}.ckpt")
        if out is not None:
            save_checkpoint(model, out / "model.ckpt")
            (out / "train_config.json").write_text(
                json.dumps(train_config.to_dict(), indent=2, sort_keys=True))
    finally:
        if csv_file is not None:
            csv_file.close()
    return model, losses
