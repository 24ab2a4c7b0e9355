"""Noise schedule, forward process, DDIM sampling and classifier-free
guidance.

Latents travel through the sampler in [-1, 1] (images are shifted on entry
and unshifted on exit); the completion output is composited so pixels
outside the source mask are exactly the source's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import InvalidArgumentError
from .masks import Mask, apply_mask, downsample_mask
from .model import Model, decode_latent_to_image, encode_image_to_latent
from .pngio import Raster
from .synth import ReferencePart


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t < self.T:
            raise InvalidArgumentError(f"timestep {t} outside [0, {self.T})")
        return float(self.alphas_cumprod[t])


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0
    clip_x0: bool = True  # static thresholding of the implied clean latent

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise InvalidArgumentError(f"steps must be in [1, {T}]")
        if self.guidance_scale < 0:
            raise InvalidArgumentError("guidance_scale must be >= 0")


def make_schedule(T: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative alpha products."""
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidArgumentError(
            f"need 0 < beta_start <= beta_end < 1, got {(beta_start, beta_end)}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_cumprod = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alphas_cumprod=alphas_cumprod)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray,
             schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps."""
    a = schedule.alpha_bar(t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise InvalidArgumentError("x0 and eps shapes disagree")
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def training_loss(pred, target, latent_mask: Mask | None = None,
                  masked_only: bool = False):
    """Mean squared error over all latent elements (optionally restricted to
    masked cells). Accepts tape tensors or plain arrays."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    pred_data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if pred_data.shape != target_data.shape:
        raise InvalidArgumentError(
            f"prediction {pred_data.shape} vs target {target_data.shape}")
    weights = None
    if masked_only:
        if latent_mask is None:
            raise InvalidArgumentError("masked_only loss needs a latent mask")
        w = latent_mask.astype(np.float64)[..., None]
        w = np.broadcast_to(w, pred_data.shape)
        total = w.sum()
        if total == 0:
            raise InvalidArgumentError("masked_only loss with empty mask")
        weights = w / total
    if isinstance(pred, Tensor):
        diff = ad.sub(pred, target if isinstance(target, Tensor) else Tensor(target_data))
        sq = ad.mul(diff, diff)
        if weights is None:
            return ad.mean_(sq)
        return ad.sum_(ad.mul(sq, Tensor(weights.astype(pred_data.dtype))))
    d = pred_data - target_data
    if weights is None:
        return float(np.mean(d * d))
    return float(np.sum(weights * d * d))


def ddim_step(x_t: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0,
              rng: np.random.Generator | None = None,
              x0_clip: tuple[float, float] | None = None) -> np.ndarray:
    """One deterministic (eta=0) DDIM update from t to t_prev.

    Stepping to t_prev=0 ends the chain at the clean sample (alpha_bar -> 1),
    so an exact noise prediction inverts q_sample identically. ``x0_clip``
    optionally thresholds the implied clean sample (sampling stability);
    omitted, the update is the pure algebraic identity.
    """
    if not t > t_prev >= 0:
        raise InvalidArgumentError(f"need t > t_prev >= 0, got {(t, t_prev)}")
    a_t = schedule.alpha_bar(t)
    a_prev = schedule.alpha_bar(t_prev) if t_prev > 0 else 1.0
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    x0_pred = (x_t - np.sqrt(1.0 - a_t) * eps_pred) / np.sqrt(a_t)
    if x0_clip is not None:
        x0_pred = np.clip(x0_pred, x0_clip[0], x0_clip[1])
    sigma = 0.0
    if eta > 0:
        sigma = eta * np.sqrt((1 - a_prev) / (1 - a_t)) * np.sqrt(1 - a_t / a_prev)
    dir_coeff = np.sqrt(max(1.0 - a_prev - sigma**2, 0.0))
    x_prev = np.sqrt(a_prev) * x0_pred + dir_coeff * eps_pred
    if sigma > 0:
        if rng is None:
            raise InvalidArgumentError("eta > 0 requires an rng")
        x_prev = x_prev + sigma * rng.standard_normal(x_t.shape)
    return x_prev


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray,
                scale: float) -> np.ndarray:
    """eps_uncond + scale * (eps_cond - eps_uncond)."""
    eps_uncond = np.asarray(eps_uncond)
    eps_cond = np.asarray(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise InvalidArgumentError("guidance branches have different shapes")
    if scale == 0.0:
        return eps_uncond.copy()
    if scale == 1.0:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps from T-1 down to 1.

    Each timestep gets one DDIM transition; the final transition targets the
    clean sample (t_prev = 0 sentinel).
    """
    ts = np.linspace(T - 1, min(1, T - 1), steps).round().astype(int)
    return sorted(set(int(t) for t in ts), reverse=True)


def sample_completion(
    model: Model,
    references: list[ReferencePart],
    source: Raster,
    source_mask: Mask,
    schedule: NoiseSchedule,
    sampler: SamplerConfig | None = None,
    seed: int = 0,
    prompt: str | None = None,
    cache=None,
) -> Raster:
    """Run the full completion: DDIM with classifier-free guidance, then
    composite so the output equals the source outside the mask."""
    sampler = sampler or SamplerConfig()
    sampler.validate(schedule.T)
    cfg = model.config
    if source.shape[:2] != (cfg.image_size, cfg.image_size):
        raise InvalidArgumentError(
            f"source size {source.shape[:2]} != model size {cfg.image_size}")
    if source_mask.shape != source.shape[:2]:
        raise InvalidArgumentError("source mask / image size mismatch")

    latent_mask = downsample_mask(source_mask, cfg.latent_factor)
    masked_img = apply_mask(source, source_mask, 0.0)
    masked_latent = encode_image_to_latent(masked_img, cfg.latent_factor) * 2.0 - 1.0

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(masked_latent.shape).astype(np.float32)
    with no_grad():
        if cache is None:
            cache = model.reference_encode(references, prompt=prompt)
        uncond_cache = model.reference_encode([], prompt=None)
        ts = sampling_timesteps(schedule.T, sampler.steps)
        lmask2 = np.stack([latent_mask, latent_mask])
        mlat2 = np.stack([masked_latent, masked_latent])
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            if sampler.guidance_scale == 1.0:
                eps = model.complete_forward(x, latent_mask, masked_latent, t,
                                             cache).data
            else:
                both = model.complete_forward_batch(
                    np.stack([x, x]), lmask2, mlat2, np.array([t, t]),
                    [uncond_cache, cache]).data
                eps = cfg_combine(both[0], both[1], sampler.guidance_scale)
            x = ddim_step(x, eps, t, t_prev, schedule, eta=sampler.eta, rng=rng,
                          x0_clip=(-1.0, 1.0) if sampler.clip_x0 else None)
    decoded = decode_latent_to_image((np.asarray(x) + 1.0) / 2.0, cfg.latent_factor)
    decoded = np.clip(decoded, 0.0, 1.0).astype(np.float32)
    sel = source_mask.astype(bool)
    out = np.asarray(source, dtype=np.float32).copy()
    out[sel] = decoded[sel]
    return out
