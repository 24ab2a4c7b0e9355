"""Masked-region image quality metrics and embedding similarities.

PSNR / SSIM / perceptual distances are computed only over (or cropped to)
the source mask, so they are exactly invariant to changes outside it.
Embedding similarities (image-image and text-image) run full-image through
pluggable backends; the built-in toy backends are deterministic seeded
linear embedders so test expectations stay stable. Real encoders register
under new ids behind the same interface.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError
from .masks import Mask, validate_mask
from .model import toy_image_tokens, toy_text_tokens
from .pngio import Raster

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

REPORT_COLUMNS = ("clip_i_analog", "clip_t_analog", "dino_analog",
                  "dreamsim_analog", "lpips_analog", "psnr", "ssim")
_DISPLAY = {"clip_i_analog": "CLIP-I", "clip_t_analog": "CLIP-T",
            "dino_analog": "DINO", "dreamsim_analog": "DreamSim",
            "lpips_analog": "LPIPS", "psnr": "PSNR", "ssim": "SSIM"}


def _check_pair(a: Raster, b: Raster, m: Mask) -> tuple[np.ndarray, np.ndarray, Mask]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = validate_mask(m)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[:2] != m.shape:
        raise InvalidArgumentError("mask does not match image size")
    return a, b, m


def masked_psnr(a: Raster, b: Raster, m: Mask) -> float:
    """PSNR in dB over masked pixels only, for [0,1] images; capped at 99."""
    a, b, m = _check_pair(a, b, m)
    sel = m.astype(bool)
    if not sel.any():
        raise InvalidArgumentError("mask is empty")
    diff = a[sel] - b[sel]
    mse = float(np.mean(diff * diff))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def mask_bbox(m: Mask) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise InvalidArgumentError("mask is empty")
    return int(rows[0]), int(cols[0]), int(rows[-1] + 1), int(cols[-1] + 1)


def _window_means(channel: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Per-pixel weighted window statistics with reflect padding, so every
    crop pixel is a valid window center."""
    half = window.shape[0] // 2
    padded = np.pad(channel, half, mode="reflect")
    view = np.lib.stride_tricks.sliding_window_view(padded, window.shape)
    return np.einsum("ijkl,kl->ij", view, window)


def masked_ssim(a: Raster, b: Raster, m: Mask) -> float:
    """Structural similarity on the mask bounding-box crop, Gaussian 11x11
    window (sigma 1.5), averaged over window centers inside the mask and
    over color channels."""
    a, b, m = _check_pair(a, b, m)
    r0, c0, r1, c1 = mask_bbox(m)
    if (r1 - r0) < SSIM_WINDOW or (c1 - c0) < SSIM_WINDOW:
        raise InvalidArgumentError(
            f"mask bounding box {(r1 - r0, c1 - c0)} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    crop_a = a[r0:r1, c0:c1]
    crop_b = b[r0:r1, c0:c1]
    crop_m = m[r0:r1, c0:c1].astype(bool)
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1_const = SSIM_K1**2
    c2_const = SSIM_K2**2
    values = []
    for ch in range(crop_a.shape[2]):
        xa, xb = crop_a[..., ch], crop_b[..., ch]
        mu_a = _window_means(xa, window)
        mu_b = _window_means(xb, window)
        var_a = _window_means(xa * xa, window) - mu_a**2
        var_b = _window_means(xb * xb, window) - mu_b**2
        cov = _window_means(xa * xb, window) - mu_a * mu_b
        ssim_map = ((2 * mu_a * mu_b + c1_const) * (2 * cov + c2_const)) / (
            (mu_a**2 + mu_b**2 + c1_const) * (var_a + var_b + c2_const))
        values.append(float(ssim_map[crop_m].mean()))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Embedding backends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingBackend:
    name: str
    image_seed: int
    text_seed: int | None = None  # None: backend has no text tower
    dim: int = 64

    def embed_image(self, image: Raster) -> np.ndarray:
        tokens = toy_image_tokens(np.asarray(image, dtype=np.float32),
                                  n_tokens=4, dim=self.dim, seed=self.image_seed)
        return tokens.mean(axis=0)

    def embed_text(self, text: str) -> np.ndarray:
        if self.text_seed is None:
            raise ConfigurationError(f"backend {self.name!r} has no text encoder")
        tokens = toy_text_tokens(text, dim=self.dim, seed=self.text_seed)
        if tokens.shape[0] == 0:
            return np.zeros(self.dim, dtype=np.float32)
        return tokens.mean(axis=0)


EMBEDDING_BACKENDS: dict[str, EmbeddingBackend] = {
    "toy-clip": EmbeddingBackend("toy-clip", image_seed=11, text_seed=12),
    "toy-dino": EmbeddingBackend("toy-dino", image_seed=21),
}


def get_backend(backend_id: str) -> EmbeddingBackend:
    try:
        return EMBEDDING_BACKENDS[backend_id]
    except KeyError:
        raise ConfigurationError(f"unknown embedding backend {backend_id!r}") from None


def embedding_similarity(a, b: Raster, backend_id: str = "toy-clip") -> float:
    """Cosine similarity of backend embeddings, reported x100.

    ``a`` may be an image (image-image similarity) or a string (text-image).
    """
    backend = get_backend(backend_id)
    va = backend.embed_text(a) if isinstance(a, str) else backend.embed_image(a)
    vb = backend.embed_image(b)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(100.0 * np.dot(va, vb) / (na * nb))


# ---------------------------------------------------------------------------
# Perceptual distance (toy: multi-scale seeded-filter responses)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerceptualBackend:
    name: str
    seed: int
    scales: tuple[int, ...] = (1, 2)
    n_filters: int = 6

    def _filters(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        banks = rng.standard_normal((self.n_filters, 3, 3))
        banks -= banks.mean(axis=(1, 2), keepdims=True)
        identity = np.zeros((1, 3, 3))
        identity[0, 1, 1] = 1.0  # raw-difference channel: zero distance iff equal
        return np.concatenate([identity, banks])

    def responses(self, crop: np.ndarray) -> np.ndarray:
        gray = crop.mean(axis=2)
        outs = []
        filters = self._filters()
        for s in self.scales:
            h, w = gray.shape
            hh, ww = (h // s) * s, (w // s) * s
            if hh < 3 or ww < 3:
                continue
            x = gray[:hh, :ww].reshape(hh // s, s, ww // s, s).mean(axis=(1, 3))
            if x.shape[0] < 3 or x.shape[1] < 3:
                continue
            view = np.lib.stride_tricks.sliding_window_view(x, (3, 3))
            outs.append(np.einsum("ijkl,fkl->fij", view, filters).ravel())
        if not outs:
            return gray.ravel()
        return np.concatenate(outs)


PERCEPTUAL_BACKENDS: dict[str, PerceptualBackend] = {
    "toy-lpips": PerceptualBackend("toy-lpips", seed=31),
    "toy-dreamsim": PerceptualBackend("toy-dreamsim", seed=41, scales=(1, 2, 4)),
}


def perceptual_distance(a: Raster, b: Raster, m: Mask,
                        backend_id: str = "toy-lpips") -> float:
    """Mean absolute difference of seeded filter responses on the mask
    bounding-box crops; zero iff the crops are identical."""
    if backend_id not in PERCEPTUAL_BACKENDS:
        raise ConfigurationError(f"unknown perceptual backend {backend_id!r}")
    backend = PERCEPTUAL_BACKENDS[backend_id]
    a, b, m = _check_pair(a, b, m)
    r0, c0, r1, c1 = mask_bbox(m)
    ra = backend.responses(a[r0:r1, c0:c1])
    rb = backend.responses(b[r0:r1, c0:c1])
    return float(np.mean(np.abs(ra - rb)))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    group_ids: list[str]
    rows: dict[str, dict[str, float]]
    means: dict[str, float]
    columns: tuple[str, ...] = REPORT_COLUMNS
    backends: dict[str, str] = field(default_factory=dict)

    @property
    def group_count(self) -> int:
        return len(self.group_ids)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["group_id", *self.columns])
        for gid in self.group_ids:
            row = self.rows[gid]
            writer.writerow([gid] + [f"{row[c]:.6f}" for c in self.columns])
        writer.writerow(["MEAN"] + [f"{self.means[c]:.6f}" for c in self.columns])
        return buf.getvalue()

    def to_table(self) -> str:
        headers = ["group"] + [_DISPLAY.get(c, c) for c in self.columns]
        lines = [["MEAN"] + [f"{self.means[c]:.4f}" for c in self.columns]]
        for gid in self.group_ids:
            lines.append([gid] + [f"{self.rows[gid][c]:.4f}" for c in self.columns])
        widths = [max(len(h), max(len(l[i]) for l in lines))
                  for i, h in enumerate(headers)]
        def fmt(cells):
            return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([fmt(headers)] + [fmt(l) for l in lines])


def aggregate_report(rows: dict[str, dict[str, float]],
                     backends: dict[str, str] | None = None) -> MetricReport:
    """Arithmetic means per column; rejects ragged rows."""
    if not rows:
        raise InvalidArgumentError("no metric rows to aggregate")
    columns = None
    for gid, row in rows.items():
        cols = tuple(c for c in REPORT_COLUMNS if c in row)
        cols += tuple(sorted(set(row) - set(REPORT_COLUMNS)))
        if set(cols) != set(row):
            cols = tuple(sorted(row))
        if columns is None:
            columns = cols
        elif set(cols) != set(columns):
            raise InvalidArgumentError(f"ragged metric row for group {gid!r}")
    group_ids = sorted(rows)
    means = {c: math.fsum(rows[g][c] for g in group_ids) / len(group_ids)
             for c in columns}
    return MetricReport(group_ids=group_ids, rows={g: dict(rows[g]) for g in group_ids},
                        means=means, columns=columns, backends=dict(backends or {}))
