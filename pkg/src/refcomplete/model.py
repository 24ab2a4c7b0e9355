"""Dual-branch latent denoiser.

One small encoder-decoder backbone, instantiated twice with separate
weights: the Reference branch encodes each (pre-masked) reference image at
timestep zero and caches the normalized tokens entering every attention
layer; the Complete branch predicts noise for the masked input, fusing the
cached tokens through region-focused attention and decoupled
cross-attention at those same layers.

The latent space is an exact space-to-depth patchify (factor x factor x 3
pixel blocks become channel vectors), so encode/decode round trips are
bit-exact and pixel-space metrics stay deterministic.

All internals run batched over a leading axis (references in one walk,
batch items or guidance branches in one forward); the public per-item
operations delegate to the same code path.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import (
    ORIGIN_NULL,
    ORIGIN_PROMPT,
    ORIGIN_REFERENCE,
    AttentionWeights,
    DecoupledWeights,
    SemanticTokens,
    decoupled_cross_attention_padded,
    mask_reference_features,
    rfa_attention_padded,
)
from .autodiff import Tensor
from .errors import ConfigurationError, InvalidArgumentError
from .masks import Mask, apply_mask, downsample_mask, footprint_coverage
from .pngio import Raster
from .synth import ReferencePart, part_index

CHECKPOINT_FORMAT_VERSION = 1

REFERENCE_ENCODER_MODES = ("backbone", "semantic_only")

_NEG_BIAS = np.float32(-1e30)  # exp(bias - max) underflows to exactly 0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    latent_factor: int = 8
    base_channels: int = 48
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_levels: tuple[int, ...] = (0, 1)
    token_dim: int = 64
    heads: int = 4
    semantic_token_count: int = 4
    semantic_dim: int = 32
    time_dim: int = 64
    ff_mult: int = 2
    use_reference_mask: bool = True
    use_prompt: bool = True
    reference_encoder_mode: str = "backbone"
    train_reference_encoder: bool = True
    semantic_backend: str = "toy"
    semantic_seed: int = 1234

    def __post_init__(self):
        if self.image_size % self.latent_factor:
            raise InvalidArgumentError("image_size must be divisible by latent_factor")
        if self.token_dim % self.heads:
            raise InvalidArgumentError("token_dim must be divisible by heads")
        levels = len(self.channel_multipliers)
        if any(a < 0 or a >= levels for a in self.attention_levels):
            raise InvalidArgumentError("attention level outside backbone depth")
        if self.reference_encoder_mode not in REFERENCE_ENCODER_MODES:
            raise InvalidArgumentError(
                f"reference_encoder_mode must be one of {REFERENCE_ENCODER_MODES}")
        if self.base_grid % (2 ** (levels - 1)):
            raise InvalidArgumentError("latent grid not divisible across levels")

    @property
    def latent_channels(self) -> int:
        return 3 * self.latent_factor**2

    @property
    def base_grid(self) -> int:
        return self.image_size // self.latent_factor

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    def grid_at_level(self, level: int) -> int:
        return self.base_grid // (2**level)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("channel_multipliers", "attention_levels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("channel_multipliers", "attention_levels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def attention_layer_keys(config: ModelConfig) -> list[str]:
    """Attention layers in forward order; the same indices exist in both
    branches, which is what lets the cache line up."""
    levels = len(config.channel_multipliers)
    keys = [f"enc{l}" for l in range(levels) if l in config.attention_levels]
    if (levels - 1) in config.attention_levels:
        keys.append("mid")
    keys += [f"dec{l}" for l in reversed(range(levels)) if l in config.attention_levels]
    return keys


def layer_level(key: str, config: ModelConfig) -> int:
    if key == "mid":
        return len(config.channel_multipliers) - 1
    return int(key[3:])


# ---------------------------------------------------------------------------
# Latent codec: exact space-to-depth patchify.
# ---------------------------------------------------------------------------

def encode_image_to_latent(image: Raster, factor: int) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"expected (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    if h % factor or w % factor:
        raise InvalidArgumentError(f"image size {(h, w)} not divisible by {factor}")
    x = image.reshape(h // factor, factor, w // factor, factor, 3)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(h // factor, w // factor, factor * factor * 3))


def decode_latent_to_image(latent: np.ndarray, factor: int) -> Raster:
    latent = np.asarray(latent)
    gh, gw, c = latent.shape
    if c != factor * factor * 3:
        raise InvalidArgumentError(f"latent channels {c} != 3*{factor}^2")
    x = latent.reshape(gh, gw, factor, factor, 3)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * factor, gw * factor, 3))


# ---------------------------------------------------------------------------
# Toy semantic backends (deterministic, seed-fixed). Real encoders plug in
# behind the same callable signature.
# ---------------------------------------------------------------------------

def _fixed_matrix(seed_key: str, shape: tuple[int, ...]) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(seed_key.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(np.float32)


def toy_image_tokens(image: np.ndarray, n_tokens: int, dim: int, seed: int,
                     patch: int = 8, mask: np.ndarray | None = None) -> np.ndarray:
    """Seeded linear patch embedding, mean-pooled into ``n_tokens`` tokens.

    With ``mask`` given, pooling weights each patch by its mask coverage, so
    the tokens carry the selected region's content undiluted."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    p = min(patch, h, w)
    hh, ww = (h // p) * p, (w // p) * p
    x = img[:hh, :ww].reshape(hh // p, p, ww // p, p, 3).transpose(0, 2, 1, 3, 4)
    patches = x.reshape(-1, p * p * 3)
    weight = _fixed_matrix(f"toy-image-{seed}-{p}-{dim}", (p * p * 3, dim))
    emb = patches @ weight
    if mask is not None:
        cov = np.asarray(mask, dtype=np.float32)[:hh, :ww]
        cov = cov.reshape(hh // p, p, ww // p, p).mean(axis=(1, 3)).reshape(-1)
    else:
        cov = np.ones(emb.shape[0], dtype=np.float32)
    idx_chunks = np.array_split(np.arange(emb.shape[0]), n_tokens)
    tokens = []
    for idx in idx_chunks:
        if len(idx) == 0:
            tokens.append(np.zeros(dim, np.float32))
            continue
        w_chunk = cov[idx]
        total = w_chunk.sum()
        if total <= 0:
            tokens.append(emb[idx].mean(axis=0))
        else:
            tokens.append((emb[idx] * w_chunk[:, None]).sum(axis=0) / total)
    return np.stack(tokens)


def toy_text_tokens(text: str, dim: int, seed: int) -> np.ndarray:
    """Bag-of-words hashing embedder: one seeded vector per word."""
    words = text.lower().split()
    if not words:
        return np.zeros((0, dim), dtype=np.float32)
    rows = []
    for word in words:
        h = hashlib.sha256(f"toy-text-{seed}-{word}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
        rows.append((rng.standard_normal(dim) / np.sqrt(dim)).astype(np.float32))
    return np.stack(rows)


SEMANTIC_BACKENDS = {"toy": (toy_image_tokens, toy_text_tokens)}


def semantic_encode(
    reference_images: list,
    prompt: str | None,
    config: ModelConfig,
    null_token: Tensor | None = None,
) -> SemanticTokens:
    """Global semantic tokens from references (and optionally the prompt).

    ``reference_images`` holds images or (image, mask) pairs; a mask focuses
    the pooled tokens on the selected region. With nothing to encode,
    returns exactly the null token so downstream attention always has at
    least one key/value row.
    """
    if config.semantic_backend not in SEMANTIC_BACKENDS:
        raise ConfigurationError(f"unknown semantic backend {config.semantic_backend!r}")
    image_fn, text_fn = SEMANTIC_BACKENDS[config.semantic_backend]
    blocks: list[Tensor] = []
    origins: list[str] = []
    for item in reference_images:
        img, mask = item if isinstance(item, tuple) else (item, None)
        tok = image_fn(img, config.semantic_token_count, config.semantic_dim,
                       config.semantic_seed, mask=mask)
        blocks.append(Tensor(tok))
        origins += [ORIGIN_REFERENCE] * tok.shape[0]
    if config.use_prompt and prompt:
        tok = text_fn(prompt, config.semantic_dim, config.semantic_seed)
        if tok.shape[0]:
            blocks.append(Tensor(tok))
            origins += [ORIGIN_PROMPT] * tok.shape[0]
    if not blocks:
        null = null_token if null_token is not None else Tensor(
            np.zeros((1, config.semantic_dim), dtype=np.float32))
        return SemanticTokens(tokens=null, origins=(ORIGIN_NULL,))
    tokens = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
    return SemanticTokens(tokens=tokens, origins=tuple(origins))


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

@dataclass
class FeatureCache:
    """Write-once store of per-(reference, layer) tokens plus kept-token
    indices and the semantic tokens. Built once per request, read by every
    attention layer."""

    ref_keys: tuple[str, ...]
    layer_tokens: dict[tuple[str, str], Tensor] = field(default_factory=dict)
    kept_indices: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    semantic: SemanticTokens | None = None
    mode: str = "backbone"

    def freeze(self) -> None:
        for t in self.layer_tokens.values():
            t.data.setflags(write=False)
        for idx in self.kept_indices.values():
            idx.setflags(write=False)

    def masked_refs(self, layer_key: str) -> list[Tensor]:
        out = []
        for rk in self.ref_keys:
            key = (rk, layer_key)
            if key in self.layer_tokens:
                out.append(mask_reference_features(self.layer_tokens[key],
                                                   self.kept_indices[key]))
        return out

    def snapshot(self) -> dict:
        return {k: v.data.copy() for k, v in self.layer_tokens.items()}


def caches_equal(a: FeatureCache, b: FeatureCache) -> bool:
    if a.ref_keys != b.ref_keys or a.mode != b.mode:
        return False
    if set(a.layer_tokens) != set(b.layer_tokens):
        return False
    for k in a.layer_tokens:
        if not np.array_equal(a.layer_tokens[k].data, b.layer_tokens[k].data):
            return False
        if not np.array_equal(a.kept_indices[k], b.kept_indices[k]):
            return False
    sa, sb = a.semantic, b.semantic
    if (sa is None) != (sb is None):
        return False
    if sa is not None:
        if sa.origins != sb.origins or not np.array_equal(sa.tokens.data, sb.tokens.data):
            return False
    return True


def kept_token_indices(ref_mask: Mask, pixel_factor: int) -> np.ndarray:
    """Flat indices of latent cells the reference mask keeps at a layer.

    A degenerate mask (no cell reaches 50% coverage) keeps the single cell
    with maximum coverage so K/V segments are never empty.
    """
    cells = downsample_mask(ref_mask, pixel_factor)
    kept = np.flatnonzero(cells.ravel())
    if kept.size == 0:
        cov = footprint_coverage(ref_mask, pixel_factor).ravel()
        kept = np.array([int(np.argmax(cov))], dtype=np.int64)
    return kept.astype(np.int64)


def sinusoidal_embedding(ts: np.ndarray, dim: int) -> np.ndarray:
    """(B,) timesteps -> (B, dim) sin/cos features."""
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


@dataclass
class _BatchConditioning:
    """Per-step padded conditioning streams for a batched complete forward."""

    ref_pad: dict[str, Tensor]            # layer key -> (B, R, c_layer)
    ref_bias: dict[str, np.ndarray]       # layer key -> (B, 1, 1, n + R)
    prompt_tokens: Tensor                 # (B, P, semantic_dim)
    prompt_bias: np.ndarray | None
    image_tokens: Tensor                  # (B, I, semantic_dim)
    image_bias: np.ndarray | None


class Model:
    """Both branches: parameters are a flat name -> Tensor dict; the
    reference branch is initialized as a copy of the complete branch where
    shapes line up."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()

    # -- parameter construction -------------------------------------------
    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(value, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def _linear_init(self, fan_in: int, fan_out: int, zero: bool = False) -> np.ndarray:
        if zero:
            return np.zeros((fan_in, fan_out), dtype=np.float32)
        return (self._rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(
            np.float32)

    def _add_resblock(self, prefix: str, width: int) -> None:
        cfg = self.config
        self._param(f"{prefix}.ln1.g", np.ones(width))
        self._param(f"{prefix}.ln1.b", np.zeros(width))
        self._param(f"{prefix}.w1", self._linear_init(width, width))
        self._param(f"{prefix}.b1", np.zeros(width))
        self._param(f"{prefix}.temb.w", self._linear_init(cfg.time_dim, width))
        self._param(f"{prefix}.temb.b", np.zeros(width))
        self._param(f"{prefix}.ln2.g", np.ones(width))
        self._param(f"{prefix}.ln2.b", np.zeros(width))
        self._param(f"{prefix}.w2", self._linear_init(width, width, zero=True))
        self._param(f"{prefix}.b2", np.zeros(width))

    def _add_attention(self, prefix: str, width: int, with_cross: bool) -> None:
        cfg = self.config
        d, sd = cfg.token_dim, cfg.semantic_dim
        self._param(f"{prefix}.ln1.g", np.ones(width))
        self._param(f"{prefix}.ln1.b", np.zeros(width))
        for n in ("wq", "wk", "wv"):
            self._param(f"{prefix}.rfa.{n}", self._linear_init(width, d))
        self._param(f"{prefix}.rfa.wo", 0.2 * self._linear_init(d, width))
        if with_cross:
            self._param(f"{prefix}.ln2.g", np.ones(width))
            self._param(f"{prefix}.ln2.b", np.zeros(width))
            self._param(f"{prefix}.dec.wq", self._linear_init(width, d))
            for n in ("wk_prompt", "wv_prompt", "wk_image", "wv_image"):
                self._param(f"{prefix}.dec.{n}", self._linear_init(sd, d))
            self._param(f"{prefix}.dec.wo", 0.2 * self._linear_init(d, width))
        self._param(f"{prefix}.ln3.g", np.ones(width))
        self._param(f"{prefix}.ln3.b", np.zeros(width))
        hidden = cfg.ff_mult * width
        self._param(f"{prefix}.ff.w1", self._linear_init(width, hidden))
        self._param(f"{prefix}.ff.b1", np.zeros(hidden))
        self._param(f"{prefix}.ff.w2", 0.2 * self._linear_init(hidden, width))
        self._param(f"{prefix}.ff.b2", np.zeros(width))

    def _add_branch(self, branch: str, in_channels: int, with_cross: bool,
                    with_out: bool) -> None:
        cfg = self.config
        widths = cfg.widths
        levels = len(widths)
        self._param(f"{branch}.in_proj.w", self._linear_init(in_channels, widths[0]))
        self._param(f"{branch}.in_proj.b", np.zeros(widths[0]))
        self._param(f"{branch}.time.w1", self._linear_init(cfg.time_dim, cfg.time_dim))
        self._param(f"{branch}.time.b1", np.zeros(cfg.time_dim))
        self._param(f"{branch}.time.w2", self._linear_init(cfg.time_dim, cfg.time_dim))
        self._param(f"{branch}.time.b2", np.zeros(cfg.time_dim))
        for l, w in enumerate(widths):
            g = cfg.grid_at_level(l)
            self._param(f"{branch}.pos.l{l}",
                        0.02 * self._rng.standard_normal((g * g, w)))
            self._add_resblock(f"{branch}.enc{l}.res", w)
            if l in cfg.attention_levels:
                self._add_attention(f"{branch}.attn.enc{l}", w, with_cross)
            if l < levels - 1:
                self._param(f"{branch}.down{l}.w", self._linear_init(4 * w, widths[l + 1]))
                self._param(f"{branch}.down{l}.b", np.zeros(widths[l + 1]))
        self._add_resblock(f"{branch}.mid.res1", widths[-1])
        if (levels - 1) in cfg.attention_levels:
            self._add_attention(f"{branch}.attn.mid", widths[-1], with_cross)
        self._add_resblock(f"{branch}.mid.res2", widths[-1])
        for l in reversed(range(levels)):
            w = widths[l]
            if l < levels - 1:
                self._param(f"{branch}.up{l}.w", self._linear_init(widths[l + 1], 4 * w))
                self._param(f"{branch}.up{l}.b", np.zeros(4 * w))
            self._param(f"{branch}.fuse{l}.w", self._linear_init(2 * w, w))
            self._param(f"{branch}.fuse{l}.b", np.zeros(w))
            self._add_resblock(f"{branch}.dec{l}.res", w)
            if l in cfg.attention_levels:
                self._add_attention(f"{branch}.attn.dec{l}", w, with_cross)
        if with_out:
            self._param(f"{branch}.out.ln.g", np.ones(widths[0]))
            self._param(f"{branch}.out.ln.b", np.zeros(widths[0]))
            self._param(f"{branch}.out.w",
                        self._linear_init(widths[0], cfg.latent_channels, zero=True))
            self._param(f"{branch}.out.b", np.zeros(cfg.latent_channels))
            # Time-gated input skip: the noise target is a t-dependent linear
            # combination of the raw input channels plus content; the gate
            # makes that algebra representable regardless of stream width.
            self._param(f"{branch}.skipgate.w", self._linear_init(cfg.time_dim, in_channels))
            self._param(f"{branch}.skipgate.b", np.ones(in_channels))
            self._param(f"{branch}.skip.w",
                        0.2 * self._linear_init(in_channels, cfg.latent_channels))

    def _build(self) -> None:
        cfg = self.config
        in_ch = 2 * cfg.latent_channels + 1  # noisy + mask + masked input
        self._add_branch("comp", in_ch, with_cross=True, with_out=True)
        self._param("comp.null", 0.02 * self._rng.standard_normal((1, cfg.semantic_dim)))
        self._add_branch("ref", cfg.latent_channels, with_cross=False, with_out=False)
        # Reference branch starts as a copy of the complete branch wherever
        # the shapes line up (everything but its input projection).
        for name, tensor in list(self.params.items()):
            if not name.startswith("ref."):
                continue
            twin = "comp." + name[4:]
            if twin in self.params and self.params[twin].data.shape == tensor.data.shape:
                tensor.data = self.params[twin].data.copy()

    # -- small weight accessors -------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _rfa_weights(self, branch: str, key: str) -> AttentionWeights:
        p = f"{branch}.attn.{key}.rfa"
        return AttentionWeights(self._p(f"{p}.wq"), self._p(f"{p}.wk"),
                                self._p(f"{p}.wv"), self._p(f"{p}.wo"),
                                heads=self.config.heads)

    def _dec_weights(self, key: str) -> DecoupledWeights:
        p = f"comp.attn.{key}.dec"
        return DecoupledWeights(
            wq=self._p(f"{p}.wq"),
            wk_prompt=self._p(f"{p}.wk_prompt"), wv_prompt=self._p(f"{p}.wv_prompt"),
            wk_image=self._p(f"{p}.wk_image"), wv_image=self._p(f"{p}.wv_image"),
            wo=self._p(f"{p}.wo"), null_token=self._p("comp.null"),
            heads=self.config.heads)

    # -- forward building blocks (all tensors are (B, tokens, channels)) ---
    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return ad.matmul(x, self._p(f"{prefix}.w")) + self._p(f"{prefix}.b")

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def _time_embedding(self, branch: str, ts: np.ndarray) -> Tensor:
        cfg = self.config
        base = Tensor(sinusoidal_embedding(ts, cfg.time_dim))
        h = ad.matmul(base, self._p(f"{branch}.time.w1")) + self._p(f"{branch}.time.b1")
        h = ad.silu(h)
        h = ad.matmul(h, self._p(f"{branch}.time.w2")) + self._p(f"{branch}.time.b2")
        return ad.reshape(h, (h.shape[0], 1, cfg.time_dim))

    def _resblock(self, prefix: str, x: Tensor, temb: Tensor) -> Tensor:
        h = ad.silu(self._ln(f"{prefix}.ln1", x))
        h = ad.matmul(h, self._p(f"{prefix}.w1")) + self._p(f"{prefix}.b1")
        h = h + (ad.matmul(temb, self._p(f"{prefix}.temb.w")) + self._p(f"{prefix}.temb.b"))
        h = ad.silu(self._ln(f"{prefix}.ln2", h))
        h = ad.matmul(h, self._p(f"{prefix}.w2")) + self._p(f"{prefix}.b2")
        return x + h

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        h = ad.silu(ad.matmul(x, self._p(f"{prefix}.w1")) + self._p(f"{prefix}.b1"))
        return ad.matmul(h, self._p(f"{prefix}.w2")) + self._p(f"{prefix}.b2")

    def _attn_block(self, branch: str, key: str, x: Tensor,
                    cond: _BatchConditioning | None,
                    capture: dict | None) -> Tensor:
        prefix = f"{branch}.attn.{key}"
        h = self._ln(f"{prefix}.ln1", x)
        if capture is not None:
            capture[key] = h
        if cond is not None:
            refs = cond.ref_pad.get(key)
            bias = cond.ref_bias.get(key)
        else:
            refs, bias = None, None
        x = x + rfa_attention_padded(h, refs, bias, self._rfa_weights(branch, key))
        if branch == "comp":
            x = x + decoupled_cross_attention_padded(
                self._ln(f"{prefix}.ln2", x),
                cond.prompt_tokens, cond.prompt_bias,
                cond.image_tokens, cond.image_bias,
                self._dec_weights(key))
        return x + self._ff(f"{prefix}.ff", self._ln(f"{prefix}.ln3", x))

    @staticmethod
    def _space_to_depth(x: Tensor, g: int) -> Tensor:
        b, _, c = x.shape
        x = ad.reshape(x, (b, g // 2, 2, g // 2, 2, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, (g // 2) * (g // 2), 4 * c))

    @staticmethod
    def _depth_to_space(x: Tensor, g: int) -> Tensor:
        b, _, c4 = x.shape
        c = c4 // 4
        x = ad.reshape(x, (b, g, g, 2, 2, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, 4 * g * g, c))

    def _walk(self, branch: str, tokens: Tensor, temb: Tensor,
              cond: _BatchConditioning | None = None,
              capture: dict | None = None) -> Tensor:
        cfg = self.config
        levels = len(cfg.widths)
        x = tokens + self._p(f"{branch}.pos.l0")
        skips = []
        for l in range(levels):
            x = self._resblock(f"{branch}.enc{l}.res", x, temb)
            if l in cfg.attention_levels:
                x = self._attn_block(branch, f"enc{l}", x, cond, capture)
            skips.append(x)
            if l < levels - 1:
                g = cfg.grid_at_level(l)
                x = self._linear(f"{branch}.down{l}", self._space_to_depth(x, g))
                x = x + self._p(f"{branch}.pos.l{l + 1}")
        x = self._resblock(f"{branch}.mid.res1", x, temb)
        if (levels - 1) in cfg.attention_levels:
            x = self._attn_block(branch, "mid", x, cond, capture)
        x = self._resblock(f"{branch}.mid.res2", x, temb)
        for l in reversed(range(levels)):
            if l < levels - 1:
                g = cfg.grid_at_level(l + 1)
                x = self._depth_to_space(self._linear(f"{branch}.up{l}", x), g)
                x = x + self._p(f"{branch}.pos.l{l}")
            x = self._linear(f"{branch}.fuse{l}", ad.concat([x, skips[l]], axis=2))
            x = self._resblock(f"{branch}.dec{l}.res", x, temb)
            if l in cfg.attention_levels:
                x = self._attn_block(branch, f"dec{l}", x, cond, capture)
        return x

    # -- reference encoding -------------------------------------------------
    def _prepare_reference(self, ref: ReferencePart):
        cfg = self.config
        ref.validate()
        if ref.image.shape[:2] != (cfg.image_size, cfg.image_size):
            raise InvalidArgumentError(
                f"reference image size {ref.image.shape[:2]} != model size")
        img = apply_mask(ref.image, 1 - ref.mask, 0.0) if cfg.use_reference_mask \
            else np.asarray(ref.image, dtype=np.float32)
        digest = hashlib.sha1(img.tobytes() + ref.mask.tobytes()).hexdigest()[:8]
        return (part_index(ref.label), digest, ref, img)

    def encode_reference_batch(
            self, items: list[tuple[list[ReferencePart], str | None]],
    ) -> list[FeatureCache]:
        """Build one FeatureCache per (references, prompt) item; every
        reference across all items runs through a single backbone walk."""
        cfg = self.config
        prepared_per_item = []
        for refs, _ in items:
            if len(refs) > 6:
                raise InvalidArgumentError("at most 6 references are supported")
            prepared = sorted((self._prepare_reference(r) for r in refs),
                              key=lambda it: (it[0], it[1]))
            prepared_per_item.append(prepared)

        flat = [p for prepared in prepared_per_item for p in prepared]
        captures: dict[str, Tensor] = {}
        if flat and cfg.reference_encoder_mode == "backbone":
            latents = np.stack([
                encode_image_to_latent(img, cfg.latent_factor).reshape(
                    -1, cfg.latent_channels) * 2.0 - 1.0
                for (_, _, _, img) in flat]).astype(np.float32)
            tokens = self._linear("ref.in_proj", Tensor(latents))
            temb = self._time_embedding("ref", np.zeros(len(flat)))
            self._walk("ref", tokens, temb, capture=captures)

        caches = []
        offset = 0
        for prepared, (refs, prompt) in zip(prepared_per_item, items):
            cache = FeatureCache(
                ref_keys=tuple(f"{it[2].label}#{it[1]}" for it in prepared),
                mode=cfg.reference_encoder_mode)
            if cfg.reference_encoder_mode == "backbone":
                for j, (_, _, ref, _) in enumerate(prepared):
                    row = offset + j
                    for layer_key, captured in captures.items():
                        n_l = captured.shape[1]
                        toks = ad.reshape(
                            ad.gather_rows(captured, np.array([row])),
                            (n_l, captured.shape[2]))
                        level = layer_level(layer_key, cfg)
                        pixel_factor = cfg.latent_factor * (2**level)
                        if cfg.use_reference_mask:
                            kept = kept_token_indices(ref.mask, pixel_factor)
                        else:
                            kept = np.arange(n_l, dtype=np.int64)
                        rk = cache.ref_keys[j]
                        cache.layer_tokens[(rk, layer_key)] = toks
                        cache.kept_indices[(rk, layer_key)] = kept
            cache.semantic = semantic_encode(
                [(it[3], it[2].mask) for it in prepared], prompt, cfg,
                null_token=self._p("comp.null"))
            cache.freeze()
            caches.append(cache)
            offset += len(prepared)
        return caches

    def reference_encode(self, references: list[ReferencePart],
                         prompt: str | None = None) -> FeatureCache:
        """Encode references at timestep zero and build the feature cache.

        With ``use_reference_mask`` on, each reference image is pre-masked
        to its reference mask (token drop then excludes the zeroed cells
        from K/V), so the cache is exactly independent of content outside
        the reference masks.
        """
        return self.encode_reference_batch([(references, prompt)])[0]

    # -- complete branch ------------------------------------------------------
    def _semantic_stream(self, cache: FeatureCache, origin: str) -> Tensor:
        sem = cache.semantic
        idx = sem.rows(origin)
        if idx.size == 0:
            idx = sem.rows(ORIGIN_NULL)
        if idx.size == 0:
            return self._p("comp.null")
        return ad.gather_rows(sem.tokens, idx)

    def _pad_stack(self, rows: list[Tensor], width: int):
        """Stack ragged (k_i, width) tensors into (B, K, width) + key bias."""
        B = len(rows)
        K = max(r.shape[0] for r in rows)
        bias = np.zeros((B, 1, 1, K), dtype=np.float32)
        stacked = []
        for b, r in enumerate(rows):
            k = r.shape[0]
            if k < K:
                pad = Tensor(np.zeros((K - k, width), dtype=np.float32))
                r = ad.concat([r, pad], axis=0)
                bias[b, :, :, k:] = _NEG_BIAS
            stacked.append(ad.reshape(r, (1, K, width)))
        out = stacked[0] if B == 1 else ad.concat(stacked, axis=0)
        if not bias.any():
            return out, None
        return out, bias

    def _build_conditioning(self, caches: list[FeatureCache]) -> _BatchConditioning:
        cfg = self.config
        keys = attention_layer_keys(cfg)
        B = len(caches)
        n0 = cfg.base_grid**2
        ref_pad: dict[str, Tensor] = {}
        ref_bias: dict[str, np.ndarray] = {}
        for key in keys:
            level = layer_level(key, cfg)
            c_l = cfg.widths[level]
            n_l = cfg.grid_at_level(level)**2
            per_item = []
            sizes = []
            for cache in caches:
                toks = cache.masked_refs(key)
                merged = ad.concat(toks, axis=0) if len(toks) > 1 else \
                    (toks[0] if toks else Tensor(np.zeros((0, c_l), np.float32)))
                per_item.append(merged)
                sizes.append(merged.shape[0])
            R = max(sizes)
            if R == 0:
                continue
            stacked, _ = self._pad_stack(per_item, c_l)
            bias = np.zeros((B, 1, 1, n_l + R), dtype=np.float32)
            for b, k in enumerate(sizes):
                bias[b, :, :, n_l + k:] = _NEG_BIAS
            ref_pad[key] = stacked
            ref_bias[key] = bias
        prompt_rows = [self._semantic_stream(c, ORIGIN_PROMPT) for c in caches]
        image_rows = [self._semantic_stream(c, ORIGIN_REFERENCE) for c in caches]
        prompt_tokens, prompt_bias = self._pad_stack(prompt_rows, cfg.semantic_dim)
        image_tokens, image_bias = self._pad_stack(image_rows, cfg.semantic_dim)
        return _BatchConditioning(ref_pad=ref_pad, ref_bias=ref_bias,
                                  prompt_tokens=prompt_tokens, prompt_bias=prompt_bias,
                                  image_tokens=image_tokens, image_bias=image_bias)

    def complete_forward_batch(self, noisy_latents: np.ndarray,
                               latent_masks: np.ndarray,
                               masked_input_latents: np.ndarray,
                               ts: np.ndarray,
                               caches: list[FeatureCache]) -> Tensor:
        """Batched noise prediction: (B, g, g, C) in, (B, g, g, C) out."""
        cfg = self.config
        g, cl = cfg.base_grid, cfg.latent_channels
        B = len(caches)
        noisy = np.asarray(noisy_latents, dtype=np.float32)
        masked = np.asarray(masked_input_latents, dtype=np.float32)
        lmask = np.asarray(latent_masks)
        if noisy.shape != (B, g, g, cl) or masked.shape != (B, g, g, cl):
            raise InvalidArgumentError(f"latent batch shape must be {(B, g, g, cl)}")
        if lmask.shape != (B, g, g):
            raise InvalidArgumentError(f"latent mask batch must be {(B, g, g)}")
        layer_keys = set(attention_layer_keys(cfg))
        for cache in caches:
            for (_, layer_key) in cache.layer_tokens:
                if layer_key not in layer_keys:
                    raise ConfigurationError(
                        f"cache layer {layer_key!r} unknown to this architecture")
            if cache.semantic is None:
                raise ConfigurationError("cache has no semantic tokens")

        stacked = Tensor(np.concatenate(
            [noisy.reshape(B, -1, cl),
             lmask.reshape(B, -1, 1).astype(np.float32),
             masked.reshape(B, -1, cl)], axis=2))
        cond = self._build_conditioning(caches)
        x = self._linear("comp.in_proj", stacked)
        temb = self._time_embedding("comp", np.asarray(ts, dtype=np.float64))
        x = self._walk("comp", x, temb, cond=cond)
        x = ad.silu(self._ln("comp.out.ln", x))
        x = self._linear("comp.out", x)
        gates = ad.matmul(ad.silu(temb), self._p("comp.skipgate.w")) \
            + self._p("comp.skipgate.b")
        x = x + ad.matmul(ad.mul(gates, stacked), self._p("comp.skip.w"))
        return ad.reshape(x, (B, g, g, cl))

    def complete_forward(self, noisy_latent: np.ndarray, latent_mask: Mask,
                         masked_input_latent: np.ndarray, t: int,
                         cache: FeatureCache) -> Tensor:
        """Predict noise for one latent; output shape equals the input latent."""
        cfg = self.config
        g, cl = cfg.base_grid, cfg.latent_channels
        noisy = np.asarray(noisy_latent, dtype=np.float32)
        if noisy.shape != (g, g, cl):
            raise InvalidArgumentError(f"latent shape must be {(g, g, cl)}")
        if np.asarray(latent_mask).shape != (g, g):
            raise InvalidArgumentError(f"latent mask must be {(g, g)}")
        out = self.complete_forward_batch(
            noisy[None], np.asarray(latent_mask)[None],
            np.asarray(masked_input_latent, dtype=np.float32)[None],
            np.array([t]), [cache])
        return ad.reshape(out, (g, g, cl))

    # -- persistence --------------------------------------------------------
    def branch_params(self, branch: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(branch + ".")}

    def trainable_params(self) -> dict[str, Tensor]:
        if self.config.train_reference_encoder:
            return dict(self.params)
        return {k: v for k, v in self.params.items() if not k.startswith("ref.")}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Single zip archive of named float32 little-endian arrays + config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION,
               "config": model.config.to_dict()}
    arrays = {name: np.ascontiguousarray(t.data, dtype="<f4")
              for name, t in model.params.items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    buf.seek(0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(payload, indent=2, sort_keys=True))
        zf.writestr("weights.npz", buf.read())


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path) as zf:
        payload = json.loads(zf.read("config.json"))
        weights = np.load(io.BytesIO(zf.read("weights.npz")))
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported checkpoint format {payload.get('format_version')}")
        config = ModelConfig.from_dict(payload["config"])
        model = Model(config, seed=0)
        names = set(weights.files)
        if names != set(model.params):
            missing = set(model.params) - names
            extra = names - set(model.params)
            raise ConfigurationError(
                f"checkpoint/architecture mismatch (missing={sorted(missing)[:3]}, "
                f"extra={sorted(extra)[:3]})")
        for name, tensor in model.params.items():
            arr = np.ascontiguousarray(weights[name], dtype=np.float32)
            if arr.shape != tensor.data.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}")
            tensor.data = arr
    return model
