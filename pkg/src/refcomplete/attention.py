"""Region-focused attention and decoupled cross-attention.

Region-focused attention takes its queries from the input tokens and its
keys/values from the input tokens concatenated with mask-filtered reference
tokens, so attention can only land on regions the reference masks kept.
Reference masking is token DROP (exclusion from K/V), not zero-fill: a
dropped token is absent, which turns "focus on relevant regions" into a
provable invariance.

Decoupled cross-attention runs two parallel cross-attentions over the same
queries -- one against prompt-stream tokens, one against semantic image
tokens -- and sums their outputs before the shared output projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, gather_rows, matmul, reshape, softmax, transpose
from .errors import InternalError, InvalidArgumentError

ORIGIN_REFERENCE = "reference_image"
ORIGIN_PROMPT = "text_prompt"
ORIGIN_NULL = "null_token"


@dataclass
class SemanticTokens:
    """Global conditioning tokens with per-row provenance."""

    tokens: Tensor  # (n, semantic_dim)
    origins: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tokens.data.ndim != 2 or self.tokens.data.shape[0] != len(self.origins):
            raise InvalidArgumentError("semantic token/origin mismatch")

    def rows(self, origin: str) -> np.ndarray:
        return np.flatnonzero([o == origin for o in self.origins])


@dataclass
class AttentionWeights:
    """Projections of one (multi-head) attention: c_in -> d -> c_out."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int = 1


@dataclass
class DecoupledWeights:
    """Two K/V streams sharing the query and output projections, plus the
    learned null token substituted for an empty stream."""

    wq: Tensor
    wk_prompt: Tensor
    wv_prompt: Tensor
    wk_image: Tensor
    wv_image: Tensor
    wo: Tensor
    null_token: Tensor  # (1, semantic_dim)
    heads: int = 1


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d/heads)."""
    *batch, n, d = x.shape
    if d % heads:
        raise InvalidArgumentError(f"token dim {d} not divisible by {heads} heads")
    x = reshape(x, (*batch, n, heads, d // heads))
    nb = len(batch)
    axes = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *batch, h, n, dh = x.shape
    nb = len(batch)
    axes = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    return reshape(transpose(x, axes), (*batch, n, h * dh))


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         key_bias: np.ndarray | None = None,
                         return_probs: bool = False):
    """Multi-head Softmax(QK^T / sqrt(d_head)) V on (..., tokens, dim) inputs.

    ``key_bias`` is an additive constant on the scores (broadcast over query
    rows); -inf-like entries exclude padded key columns exactly.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise InvalidArgumentError("q/k/v dims disagree after projection")
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scale = 1.0 / np.sqrt(d // heads)
    scores = matmul(qh, _swap_last(kh)) * scale
    if key_bias is not None:
        scores = scores + Tensor(key_bias)
    probs = softmax(scores, axis=-1)
    out = _merge_heads(matmul(probs, vh))
    if return_probs:
        return out, probs
    return out


def mask_reference_features(layer_tokens: Tensor, kept_indices: np.ndarray) -> Tensor:
    """Keep exactly the rows listed in ``kept_indices`` (token drop)."""
    layer_tokens = as_tensor(layer_tokens)
    idx = np.asarray(kept_indices, dtype=np.int64)
    n = layer_tokens.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InternalError(f"kept index out of range for {n} tokens")
    return gather_rows(layer_tokens, idx)


def rfa_attention_padded(f_input: Tensor, padded_refs: Tensor | None,
                         key_bias: np.ndarray | None,
                         weights: AttentionWeights, return_probs: bool = False):
    """Batched RFA core: reference tokens arrive pre-concatenated (and
    possibly padded, with padded key columns excluded via ``key_bias``)."""
    if padded_refs is not None:
        f_concat = concat([f_input, padded_refs], axis=f_input.ndim - 2)
    else:
        f_concat = f_input
    q = matmul(f_input, weights.wq)
    k = matmul(f_concat, weights.wk)
    v = matmul(f_concat, weights.wv)
    result = scaled_dot_attention(q, k, v, weights.heads, key_bias=key_bias,
                                  return_probs=return_probs)
    if return_probs:
        out, probs = result
        return matmul(out, weights.wo), probs
    return matmul(result, weights.wo)


def rfa_attention(f_input: Tensor, masked_refs: list[Tensor],
                  weights: AttentionWeights, return_probs: bool = False):
    """Queries from the input tokens; keys/values from input + kept reference
    tokens concatenated along the sequence axis."""
    f_input = as_tensor(f_input)
    refs = [as_tensor(r) for r in masked_refs if r.shape[0] > 0]
    c = f_input.shape[-1]
    for r in refs:
        if r.shape[-1] != c:
            raise InvalidArgumentError(
                f"reference token width {r.shape[-1]} != input width {c}")
    padded = concat(refs, axis=0) if refs else None
    return rfa_attention_padded(f_input, padded, None, weights,
                                return_probs=return_probs)


def _stream(semantic: SemanticTokens, origin: str, w: DecoupledWeights) -> Tensor:
    idx = semantic.rows(origin)
    if idx.size == 0:
        idx = semantic.rows(ORIGIN_NULL)
    if idx.size == 0:
        return w.null_token
    return gather_rows(semantic.tokens, idx)


def decoupled_cross_attention_padded(
        x: Tensor,
        prompt_tokens: Tensor, prompt_bias: np.ndarray | None,
        image_tokens: Tensor, image_bias: np.ndarray | None,
        weights: DecoupledWeights) -> Tensor:
    """Batched decoupled cross-attention core over pre-padded streams."""
    q = matmul(x, weights.wq)
    out_a = scaled_dot_attention(q, matmul(prompt_tokens, weights.wk_prompt),
                                 matmul(prompt_tokens, weights.wv_prompt),
                                 weights.heads, key_bias=prompt_bias)
    out_b = scaled_dot_attention(q, matmul(image_tokens, weights.wk_image),
                                 matmul(image_tokens, weights.wv_image),
                                 weights.heads, key_bias=image_bias)
    return matmul(out_a + out_b, weights.wo)


def decoupled_cross_attention(x: Tensor, semantic: SemanticTokens,
                              weights: DecoupledWeights) -> Tensor:
    """Sum of the prompt-stream and image-stream cross-attentions.

    An empty stream falls back to the null-token rows (or the learned null
    itself), so K/V are never empty.
    """
    x = as_tensor(x)
    prompt_tokens = _stream(semantic, ORIGIN_PROMPT, weights)
    image_tokens = _stream(semantic, ORIGIN_REFERENCE, weights)
    return decoupled_cross_attention_padded(x, prompt_tokens, None,
                                            image_tokens, None, weights)
