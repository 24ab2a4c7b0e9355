"""Scalar-oracle and gradient checks for the attention ops."""

import math

import numpy as np
import pytest

from refcomplete.attention import (
    ORIGIN_NULL,
    ORIGIN_PROMPT,
    ORIGIN_REFERENCE,
    AttentionWeights,
    DecoupledWeights,
    SemanticTokens,
    decoupled_cross_attention,
    mask_reference_features,
    rfa_attention,
)
from refcomplete.autodiff import Tensor
from refcomplete.errors import InternalError, InvalidArgumentError


def scalar_attention_oracle(q, k, v, heads=1):
    """Brute-force softmax attention with explicit python loops."""
    m, d = q.shape
    n = k.shape[0]
    dh = d // heads
    out = np.zeros((m, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(m):
            scores = []
            for j in range(n):
                s = 0.0
                for x in range(dh):
                    s += q[i, sl][x] * k[j, sl][x]
                scores.append(s / math.sqrt(dh))
            mx = max(scores)
            exps = [math.exp(s - mx) for s in scores]
            z = sum(exps)
            for j in range(n):
                w = exps[j] / z
                for x in range(dh):
                    out[i, h * dh + x] += w * v[j, sl][x]
    return out


def rfa_oracle(f_input, refs, w):
    """Independent end-to-end oracle of the region-focused attention op."""
    f_concat = np.concatenate([f_input] + [r for r in refs if len(r)], axis=0) \
        if refs else f_input
    q = f_input @ w.wq.data
    k = f_concat @ w.wk.data
    v = f_concat @ w.wv.data
    return scalar_attention_oracle(q, k, v, w.heads) @ w.wo.data


def make_weights(c, d, heads=1, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    mk = lambda a, b: Tensor(rng.standard_normal((a, b)).astype(dtype),
                             requires_grad=True)
    return AttentionWeights(wq=mk(c, d), wk=mk(c, d), wv=mk(c, d), wo=mk(d, c),
                            heads=heads)


def make_dec_weights(c, d, sd, heads=1, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    mk = lambda a, b: Tensor(rng.standard_normal((a, b)).astype(dtype),
                             requires_grad=True)
    return DecoupledWeights(
        wq=mk(c, d), wk_prompt=mk(sd, d), wv_prompt=mk(sd, d),
        wk_image=mk(sd, d), wv_image=mk(sd, d), wo=mk(d, c),
        null_token=mk(1, sd), heads=heads)


class TestMaskReferenceFeatures:
    def test_all_kept_is_identity(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        out = mask_reference_features(x, np.arange(4))
        assert np.array_equal(out.data, x.data)

    def test_empty_kept_gives_empty_sequence(self):
        x = Tensor(np.ones((4, 3)))
        out = mask_reference_features(x, np.array([], dtype=np.int64))
        assert out.data.shape == (0, 3)

    def test_row_gather_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 5))
        kept = np.array([0, 5, 9])
        out = mask_reference_features(Tensor(x), kept)
        assert out.data.shape == (3, 5)
        for row, src in enumerate(kept):
            assert np.array_equal(out.data[row], x[src])

    def test_out_of_range_is_internal_violation(self):
        with pytest.raises(InternalError):
            mask_reference_features(Tensor(np.ones((4, 3))), np.array([4]))


class TestRfaAttention:
    def test_kv_length_and_output_shape(self):
        w = make_weights(8, 8, heads=1)
        f_input = Tensor(np.random.default_rng(0).standard_normal((16, 8)))
        refs = [Tensor(np.random.default_rng(i).standard_normal((16, 8)))
                for i in range(3)]
        out, probs = rfa_attention(f_input, refs, w, return_probs=True)
        assert out.data.shape == (16, 8)
        assert probs.data.shape == (1, 16, 64)  # 16 input + 48 reference tokens

    def test_empty_refs_equals_self_attention(self):
        w = make_weights(6, 6, heads=2, seed=3)
        x = Tensor(np.random.default_rng(1).standard_normal((5, 6)))
        with_refs = rfa_attention(x, [], w).data
        self_attn = rfa_attention(x, [Tensor(np.zeros((0, 6)))], w).data
        assert np.abs(with_refs - self_attn).max() <= 1e-6

    def test_matches_scalar_oracle_tiny(self):
        # m=2 input tokens, 1 reference token, d=2, 1 head, identity projections
        eye = lambda n: Tensor(np.eye(n))
        w = AttentionWeights(wq=eye(2), wk=eye(2), wv=eye(2), wo=eye(2), heads=1)
        f_input = np.array([[1.0, 0.0], [0.0, 1.0]])
        ref = np.array([[0.5, -0.5]])
        out = rfa_attention(Tensor(f_input), [Tensor(ref)], w).data
        oracle = rfa_oracle(f_input, [ref], w)
        assert np.abs(out - oracle).max() < 1e-6

    def test_matches_oracle_random_instances(self):
        rng = np.random.default_rng(2024)
        for trial in range(20):
            m = int(rng.integers(1, 5))
            n_ref = int(rng.integers(0, 4))
            d = int(rng.integers(1, 5))
            w = make_weights(d, d, heads=1, seed=trial)
            f_input = rng.standard_normal((m, d))
            refs = [rng.standard_normal((int(rng.integers(1, 4)), d))
                    for _ in range(n_ref)]
            out = rfa_attention(Tensor(f_input), [Tensor(r) for r in refs], w).data
            oracle = rfa_oracle(f_input, refs, w)
            assert np.abs(out - oracle).max() < 1e-6

    def test_rows_are_stochastic(self):
        w = make_weights(8, 8, heads=4, seed=5)
        x = Tensor(np.random.default_rng(2).standard_normal((7, 8)))
        refs = [Tensor(np.random.default_rng(3).standard_normal((4, 8)))]
        _, probs = rfa_attention(x, refs, w, return_probs=True)
        assert np.abs(probs.data.sum(axis=-1) - 1.0).max() <= 1e-5

    def test_dim_mismatch_rejected(self):
        w = make_weights(4, 4)
        x = Tensor(np.zeros((3, 4)))
        with pytest.raises(InvalidArgumentError):
            rfa_attention(x, [Tensor(np.zeros((2, 6)))], w)


class TestDecoupledCrossAttention:
    def _semantic(self, sd, n_prompt=2, n_image=3, seed=0):
        rng = np.random.default_rng(seed)
        tokens = rng.standard_normal((n_prompt + n_image, sd))
        origins = (ORIGIN_PROMPT,) * n_prompt + (ORIGIN_REFERENCE,) * n_image
        return SemanticTokens(tokens=Tensor(tokens), origins=origins), tokens

    def test_zeroed_image_branch_leaves_prompt_branch(self):
        w = make_dec_weights(4, 4, 3, seed=1)
        w.wv_image.data[:] = 0.0
        sem, _ = self._semantic(3)
        x = Tensor(np.random.default_rng(5).standard_normal((2, 4)))
        out = decoupled_cross_attention(x, sem, w).data

        w2 = make_dec_weights(4, 4, 3, seed=1)
        only_prompt = SemanticTokens(tokens=Tensor(sem.tokens.data[:2]),
                                     origins=(ORIGIN_PROMPT,) * 2)
        # image stream falls back to null; zero its values too for parity
        w2.wv_image.data[:] = 0.0
        out_prompt = decoupled_cross_attention(x, only_prompt, w2).data
        assert np.allclose(out, out_prompt, atol=1e-12)

    def test_both_branches_zeroed_gives_zero(self):
        w = make_dec_weights(4, 4, 3, seed=2)
        w.wv_image.data[:] = 0.0
        w.wv_prompt.data[:] = 0.0
        sem, _ = self._semantic(3)
        x = Tensor(np.random.default_rng(6).standard_normal((3, 4)))
        out = decoupled_cross_attention(x, sem, w).data
        assert np.abs(out).max() == 0.0

    def test_two_token_scalar_oracle(self):
        sd = d = c = 2
        eye = Tensor(np.eye(2))
        w = DecoupledWeights(wq=eye, wk_prompt=eye, wv_prompt=eye,
                             wk_image=eye, wv_image=eye, wo=eye,
                             null_token=Tensor(np.zeros((1, 2))), heads=1)
        x = np.array([[0.3, -0.2], [1.0, 0.5]])
        prompt = np.array([[0.1, 0.4]])
        image = np.array([[-0.6, 0.2], [0.8, 0.8]])
        sem = SemanticTokens(
            tokens=Tensor(np.concatenate([prompt, image])),
            origins=(ORIGIN_PROMPT, ORIGIN_REFERENCE, ORIGIN_REFERENCE))
        out = decoupled_cross_attention(Tensor(x), sem, w).data
        oracle = (scalar_attention_oracle(x, prompt, prompt)
                  + scalar_attention_oracle(x, image, image))
        assert np.abs(out - oracle).max() < 1e-6

    def test_null_fallback_for_missing_streams(self):
        w = make_dec_weights(4, 4, 3, seed=3)
        null_only = SemanticTokens(tokens=w.null_token, origins=(ORIGIN_NULL,))
        x = Tensor(np.random.default_rng(7).standard_normal((2, 4)))
        out = decoupled_cross_attention(x, null_only, w).data
        null = w.null_token.data
        oracle = (scalar_attention_oracle(x.data @ w.wq.data, null @ w.wk_prompt.data,
                                          null @ w.wv_prompt.data)
                  + scalar_attention_oracle(x.data @ w.wq.data, null @ w.wk_image.data,
                                            null @ w.wv_image.data)) @ w.wo.data
        assert np.allclose(out, oracle, atol=1e-10)


def finite_diff_check(build, tensors, tol=1e-3, h=1e-4):
    """Relative-error comparison of analytic vs central-difference grads."""
    out = build()
    probe = np.random.default_rng(123).standard_normal(out.data.shape)
    out.backward(probe.copy())
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    for t in tensors:
        t.grad = None
    for t, ag in zip(tensors, analytic):
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.sum(build().data * probe))
            flat[i] = orig - h
            fm = float(np.sum(build().data * probe))
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            a = ag.ravel()[i]
            rel = abs(a - fd) / max(1e-4, abs(a) + abs(fd))
            assert rel < tol, f"rel err {rel} at {i}"


class TestAttentionGradients:
    def test_rfa_gradients_match_finite_differences(self):
        w = make_weights(4, 4, heads=2, seed=10)
        x = Tensor(np.random.default_rng(11).standard_normal((3, 4)),
                   requires_grad=True)
        ref = Tensor(np.random.default_rng(12).standard_normal((2, 4)),
                     requires_grad=True)
        tensors = [x, ref, w.wq, w.wk, w.wv, w.wo]
        finite_diff_check(lambda: rfa_attention(x, [ref], w), tensors)

    def test_decoupled_gradients_match_finite_differences(self):
        w = make_dec_weights(4, 4, 3, heads=2, seed=13)
        x = Tensor(np.random.default_rng(14).standard_normal((3, 4)),
                   requires_grad=True)
        sem_tokens = Tensor(np.random.default_rng(15).standard_normal((3, 3)),
                            requires_grad=True)
        sem = SemanticTokens(tokens=sem_tokens,
                             origins=(ORIGIN_PROMPT, ORIGIN_REFERENCE,
                                      ORIGIN_REFERENCE))
        tensors = [x, sem_tokens, w.wq, w.wk_prompt, w.wv_prompt,
                   w.wk_image, w.wv_image, w.wo]
        finite_diff_check(lambda: decoupled_cross_attention(x, sem, w), tensors)

    def test_null_token_receives_gradient(self):
        w = make_dec_weights(4, 4, 3, seed=16)
        x = Tensor(np.random.default_rng(17).standard_normal((2, 4)))
        sem = SemanticTokens(tokens=w.null_token, origins=(ORIGIN_NULL,))
        out = decoupled_cross_attention(x, sem, w)
        out.backward()
        assert w.null_token.grad is not None
        assert np.abs(w.null_token.grad).max() > 0
