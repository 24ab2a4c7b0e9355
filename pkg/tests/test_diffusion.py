import math

import numpy as np
import pytest

from refcomplete.autodiff import Tensor
from refcomplete.diffusion import (
    SamplerConfig,
    cfg_combine,
    ddim_step,
    make_schedule,
    q_sample,
    sample_completion,
    sampling_timesteps,
    training_loss,
)
from refcomplete.errors import InvalidArgumentError


class TestSchedule:
    def test_first_term_identity(self):
        s = make_schedule(1000, 1e-4, 0.02)
        assert abs(s.alphas_cumprod[0] - (1 - 1e-4)) < 1e-15

    def test_strictly_decreasing_in_unit_interval(self):
        s = make_schedule(500, 1e-4, 0.02)
        a = s.alphas_cumprod
        assert np.all(np.diff(a) < 0)
        assert a[0] <= 1.0 and a[-1] > 0.0

    def test_matches_product_oracle(self):
        s = make_schedule(10, 0.01, 0.1)
        prod = 1.0
        for beta in np.linspace(0.01, 0.1, 10):
            prod *= 1.0 - beta
        assert abs(s.alphas_cumprod[9] - prod) < 1e-12

    def test_invalid_range(self):
        with pytest.raises(InvalidArgumentError):
            make_schedule(10, 0.2, 0.1)
        with pytest.raises(InvalidArgumentError):
            make_schedule(10, 0.0, 0.1)


class TestQSample:
    def setup_method(self):
        self.s = make_schedule(100, 1e-4, 0.02)

    def test_zero_noise(self):
        x0 = np.random.default_rng(0).standard_normal((4, 4))
        t = 13
        out = q_sample(x0, t, np.zeros_like(x0), self.s)
        assert np.allclose(out, math.sqrt(self.s.alpha_bar(t)) * x0)

    def test_zero_signal(self):
        eps = np.random.default_rng(1).standard_normal((4, 4))
        t = 50
        out = q_sample(np.zeros_like(eps), t, eps, self.s)
        assert np.allclose(out, math.sqrt(1 - self.s.alpha_bar(t)) * eps)

    def test_scalar_oracle(self):
        # a_bar = 0.25 -> 0.5*x0 + sqrt(0.75)*eps
        betas = np.array([0.5, 0.5])
        import refcomplete.diffusion as d

        s = d.NoiseSchedule(betas=betas, alphas_cumprod=np.array([0.5, 0.25]))
        out = q_sample(np.array(1.0), 1, np.array(1.0), s)
        assert abs(out - (0.5 + math.sqrt(0.75))) < 1e-12

    def test_out_of_range_t(self):
        with pytest.raises(InvalidArgumentError):
            q_sample(np.zeros(3), 100, np.zeros(3), self.s)


class TestTrainingLoss:
    def test_identical_is_zero(self):
        x = np.random.default_rng(0).standard_normal((3, 3, 4))
        assert training_loss(x, x) == 0.0

    def test_constant_offset(self):
        x = np.zeros((5, 5, 2))
        assert abs(training_loss(x + 0.5, x) - 0.25) < 1e-12

    def test_matches_accumulation_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4, 3))
        total = 0.0
        for i in range(4):
            for j in range(4):
                for c in range(3):
                    total += (a[i, j, c] - b[i, j, c]) ** 2
        assert abs(training_loss(a, b) - total / 48) < 1e-10

    def test_tensor_path_matches_numpy_path(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3))
        assert abs(float(training_loss(Tensor(a), b).data) - training_loss(a, b)) < 1e-12

    def test_masked_only_variant(self):
        a = np.zeros((4, 4, 2))
        b = a.copy()
        b[0, 0] = 1.0
        m = np.zeros((4, 4), np.uint8)
        m[0, 0] = 1
        assert abs(training_loss(b, a, m, masked_only=True) - 1.0) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            training_loss(np.zeros((2, 2)), np.zeros((3, 3)))


class TestDdimStep:
    def test_exact_inversion_single_step(self):
        s = make_schedule(1000, 1e-4, 0.02)
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((8, 8, 3))
        eps = rng.standard_normal((8, 8, 3))
        t = 999
        x_t = q_sample(x0, t, eps, s)
        rec = ddim_step(x_t, eps, t, 0, s)
        assert np.abs(rec - x0).max() < 1e-5

    def test_scalar_oracle(self):
        import refcomplete.diffusion as d

        s = d.NoiseSchedule(betas=np.zeros(3),
                            alphas_cumprod=np.array([0.9, 0.81, 0.25]))
        # a_t = 0.25 (t=2), a_prev = 0.81 (t=1), x_t = 1, eps = 0.5
        x0_pred = (1.0 - math.sqrt(0.75) * 0.5) / 0.5
        expected = 0.9 * x0_pred + math.sqrt(0.19) * 0.5
        out = ddim_step(np.array(1.0), np.array(0.5), 2, 1, s)
        assert abs(out - expected) < 1e-10

    def test_determinism(self):
        s = make_schedule(100, 1e-4, 0.02)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 4))
        e = rng.standard_normal((4, 4))
        a = ddim_step(x, e, 50, 10, s)
        b = ddim_step(x, e, 50, 10, s)
        assert np.array_equal(a, b)

    def test_ordering_violation(self):
        s = make_schedule(100, 1e-4, 0.02)
        with pytest.raises(InvalidArgumentError):
            ddim_step(np.zeros(3), np.zeros(3), 5, 5, s)


class TestExactNoiseChain:
    """DDIM chain driven by the exact-noise oracle recovers x0."""

    @pytest.mark.parametrize("steps", [1, 5, 50])
    def test_recovers_x0(self, steps):
        s = make_schedule(1000, 1e-4, 0.02)
        rng = np.random.default_rng(6)
        x0 = rng.standard_normal((6, 6, 2))
        eps = rng.standard_normal((6, 6, 2))
        ts = sampling_timesteps(s.T, steps)
        x = q_sample(x0, ts[0], eps, s)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            a = s.alpha_bar(t)
            eps_oracle = (x - math.sqrt(a) * x0) / math.sqrt(1 - a)
            x = ddim_step(x, eps_oracle, t, t_prev, s)
        assert np.abs(x - x0).max() < 1e-4


class TestCfgCombine:
    def test_identities(self):
        rng = np.random.default_rng(7)
        u, c = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        assert np.array_equal(cfg_combine(u, c, 1.0), c)
        assert np.array_equal(cfg_combine(u, c, 0.0), u)
        assert np.array_equal(cfg_combine(u, u, 7.5), u)

    def test_paper_scale_arithmetic(self):
        # scale 7.5 on scalars 0.2 / 0.4 -> 0.2 + 7.5 * 0.2 = 1.7
        out = cfg_combine(np.array(0.2), np.array(0.4), 7.5)
        assert abs(float(out) - 1.7) < 1e-12


class TestSamplerConfig:
    def test_defaults(self):
        c = SamplerConfig()
        assert c.steps == 50 and c.guidance_scale == 7.5 and c.eta == 0.0

    def test_validation(self):
        s = make_schedule(100, 1e-4, 0.02)
        with pytest.raises(InvalidArgumentError):
            SamplerConfig(steps=0).validate(s.T)
        with pytest.raises(InvalidArgumentError):
            SamplerConfig(steps=101).validate(s.T)
        with pytest.raises(InvalidArgumentError):
            SamplerConfig(guidance_scale=-1).validate(s.T)


class TestSampleCompletion:
    def test_deterministic_and_source_preserving(self, tiny_model, tiny_samples):
        from conftest import densify

        sample = tiny_samples[0]
        schedule = make_schedule(50, 1e-4, 0.02)
        cfg = SamplerConfig(steps=4, guidance_scale=7.5)
        out1 = sample_completion(tiny_model, sample.references, sample.target,
                                 sample.source_mask, schedule, cfg, seed=3,
                                 prompt=sample.prompt)
        out2 = sample_completion(tiny_model, sample.references, sample.target,
                                 sample.source_mask, schedule, cfg, seed=3,
                                 prompt=sample.prompt)
        assert np.array_equal(out1, out2)
        outside = ~sample.source_mask.astype(bool)
        assert np.array_equal(out1[outside], sample.target[outside])
        assert out1.min() >= 0.0 and out1.max() <= 1.0

    def test_timestep_spacing(self):
        assert sampling_timesteps(1000, 1) == [999]
        ts = sampling_timesteps(1000, 50)
        assert len(ts) == 50 and ts[0] == 999 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))
