import csv

import numpy as np
import pytest

from refcomplete.diffusion import make_schedule
from refcomplete.errors import InvalidArgumentError
from refcomplete.model import Model
from refcomplete.synth import ReferencePart
from refcomplete.training import Adam, TrainConfig, drop_references, train_loop, train_step

from conftest import tiny_model_config


def fake_refs(n=6):
    img = np.zeros((8, 8, 3), np.float32)
    mask = np.ones((8, 8), np.uint8)
    return [ReferencePart(label="face", image=img, mask=mask) for _ in range(n)]


class TestDropReferences:
    def test_always_drop(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert drop_references(fake_refs(), rng, 1.0, 0.0) == []

    def test_never_drop(self):
        rng = np.random.default_rng(1)
        refs = fake_refs()
        assert drop_references(refs, rng, 0.0, 0.0) == refs

    def test_empirical_rates(self):
        # all-drop frequency ~0.2; per-reference survival ~0.8*0.8 = 0.64
        rng = np.random.default_rng(2024)
        n = 10_000
        refs = fake_refs(6)
        empty = 0
        survived = 0
        for _ in range(n):
            out = drop_references(refs, rng, 0.2, 0.2)
            empty += not out
            survived += len(out)
        empty_rate = empty / n
        survival = survived / (6 * n)
        assert 0.19 <= empty_rate <= 0.21
        assert 0.625 <= survival <= 0.655

    def test_binomial_two_sided(self):
        # z-tests at alpha=0.01; with 6 refs the empty-list event is the
        # all-drop event up to a 0.2^6 correction
        rng = np.random.default_rng(7)
        n = 10_000
        empty = 0
        survived = 0
        for _ in range(n):
            out = drop_references(fake_refs(6), rng, 0.2, 0.2)
            empty += not out
            survived += len(out)
        p_empty = 0.2 + 0.8 * 0.2**6
        z_empty = abs(empty - p_empty * n) / np.sqrt(n * p_empty * (1 - p_empty))
        assert z_empty < 2.576
        p_survive = 0.8 * 0.8
        n_ref = 6 * n
        z_surv = abs(survived - p_survive * n_ref) / np.sqrt(
            n_ref * p_survive * (1 - p_survive))
        assert z_surv < 2.576 * 2  # per-ref draws within a trial correlate

    def test_invalid_probabilities(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InvalidArgumentError):
            drop_references(fake_refs(), rng, 1.5, 0.0)


class TestTrainStep:
    def test_deterministic(self, tiny_config, tiny_samples):
        results = []
        for _ in range(2):
            model = Model(tiny_config, seed=3)
            cfg = TrainConfig(batch_size=2, seed=5)
            opt = Adam(model.trainable_params(), lr=cfg.learning_rate)
            rng = np.random.default_rng(5)
            schedule = make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)
            loss = train_step(model, tiny_samples[:2], schedule, opt, rng, cfg)
            results.append((loss, {k: v.data.copy() for k, v in model.params.items()}))
        assert results[0][0] == results[1][0]
        for k in results[0][1]:
            assert np.array_equal(results[0][1][k], results[1][1][k])

    def test_zero_learning_rate_keeps_weights(self, tiny_config, tiny_samples):
        model = Model(tiny_config, seed=4)
        before = {k: v.data.copy() for k, v in model.params.items()}
        cfg = TrainConfig(batch_size=2, learning_rate=0.0, seed=1)
        opt = Adam(model.trainable_params(), lr=0.0)
        schedule = make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)
        loss = train_step(model, tiny_samples[:2], schedule, opt,
                          np.random.default_rng(1), cfg)
        assert np.isfinite(loss)
        for k, v in model.params.items():
            assert np.array_equal(before[k], v.data)


class TestTrainLoop:
    def test_zero_iterations_keeps_initialization(self, tiny_config, tiny_samples,
                                                  tmp_path):
        cfg = TrainConfig(iterations=0, seed=9)
        model, losses = train_loop(tiny_samples, cfg, model_config=tiny_config,
                                   out_dir=tmp_path / "run")
        assert losses == []
        fresh = Model(tiny_config, seed=cfg.seed)
        for k, v in fresh.params.items():
            assert np.array_equal(v.data, model.params[k].data)
        assert (tmp_path / "run" / "model.ckpt").exists()

    def test_loss_csv_row_count(self, tiny_config, tiny_samples, tmp_path):
        cfg = TrainConfig(iterations=3, batch_size=2, seed=2, checkpoint_every=2)
        train_loop(tiny_samples, cfg, model_config=tiny_config,
                   out_dir=tmp_path / "run")
        with open(tmp_path / "run" / "loss.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "loss"]
        assert len(rows) == 1 + 3
        assert (tmp_path / "run" / "ckpt_000002.ckpt").exists()

    def test_frozen_reference_branch_is_bit_identical(self, tiny_samples):
        mc = tiny_model_config(train_reference_encoder=False)
        cfg = TrainConfig(iterations=2, batch_size=2, seed=6)
        model = Model(mc, seed=cfg.seed)
        ref_before = {k: v.data.copy() for k, v in model.branch_params("ref").items()}
        comp_before = {k: v.data.copy() for k, v in model.branch_params("comp").items()}
        train_loop(tiny_samples, cfg, model=model)
        for k, v in model.branch_params("ref").items():
            assert np.array_equal(ref_before[k], v.data), k
        assert any(not np.array_equal(comp_before[k], v.data)
                   for k, v in model.branch_params("comp").items())

    def test_trained_reference_branch_changes(self, tiny_samples):
        mc = tiny_model_config(train_reference_encoder=True)
        cfg = TrainConfig(iterations=2, batch_size=2, seed=6)
        model = Model(mc, seed=cfg.seed)
        ref_before = {k: v.data.copy() for k, v in model.branch_params("ref").items()}
        train_loop(tiny_samples, cfg, model=model)
        assert any(not np.array_equal(ref_before[k], v.data)
                   for k, v in model.branch_params("ref").items())

    def test_full_reproducibility(self, tiny_config, tiny_samples):
        cfg = TrainConfig(iterations=2, batch_size=2, seed=11)
        m1, l1 = train_loop(tiny_samples, cfg, model_config=tiny_config)
        m2, l2 = train_loop(tiny_samples, cfg, model_config=tiny_config)
        assert l1 == l2
        for k in m1.params:
            assert np.array_equal(m1.params[k].data, m2.params[k].data)

    def test_empty_dataset_rejected(self, tiny_config):
        with pytest.raises(InvalidArgumentError):
            train_loop([], TrainConfig(iterations=1), model_config=tiny_config)


class TestTrainConfig:
    def test_full_scale_recipe(self):
        full = TrainConfig.full_scale()
        assert full.learning_rate == 2e-5
        assert full.batch_size == 64
        assert full.iterations == 30_000

    def test_probability_validation(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(p_drop_all=1.2)
