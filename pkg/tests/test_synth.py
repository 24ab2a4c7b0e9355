import numpy as np
import pytest

from refcomplete.errors import InvalidArgumentError
from refcomplete.masks import MaskSpec, apply_mask
from refcomplete.synth import (
    PART_LABELS,
    FigureSpec,
    Pose,
    build_benchmark_group,
    build_training_pair,
    figure_caption,
    generate_dataset,
    generate_figure,
    load_training_dataset,
)


@pytest.fixture(scope="module")
def spec():
    return FigureSpec.random("figA", np.random.default_rng(123))


@pytest.fixture(scope="module")
def pose_pair():
    rng = np.random.default_rng(9)
    return Pose.random(rng), Pose.random(rng)


class TestGenerateFigure:
    def test_deterministic(self, spec, pose_pair):
        img1, masks1, sil1 = generate_figure(spec, pose_pair[0], 2)
        img2, masks2, sil2 = generate_figure(spec, pose_pair[0], 2)
        assert np.array_equal(img1, img2)
        assert np.array_equal(sil1, sil2)
        for label in masks1:
            assert np.array_equal(masks1[label], masks2[label])

    def test_part_masks_disjoint_within_silhouette(self, spec, pose_pair):
        _, masks, sil = generate_figure(spec, pose_pair[0], 1)
        total = np.zeros_like(sil, dtype=np.int32)
        for m in masks.values():
            total += m
        assert total.max() <= 1  # pairwise disjoint
        assert np.all(sil[total.astype(bool)] == 1)

    def test_mean_part_color_follows_figure_not_pose(self, spec, pose_pair):
        # mean-color oracle over part masks, two poses
        img_a, masks_a, _ = generate_figure(spec, pose_pair[0], 3)
        img_b, masks_b, _ = generate_figure(spec, pose_pair[1], 3)
        for label in spec.part_labels:
            ma, mb = masks_a[label].astype(bool), masks_b[label].astype(bool)
            if ma.sum() == 0 or mb.sum() == 0:
                continue
            mean_a = img_a[ma].mean(axis=0)
            mean_b = img_b[mb].mean(axis=0)
            assert np.abs(mean_a - mean_b).max() < 0.05, label

    def test_glyph_seed_changes_only_glyph_part(self, spec, pose_pair):
        import dataclasses

        other = dataclasses.replace(spec, glyph_seed=spec.glyph_seed + 1)
        img_a, masks, _ = generate_figure(spec, pose_pair[0], 4)
        img_b, _, _ = generate_figure(other, pose_pair[0], 4)
        diff = np.any(img_a != img_b, axis=2)
        glyph_region = masks[spec.glyph_part].astype(bool)
        assert diff.any()  # glyphs actually differ
        assert np.all(glyph_region[diff])  # pixel-diff oracle: diffs stay inside

    def test_invalid_pose_rejected(self, spec):
        bad = Pose(arm_left=9.0)
        with pytest.raises(InvalidArgumentError):
            generate_figure(spec, bad, 0)

    def test_six_part_vocabulary(self):
        assert len(PART_LABELS) == 6
        for i in range(20):
            s = FigureSpec.random(f"f{i}", np.random.default_rng(i))
            labels = set(s.part_labels)
            assert labels <= set(PART_LABELS)
            if "whole_body_clothes" in labels:
                assert not {"upper_clothes", "lower_clothes"} & labels


class TestBuildTrainingPair:
    def test_occlusion_identity(self):
        rng = np.random.default_rng(1)
        spec = FigureSpec.random("figB", rng)
        sample = build_training_pair(spec, rng)
        assert np.array_equal(
            apply_mask(sample.target, sample.source_mask, 0.0),
            sample.occluded_input)
        outside = ~sample.source_mask.astype(bool)
        assert np.array_equal(sample.occluded_input[outside], sample.target[outside])

    def test_reference_labels_within_vocabulary(self):
        rng = np.random.default_rng(2)
        for i in range(5):
            spec = FigureSpec.random(f"figC{i}", rng)
            sample = build_training_pair(spec, rng)
            assert {r.label for r in sample.references} <= set(PART_LABELS)
            for r in sample.references:
                r.validate()

    def test_branch_split_over_many_samples(self):
        rng = np.random.default_rng(3)
        spec = FigureSpec.random("figD", rng)
        ms = MaskSpec(random_ratio=0.5, repeats_range=(1, 4))
        n = 300  # branch-counting oracle: grid masks stray outside silhouette
        grid = 0
        for _ in range(n):
            s = build_training_pair(spec, rng, ms, size=32)
            grid += int(np.any(s.source_mask & ~s.silhouette))
        assert 0.30 <= grid / n <= 0.70


class TestBuildBenchmarkGroup:
    def test_group_contract(self):
        rng = np.random.default_rng(4)
        spec = FigureSpec.random("figE", rng)
        g = build_benchmark_group(spec, rng)
        g.validate()
        assert g.meta["figure_id"] == "figE"
        assert g.meta["source_background"] != g.meta["reference_background"]
        # mask-intersection oracle: source mask covers the glyph part
        _, masks, _ = generate_figure(spec,
                                      Pose.random(np.random.default_rng(4)), 0)
        assert (g.source_mask.astype(bool)).sum() > 0
        assert np.array_equal(g.ground_truth, g.source)

    def test_caption_template(self):
        spec = FigureSpec.random("figF", np.random.default_rng(5))
        cap = figure_caption(spec)
        assert cap.startswith("a figure wearing ")


class TestDatasetPersistence:
    def test_round_trip_and_determinism(self, tmp_path):
        info = generate_dataset(tmp_path / "d1", n_figures=3, seed=11,
                                n_benchmark_groups=2, size=32)
        assert info["figures"] == 3
        generate_dataset(tmp_path / "d2", n_figures=3, seed=11,
                         n_benchmark_groups=2, size=32)
        files1 = sorted(p.relative_to(tmp_path / "d1")
                        for p in (tmp_path / "d1").rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(tmp_path / "d2")
                        for p in (tmp_path / "d2").rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (tmp_path / "d1" / rel).read_bytes() == \
                (tmp_path / "d2" / rel).read_bytes(), rel

        samples = load_training_dataset(tmp_path / "d1")
        assert len(samples) == 3
        for s in samples:
            assert np.array_equal(
                apply_mask(s.target, s.source_mask, 0.0), s.occluded_input)
            assert s.references and s.silhouette is not None

    def test_zero_figures_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            generate_dataset(tmp_path / "bad", n_figures=0, seed=0)

    def test_benchmark_loads_back(self, tmp_path):
        from refcomplete.benchmark import load_benchmark

        generate_dataset(tmp_path / "d", n_figures=1, seed=3,
                         n_benchmark_groups=4, size=32)
        groups = load_benchmark(tmp_path / "d" / "benchmark")
        assert len(groups) == 4
        assert all(g.references for g in groups)
