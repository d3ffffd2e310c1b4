"""Tests for batch sampling, transforms, pruning, and the archive format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from scenplan.risk import RiskProfile
from scenplan.sampling import (
    MixtureModel,
    ObstaclePrediction,
    ScenarioBatch,
    TruncationSpec,
    box_muller,
    default_prune_sweep,
    load_batch,
    offline_prune,
    sample_mixture,
    sample_standard_batch,
    save_batch,
    transform_batch,
)


class TestBoxMuller:
    def test_unit_u1_gives_origin(self):
        assert box_muller(1.0, 0.37) == (0.0, 0.0)

    def test_hand_values(self):
        z0, z1 = box_muller(math.exp(-2.0), 0.0)
        assert z0 == pytest.approx(2.0)
        assert z1 == pytest.approx(0.0, abs=1e-15)
        z0, z1 = box_muller(math.exp(-2.0), 0.25)
        assert z0 == pytest.approx(0.0, abs=1e-15)
        assert z1 == pytest.approx(2.0)

    def test_zero_u1_rejected(self):
        with pytest.raises(ValueError):
            box_muller(0.0, 0.5)
        with pytest.raises(ValueError):
            box_muller(0.5, 1.0)

    @given(st.floats(1e-300, 1.0), st.floats(0.0, 1.0, exclude_max=True))
    @settings(max_examples=200)
    def test_radius_matches_u1(self, u1, u2):
        z0, z1 = box_muller(u1, u2)
        assert math.hypot(z0, z1) == pytest.approx(math.sqrt(-2.0 * math.log(u1)), rel=1e-12)


class TestStandardBatch:
    def test_determinism_bit_identical(self):
        a = sample_standard_batch(5000, TruncationSpec.none(), seed=42)
        b = sample_standard_batch(5000, TruncationSpec.none(), seed=42)
        assert a.samples.tobytes() == b.samples.tobytes()
        c = sample_standard_batch(5000, TruncationSpec.none(), seed=43)
        assert a.samples.tobytes() != c.samples.tobytes()

    def test_moments_at_scale(self):
        batch = sample_standard_batch(10**6, seed=7)
        mean = batch.samples.mean(axis=0)
        assert np.linalg.norm(mean) < 0.01
        cov = np.cov(batch.samples.T)
        assert np.abs(cov - np.eye(2)).max() < 0.02

    def test_radial_truncation_hard_cap(self):
        batch = sample_standard_batch(200_000, TruncationSpec.radial(3.5), seed=3)
        radii = np.hypot(batch.samples[:, 0], batch.samples[:, 1])
        assert radii.max() <= 3.5

    def test_radial_ks_against_truncated_law(self):
        rho = 3.5
        batch = sample_standard_batch(100_000, TruncationSpec.radial(rho), seed=11)
        radii = np.hypot(batch.samples[:, 0], batch.samples[:, 1])
        denom = 1.0 - math.exp(-(rho**2) / 2.0)

        def cdf(r):
            r = np.clip(r, 0.0, rho)
            return (1.0 - np.exp(-(r**2) / 2.0)) / denom

        res = stats.kstest(radii, cdf)
        assert res.pvalue > 0.001

    def test_untruncated_ks_against_chi_law(self):
        batch = sample_standard_batch(100_000, seed=13)
        radii = np.hypot(batch.samples[:, 0], batch.samples[:, 1])
        res = stats.kstest(radii, lambda r: 1.0 - np.exp(-(np.asarray(r) ** 2) / 2.0))
        assert res.pvalue > 0.001

    def test_width_truncation_caps_component(self):
        axis = np.array([math.cos(0.3), math.sin(0.3)])
        batch = sample_standard_batch(50_000, TruncationSpec.width(axis, 2.5), seed=5)
        assert np.abs(batch.samples @ axis).max() <= 2.5
        # the orthogonal component stays standard normal
        perp = np.array([-axis[1], axis[0]])
        res = stats.kstest(batch.samples @ perp, stats.norm.cdf)
        assert res.pvalue > 0.001

    def test_width_acceptance_guard(self):
        with pytest.raises(ValueError, match="accepts only"):
            sample_standard_batch(10, TruncationSpec.width((1.0, 0.0), 1e-4), seed=1)


class TestTransformBatch:
    def test_identity_transform(self):
        batch = sample_standard_batch(1000, seed=2)
        out = transform_batch(batch, (0.0, 0.0), np.eye(2))
        assert np.array_equal(out, batch.samples)

    def test_hand_value(self):
        batch = ScenarioBatch(
            samples=np.array([[1.0, 0.0]]),
            relevant=np.array([0]),
            truncation=TruncationSpec.none(),
            seed=0,
        )
        out = transform_batch(batch, (3.0, 4.0), np.diag([4.0, 1.0]))
        assert np.allclose(out, [[5.0, 4.0]])

    def test_covariance_recovered_at_scale(self):
        batch = sample_standard_batch(10**6, seed=21)
        Sigma = np.array([[2.0, 0.6], [0.6, 1.0]])
        out = transform_batch(batch, (1.0, -2.0), Sigma)
        cov = np.cov(out.T)
        assert np.abs(cov - Sigma).max() / np.abs(Sigma).max() < 0.02
        assert np.allclose(out.mean(axis=0), [1.0, -2.0], atol=0.01)

    def test_non_spd_raises(self):
        batch = sample_standard_batch(10, seed=1)
        with pytest.raises(ValueError, match="SPD"):
            transform_batch(batch, (0, 0), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_only_relevant_subset(self):
        batch = sample_standard_batch(100, seed=9)
        pruned = ScenarioBatch(
            samples=batch.samples,
            relevant=np.array([3, 7, 11]),
            truncation=batch.truncation,
            seed=batch.seed,
        )
        out = transform_batch(pruned, (1.0, 1.0), np.eye(2), only_relevant=True)
        assert out.shape == (3, 2)
        assert np.allclose(out, batch.samples[[3, 7, 11]] + 1.0)

    def test_isotropic_preserves_distance_order(self):
        batch = sample_standard_batch(500, seed=33)
        out = transform_batch(batch, (2.0, 2.0), 0.25 * np.eye(2))
        direction = np.array([0.6, 0.8])
        before = np.argsort(batch.samples @ direction, kind="stable")
        after = np.argsort((out - np.array([2.0, 2.0])) @ direction, kind="stable")
        assert np.array_equal(before, after)


class TestMixture:
    def test_single_component_matches_transform(self):
        Sigma = np.array([[1.5, 0.2], [0.2, 0.5]])
        model = MixtureModel([(1.0, (1.0, 2.0), Sigma)])
        out = sample_mixture(model, 2000, seed=8)
        batch = sample_standard_batch(2000, seed=8)
        want = transform_batch(batch, (1.0, 2.0), Sigma)
        assert np.allclose(out, want)

    def test_component_proportions(self):
        model = MixtureModel(
            [(0.5, (-5.0, 0.0), 0.01 * np.eye(2)), (0.5, (5.0, 0.0), 0.01 * np.eye(2))]
        )
        out = sample_mixture(model, 10**5, seed=4)
        frac = np.mean(out[:, 0] > 0.0)
        assert abs(frac - 0.5) < 0.01

    def test_zero_weight_component_never_sampled(self):
        model = MixtureModel(
            [(1.0, (0.0, 0.0), np.eye(2)), (0.0, (100.0, 100.0), np.eye(2))]
        )
        out = sample_mixture(model, 20_000, seed=6)
        assert np.linalg.norm(out - [100.0, 100.0], axis=1).min() > 50.0

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MixtureModel([(0.4, (0, 0), np.eye(2)), (0.4, (1, 1), np.eye(2))])


class TestOfflinePrune:
    def test_single_sweep_point_bounded_by_selection(self):
        profile = RiskProfile(eps=0.2, beta=1e-3, s_bar=3, discard=5, keep=20, samples=500)
        batch = sample_standard_batch(500, seed=14)
        pruned = offline_prune(batch, np.array([[4.0, 0.0]]), profile)
        assert pruned.relevant.size <= profile.selection_size - profile.discard

    def test_three_sigma_config_prunes_ninety_percent(self):
        profile = RiskProfile()  # paper-scale defaults
        batch = sample_standard_batch(profile.samples, seed=1)
        sweep = default_prune_sweep()
        pruned = offline_prune(batch, sweep, profile)
        frac = 1.0 - pruned.relevant.size / pruned.size
        assert frac >= 0.90

    def test_union_replay_idempotent(self):
        profile = RiskProfile(eps=0.2, beta=1e-3, s_bar=3, discard=4, keep=12, samples=800)
        batch = sample_standard_batch(800, seed=15)
        sweep = default_prune_sweep(directions=16, radii=4, radius_min=1.0, radius_max=3.0)
        pruned = offline_prune(batch, sweep, profile)
        from scenplan.geometry import discard_outliers, select_nearest

        union = set()
        for pt in sweep:
            sel = select_nearest(batch.samples, pt, profile.selection_size)
            kept = discard_outliers(sel, batch.samples, np.zeros(2), profile.discard)
            union.update(kept.tolist())
        assert set(pruned.relevant.tolist()) == union

    def test_coincident_sweep_point_skipped(self):
        profile = RiskProfile(eps=0.2, beta=1e-3, s_bar=3, discard=2, keep=10, samples=100)
        batch = sample_standard_batch(100, seed=16)
        sweep = np.vstack([batch.samples[0], [10.0, 10.0]])
        with pytest.warns(UserWarning, match="coincides"):
            pruned = offline_prune(batch, sweep, profile)
        assert pruned.relevant.size > 0

    def test_empty_sweep_rejected(self):
        profile = RiskProfile(eps=0.2, beta=1e-3, s_bar=3, discard=2, keep=10, samples=100)
        batch = sample_standard_batch(100, seed=17)
        with pytest.raises(ValueError):
            offline_prune(batch, np.empty((0, 2)), profile)


class TestArchive:
    def test_round_trip(self, tmp_path):
        batch = sample_standard_batch(1234, TruncationSpec.radial(3.5), seed=99)
        profile = RiskProfile(eps=0.2, beta=1e-3, s_bar=3, discard=5, keep=30, samples=1234)
        pruned = offline_prune(batch, default_prune_sweep(8, 3, 2.0, 3.4), profile)
        path = tmp_path / "batch.smpb"
        save_batch(path, pruned)
        loaded = load_batch(path)
        assert loaded.samples.tobytes() == pruned.samples.tobytes()
        assert np.array_equal(loaded.relevant, pruned.relevant)
        assert loaded.truncation == pruned.truncation
        assert loaded.seed is None

    def test_byte_identical_rewrites(self, tmp_path):
        batch = sample_standard_batch(500, seed=5)
        p1, p2 = tmp_path / "a.smpb", tmp_path / "b.smpb"
        save_batch(p1, batch)
        save_batch(p2, batch)
        assert p1.read_bytes() == p2.read_bytes()

    def test_width_axis_round_trip(self, tmp_path):
        axis = np.array([math.cos(1.1), math.sin(1.1)])
        batch = sample_standard_batch(200, TruncationSpec.width(axis, 2.5), seed=77)
        path = tmp_path / "w.smpb"
        save_batch(path, batch)
        loaded = load_batch(path)
        assert loaded.truncation.kind == "width"
        assert np.allclose(loaded.truncation.axis, axis)
        assert loaded.truncation.rho == 2.5

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.smpb"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_batch(path)


class TestObstaclePrediction:
    def test_validation(self):
        means = np.zeros((15, 2))
        covs = np.tile(np.eye(2) * 0.01, (15, 1, 1))
        pred = ObstaclePrediction(means, covs, TruncationSpec.none(), 0.3)
        assert pred.horizon == 15
        bad = covs.copy()
        bad[3] = [[0.01, 0.02], [0.02, 0.01]]  # indefinite
        with pytest.raises(ValueError, match="positive definite"):
            ObstaclePrediction(means, bad, TruncationSpec.none(), 0.3)
