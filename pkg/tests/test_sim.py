"""Tests for the crossing simulation and the Monte-Carlo risk oracle."""

import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from scenplan.config import RunConfig
from scenplan.dynamics import ControlInput, RobotState, Trajectory
from scenplan.sampling import ObstaclePrediction, TruncationSpec
from scenplan.sim import (
    PedestrianAgent,
    aggregate_sweep,
    build_batches,
    first_stage_risk,
    metrics_from_trace,
    run_episode,
    run_sweep,
)


def _cfg(**sim_overrides) -> RunConfig:
    cfg = RunConfig()
    # desk-size scenario program so unit tests stay fast
    risk = dataclasses.replace(
        cfg.risk, eps=0.1, beta=1e-3, s_bar=10, discard=10, keep=60, samples=1500
    )
    sim = dataclasses.replace(cfg.sim, **sim_overrides)
    return dataclasses.replace(cfg, risk=risk, sim=sim)


def _traj_at(pos, N=15):
    states = [
        RobotState(pos=pos, heading=0.0, speed=0.0, yaw_rate=0.0, progress=0.0)
        for _ in range(N + 1)
    ]
    inputs = [ControlInput(0, 0, 0) for _ in range(N)]
    return Trajectory(states=states, inputs=inputs)


def _obstacle(mean, sigma=0.1, radius=0.0, N=15, truncation=None):
    means = np.tile(np.asarray(mean, dtype=float), (N, 1))
    covs = np.tile(sigma**2 * np.eye(2), (N, 1, 1))
    return ObstaclePrediction(
        means, covs, truncation or TruncationSpec.none(), radius
    )


class TestPedestrianAgent:
    def test_speed_cap_enforced(self):
        with pytest.raises(ValueError, match="exceeds"):
            PedestrianAgent(pos=(0, 0), velocity=(0.0, 2.5), radius=0.0)

    def test_carrier_advances_linearly(self):
        agent = PedestrianAgent(pos=(1.0, 2.0), velocity=(0.0, -1.0), radius=0.0)
        rng = np.random.default_rng(0)
        for _ in range(10):
            agent.advance(0.05, rng)
        assert np.allclose(agent.carrier, [1.0, 1.5])
        # realized position jitters around the carrier by ~sigma
        assert np.linalg.norm(agent.pos - agent.carrier) < 1.0


class TestFirstStageRisk:
    def test_far_robot_zero(self):
        traj = _traj_at((100.0, 0.0))
        obs = [_obstacle((0.0, 0.0))]
        assert first_stage_risk(traj, obs, 10**5, seed=1) == 0.0

    def test_robot_on_mean_full_mass(self):
        traj = _traj_at((0.0, 0.0))
        obs = [_obstacle((0.0, 0.0), sigma=0.1, radius=0.3)]
        risk = first_stage_risk(traj, obs, 10**5, seed=2, disc_radius=0.325)
        assert risk > 0.99

    def test_matches_analytic_disc_mass(self):
        # distance where the analytic bivariate-Gaussian disc mass is 0.0111
        sigma, r = 0.1, 0.325

        def disc_mass(d):
            # noncentral chi-square: ||X - c||^2 / sigma^2, k=2
            return stats.ncx2.cdf((r / sigma) ** 2, 2, (d / sigma) ** 2)

        from scipy.optimize import brentq

        d_star = brentq(lambda d: disc_mass(d) - 0.0111, r, r + 10 * sigma)
        # independent quadrature oracle confirms the analytic mass
        from scipy import integrate

        quad, _ = integrate.dblquad(
            lambda y, x: np.exp(-((x - d_star) ** 2 + y**2) / (2 * sigma**2))
            / (2 * np.pi * sigma**2),
            -r,
            r,
            lambda x: -np.sqrt(max(r**2 - x**2, 0.0)),
            lambda x: np.sqrt(max(r**2 - x**2, 0.0)),
        )
        assert quad == pytest.approx(0.0111, abs=2e-4)

        traj = _traj_at((d_star, 0.0))
        obs = [_obstacle((0.0, 0.0), sigma=sigma, radius=0.0)]
        M = 10**5
        est = first_stage_risk(traj, obs, M, seed=3, disc_radius=r)
        se = math.sqrt(0.0111 * (1 - 0.0111) / M)
        assert abs(est - 0.0111) <= 3 * se

    def test_union_over_obstacles(self):
        traj = _traj_at((0.0, 0.0))
        near = _obstacle((0.0, 0.0), sigma=0.05, radius=0.3)
        far = _obstacle((50.0, 0.0), sigma=0.05, radius=0.3)
        r1 = first_stage_risk(traj, [near], 10**5, seed=4)
        r2 = first_stage_risk(traj, [near, far], 10**5, seed=4)
        assert r2 >= r1 > 0.9

    def test_minimum_sample_count(self):
        with pytest.raises(ValueError):
            first_stage_risk(_traj_at((0, 0)), [_obstacle((0, 0))], 100, seed=1)


class TestRunEpisode:
    def test_zero_pedestrians_tracks_centerline(self):
        cfg = _cfg(pedestrians=0)
        m = run_episode(cfg, seed=1, batches=[])
        assert m.completed
        bound = cfg.sim.course_length / cfg.sim.target_speed
        assert m.time_to_completion <= 1.10 * bound
        assert m.collisions == 0
        assert m.max_first_stage_collision_prob == 0.0

    def test_determinism_identical_traces(self, tmp_path):
        cfg = _cfg(pedestrians=2, timeout=6.0)
        batches = build_batches(cfg, 2)
        m1 = run_episode(cfg, seed=7, batches=batches, out_dir=tmp_path / "a")
        m2 = run_episode(cfg, seed=7, batches=batches, out_dir=tmp_path / "b")
        t1 = (tmp_path / "a" / "ep_00007.csv").read_text().splitlines()
        t2 = (tmp_path / "b" / "ep_00007.csv").read_text().splitlines()
        assert len(t1) == len(t2)
        for r1, r2 in zip(t1[2:], t2[2:]):
            c1, c2 = r1.split(","), r2.split(",")
            # wall-clock columns (planning_ms, scenario_ms) are excluded
            keep = [i for i in range(len(c1)) if i not in (len(c1) - 4, len(c1) - 3)]
            assert [c1[i] for i in keep] == [c2[i] for i in keep]
        assert m1.max_first_stage_collision_prob == m2.max_first_stage_collision_prob
        assert m1.time_to_completion == m2.time_to_completion

    def test_two_pedestrian_episode_clean(self, tmp_path):
        cfg = _cfg(pedestrians=2)
        batches = build_batches(cfg, 2)
        m = run_episode(cfg, seed=11, batches=batches, out_dir=tmp_path)
        assert m.completed
        assert m.collisions == 0
        # trace and polytope dump exist with header + rows
        trace = (tmp_path / "ep_00011.csv").read_text().splitlines()
        assert trace[0].startswith("# config_hash=")
        assert trace[1].split(",")[0] == "cycle"
        assert len(trace) > 10
        poly = (tmp_path / "ep_00011_poly.csv").read_text().splitlines()
        assert poly[1] == "cycle,stage,vertices,support"
        assert len(poly) > 10

    def test_trace_replay_matches_live_metrics(self, tmp_path):
        cfg = _cfg(pedestrians=2, timeout=6.0)
        batches = build_batches(cfg, 2)
        m = run_episode(cfg, seed=13, batches=batches, out_dir=tmp_path)
        replay = metrics_from_trace(tmp_path / "ep_00013.csv")
        assert replay["max_first_stage_collision_prob"] == pytest.approx(
            m.max_first_stage_collision_prob, abs=1e-9
        )


class TestSweep:
    def test_sweep_aggregation_structure(self, tmp_path):
        cfg = _cfg(timeout=6.0)
        results = run_sweep(cfg, [1, 2], seeds=[1, 2], jobs=2, out_dir=tmp_path)
        rows = aggregate_sweep(results, eps1=cfg.risk.eps)
        assert [r["pedestrians"] for r in rows] == [1, 2]
        for row in rows:
            assert row["episodes"] == 2
            assert row["completion_std_s"] >= 0.0

    def test_identical_runs_zero_std(self):
        cfg = _cfg(pedestrians=1, timeout=5.0)
        batches = build_batches(cfg, 1)
        runs = [run_episode(cfg, seed=5, batches=batches) for _ in range(2)]
        rows = aggregate_sweep({1: runs}, eps1=cfg.risk.eps)
        assert rows[0]["completion_std_s"] == 0.0

    def test_violation_counting_threshold(self):
        from scenplan.sim import RunMetrics

        runs = [
            RunMetrics(max_first_stage_collision_prob=p, time_to_completion=1.0)
            for p in (0.001, 0.0111, 0.02)
        ]
        rows = aggregate_sweep({2: runs}, eps1=0.0111)
        assert rows[0]["episodes_violating_eps"] == 1  # only 0.02 exceeds
