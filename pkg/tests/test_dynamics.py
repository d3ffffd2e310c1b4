"""Tests for the unicycle model, its Jacobians, and the reference path."""

import numpy as np
import pytest

from scenplan.dynamics import (
    ControlInput,
    RobotState,
    Trajectory,
    rk4_jacobians,
    rk4_step,
    step_dynamics,
)
from scenplan.path import ReferencePath

RNG = np.random.default_rng(321)


def euler_reference(x, u, dt, n):
    """Independent fixed-step Euler integrator (refinement oracle)."""
    h = dt / n
    x = np.asarray(x, dtype=float).copy()
    for _ in range(n):
        th, v = x[2], x[3]
        x = x + h * np.array([v * np.cos(th), v * np.sin(th), x[4], u[0], u[1], u[2]])
    return x


class TestStepDynamics:
    def test_rest_is_fixed_point(self):
        s = RobotState(pos=(1.0, 2.0), heading=0.7, speed=0.0, yaw_rate=0.0, progress=3.0)
        out = step_dynamics(s, ControlInput(0.0, 0.0, 0.0), 0.2)
        assert np.allclose(out.as_vector(), s.as_vector())

    def test_straight_line_motion(self):
        s = RobotState(pos=(0.0, 0.0), heading=0.0, speed=1.0, yaw_rate=0.0, progress=0.0)
        out = step_dynamics(s, ControlInput(0.0, 0.0, 0.0), 0.2)
        assert np.allclose(out.pos, [0.2, 0.0], atol=1e-12)
        assert out.speed == pytest.approx(1.0)

    def test_progress_integrates_path_speed(self):
        s = RobotState(pos=(0.0, 0.0), heading=0.0, speed=0.0, yaw_rate=0.0, progress=1.0)
        out = step_dynamics(s, ControlInput(0.0, 0.0, 1.5), 0.2)
        assert out.progress == pytest.approx(1.3)

    def test_speed_clamped_to_bounds(self):
        s = RobotState(pos=(0.0, 0.0), heading=0.0, speed=1.9, yaw_rate=0.0, progress=0.0)
        out = step_dynamics(s, ControlInput(3.0, 0.0, 0.0), 0.2, speed_bounds=(0.0, 2.0))
        assert out.speed == 2.0

    def test_matches_euler_refinement_oracle(self):
        # The 1000-substep Euler oracle has its own O(h) error near 6e-5 at
        # these rates, which dominates the comparison; the bound below is
        # the measured envelope over the planner's state regime.
        worst = 0.0
        for _ in range(100):
            x = np.array(
                [
                    RNG.uniform(-5, 5),
                    RNG.uniform(-5, 5),
                    RNG.uniform(-np.pi, np.pi),
                    RNG.uniform(0, 2.0),
                    RNG.uniform(-1.0, 1.0),
                    RNG.uniform(0, 10),
                ]
            )
            u = np.array([RNG.uniform(-3, 3), RNG.uniform(-3, 3), RNG.uniform(0, 2)])
            got = rk4_step(x, u, 0.2)
            ref = euler_reference(x, u, 0.2, 1000)
            worst = max(worst, float(np.linalg.norm(got[:2] - ref[:2])))
        assert worst < 1e-4

    def test_invalid_dt(self):
        s = RobotState(pos=(0, 0), heading=0, speed=0, yaw_rate=0, progress=0)
        with pytest.raises(ValueError):
            step_dynamics(s, ControlInput(0, 0, 0), 0.0)


class TestJacobians:
    def test_match_finite_differences(self):
        for _ in range(20):
            x = RNG.normal(size=6)
            u = RNG.normal(size=3)
            A, B = rk4_jacobians(x, u, 0.2)
            eps = 1e-6
            A_fd = np.zeros((6, 6))
            for i in range(6):
                dx = np.zeros(6)
                dx[i] = eps
                A_fd[:, i] = (rk4_step(x + dx, u, 0.2) - rk4_step(x - dx, u, 0.2)) / (2 * eps)
            B_fd = np.zeros((6, 3))
            for i in range(3):
                du = np.zeros(3)
                du[i] = eps
                B_fd[:, i] = (rk4_step(x, u + du, 0.2) - rk4_step(x, u - du, 0.2)) / (2 * eps)
            assert np.abs(A - A_fd).max() < 1e-7
            assert np.abs(B - B_fd).max() < 1e-7

    def test_batched_matches_scalar(self):
        X = RNG.normal(size=(15, 6))
        U = RNG.normal(size=(15, 3))
        A, B = rk4_jacobians(X, U, 0.2)
        Xn = rk4_step(X, U, 0.2)
        for k in range(15):
            Ak, Bk = rk4_jacobians(X[k], U[k], 0.2)
            assert np.allclose(A[k], Ak)
            assert np.allclose(B[k], Bk)
            assert np.allclose(Xn[k], rk4_step(X[k], U[k], 0.2))


class TestTrajectory:
    def test_shape_validation(self):
        states = [RobotState((0, 0), 0, 0, 0, 0)] * 4
        inputs = [ControlInput(0, 0, 0)] * 2
        with pytest.raises(ValueError):
            Trajectory(states=states, inputs=inputs)

    def test_array_round_trip(self):
        X = RNG.normal(size=(6, 6))
        U = RNG.normal(size=(5, 3))
        traj = Trajectory.from_arrays(X, U, stamp=3)
        assert np.allclose(traj.states_array(), X)
        assert np.allclose(traj.inputs_array(), U)
        assert traj.horizon == 5


class TestReferencePath:
    def test_straight_line_lookup(self):
        path = ReferencePath([(0.0, 0.0), (10.0, 0.0)])
        assert path.length == pytest.approx(10.0)
        assert np.allclose(path.point_at(3.5), [3.5, 0.0])
        assert np.allclose(path.tangent_at(3.5), [1.0, 0.0])
        assert np.allclose(path.normal_at(3.5), [0.0, 1.0])

    def test_clamping_beyond_ends(self):
        path = ReferencePath([(0.0, 0.0), (1.0, 0.0)])
        assert np.allclose(path.point_at(-5.0), [0.0, 0.0])
        assert np.allclose(path.point_at(99.0), [1.0, 0.0])

    def test_polyline_arc_length(self):
        path = ReferencePath([(0.0, 0.0), (3.0, 0.0), (3.0, 4.0)])
        assert path.length == pytest.approx(7.0)
        assert np.allclose(path.point_at(5.0), [3.0, 2.0])
        assert np.allclose(path.tangent_at(5.0), [0.0, 1.0])

    def test_vectorized_queries(self):
        path = ReferencePath([(0.0, 0.0), (2.0, 0.0), (2.0, 2.0)])
        s = np.array([0.5, 1.5, 3.0])
        pts, tans, norms = path.frame_at(s)
        assert pts.shape == (3, 2)
        assert np.allclose(pts[2], [2.0, 1.0])
        assert np.allclose(np.einsum("ij,ij->i", tans, norms), 0.0)

    def test_degenerate_waypoints_rejected(self):
        with pytest.raises(ValueError):
            ReferencePath([(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])
        with pytest.raises(ValueError):
            ReferencePath([(0.0, 0.0)])
