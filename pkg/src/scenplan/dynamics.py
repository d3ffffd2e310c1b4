"""Second-order unicycle model with path-progress state.

State vector layout: [x, y, heading, speed, yaw_rate, progress]; inputs
[accel, yaw_accel, path_speed].  The continuous dynamics

    x' = v cos(th), y' = v sin(th), th' = w, v' = a, w' = alpha, s' = vs

are integrated with one RK4 step per planning interval.  The public
stepper clamps speed to its configured bounds afterwards; the solver uses
the unclamped step plus explicit speed constraints, which coincide with
the clamped dynamics whenever the bounds hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "NX",
    "NU",
    "RobotState",
    "ControlInput",
    "Trajectory",
    "step_dynamics",
    "rk4_step",
    "rk4_jacobians",
]

NX = 6
NU = 3


@dataclass(frozen=True)
class RobotState:
    pos: np.ndarray
    heading: float
    speed: float
    yaw_rate: float
    progress: float

    def __post_init__(self):
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.pos[0], self.pos[1], self.heading, self.speed, self.yaw_rate, self.progress]
        )

    @staticmethod
    def from_vector(x: np.ndarray) -> "RobotState":
        x = np.asarray(x, dtype=float)
        return RobotState(
            pos=x[:2].copy(),
            heading=float(x[2]),
            speed=float(x[3]),
            yaw_rate=float(x[4]),
            progress=float(x[5]),
        )

    def disc_center(self, offset: float) -> np.ndarray:
        """Collision-disc center at a longitudinal offset along the heading."""
        return self.pos + offset * np.array([np.cos(self.heading), np.sin(self.heading)])


@dataclass(frozen=True)
class ControlInput:
    accel: float
    yaw_accel: float
    path_speed: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.accel, self.yaw_accel, self.path_speed])

    @staticmethod
    def from_vector(u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return ControlInput(accel=float(u[0]), yaw_accel=float(u[1]), path_speed=float(u[2]))


@dataclass
class Trajectory:
    """N+1 states and N inputs; states[k] is the k-step-ahead prediction."""

    states: list
    inputs: list
    stamp: int = 0

    def __post_init__(self):
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError(
                f"need N+1 states for N inputs, got {len(self.states)}/{len(self.inputs)}"
            )

    @property
    def horizon(self) -> int:
        return len(self.inputs)

    def states_array(self) -> np.ndarray:
        return np.stack([s.as_vector() for s in self.states])

    def inputs_array(self) -> np.ndarray:
        return np.stack([u.as_vector() for u in self.inputs])

    def positions(self) -> np.ndarray:
        return np.stack([s.pos for s in self.states])

    @staticmethod
    def from_arrays(X: np.ndarray, U: np.ndarray, stamp: int = 0) -> "Trajectory":
        return Trajectory(
            states=[RobotState.from_vector(x) for x in X],
            inputs=[ControlInput.from_vector(u) for u in U],
            stamp=stamp,
        )


def _deriv(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    th, v = X[..., 2], X[..., 3]
    out = np.empty_like(X)
    out[..., 0] = v * np.cos(th)
    out[..., 1] = v * np.sin(th)
    out[..., 2] = X[..., 4]
    out[..., 3] = U[..., 0]
    out[..., 4] = U[..., 1]
    out[..., 5] = U[..., 2]
    return out


def rk4_step(X: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    """Unclamped RK4 step; broadcasts over leading batch dimensions."""
    k1 = _deriv(X, U)
    k2 = _deriv(X + 0.5 * dt * k1, U)
    k3 = _deriv(X + 0.5 * dt * k2, U)
    k4 = _deriv(X + dt * k3, U)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _deriv_jac(X: np.ndarray) -> np.ndarray:
    """State Jacobian of the continuous dynamics, batched to (..., 6, 6)."""
    th, v = X[..., 2], X[..., 3]
    J = np.zeros(X.shape[:-1] + (NX, NX))
    J[..., 0, 2] = -v * np.sin(th)
    J[..., 0, 3] = np.cos(th)
    J[..., 1, 2] = v * np.cos(th)
    J[..., 1, 3] = np.sin(th)
    J[..., 2, 4] = 1.0
    return J


_JU = np.zeros((NX, NU))
_JU[3, 0] = 1.0
_JU[4, 1] = 1.0
_JU[5, 2] = 1.0


def rk4_jacobians(X: np.ndarray, U: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact Jacobians (d x+/d x, d x+/d u) of the RK4 step, batched."""
    eye = np.eye(NX)
    Ju = np.broadcast_to(_JU, X.shape[:-1] + (NX, NU))

    k1 = _deriv(X, U)
    J1x = _deriv_jac(X)
    J1u = Ju

    x2 = X + 0.5 * dt * k1
    k2 = _deriv(x2, U)
    D2 = _deriv_jac(x2)
    J2x = D2 @ (eye + 0.5 * dt * J1x)
    J2u = 0.5 * dt * (D2 @ J1u) + Ju

    x3 = X + 0.5 * dt * k2
    k3 = _deriv(x3, U)
    D3 = _deriv_jac(x3)
    J3x = D3 @ (eye + 0.5 * dt * J2x)
    J3u = 0.5 * dt * (D3 @ J2u) + Ju

    x4 = X + dt * k3
    D4 = _deriv_jac(x4)
    J4x = D4 @ (eye + dt * J3x)
    J4u = dt * (D4 @ J3u) + Ju

    A = eye + (dt / 6.0) * (J1x + 2.0 * J2x + 2.0 * J3x + J4x)
    B = (dt / 6.0) * (J1u + 2.0 * J2u + 2.0 * J3u + J4u)
    return A, B


def step_dynamics(
    state: RobotState,
    inp: ControlInput,
    dt: float,
    speed_bounds: tuple[float, float] = (-np.inf, np.inf),
) -> RobotState:
    """Integrate one interval with RK4, then clamp speed to its bounds."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = rk4_step(state.as_vector(), inp.as_vector(), dt)
    x[3] = min(max(x[3], speed_bounds[0]), speed_bounds[1])
    return RobotState.from_vector(x)


@dataclass(frozen=True)
class UnicycleDynamics:
    """Dynamics handle bundling the step and its Jacobians for the solver."""

    dt: float

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return rk4_step(x, u, self.dt)

    def jac(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return rk4_jacobians(x, u, self.dt)

    step_batch = step
    jac_batch = jac
