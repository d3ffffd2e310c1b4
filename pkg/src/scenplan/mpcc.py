"""Contouring-control formulation and per-cycle scenario-program assembly.

The stage cost decomposes tracking error at the current path progress into
contour (lateral) and lag (longitudinal) components, rewards progress rate,
penalizes inputs quadratically, and adds a squared-hinge term that
activates near the free-polytope boundary.  Assembly transforms each
obstacle's offline batch to its per-stage prediction, selects the l+R
nearest scenarios around the linearization point, discards the R furthest
from the mean, intersects the resulting half-spaces (all obstacles plus
the workspace box) into the stage polytope, and verifies the per-obstacle
support bound.  Only supporting half-spaces reach the solver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from scenplan.dynamics import NU, NX, RobotState, Trajectory, UnicycleDynamics
from scenplan.geometry import (
    CompactSources,
    FreePolytope,
    build_halfspaces,
    discard_from_d2,
    intersect_arrays,
    select_from_d2,
)
from scenplan.path import ReferencePath
from scenplan.risk import RiskProfile
from scenplan.sampling import ObstaclePrediction, ScenarioBatch, _cholesky_factor
from scenplan.solver import SPInstance, StageConstraints

__all__ = [
    "CostWeights",
    "VehicleGeometry",
    "PlannerParams",
    "AssemblyInfo",
    "predict_linearization_points",
    "stage_cost",
    "assemble_scenario_program",
    "shift_warm_start",
]


@dataclass(frozen=True)
class CostWeights:
    contour: float = 1.0
    lag: float = 1.0
    progress: float = 0.5
    inputs: tuple = (0.02, 0.1, 0.01)
    boundary: float = 5.0
    activation_dist: float = 0.4


@dataclass(frozen=True)
class VehicleGeometry:
    """Union-of-discs footprint: longitudinal offsets along the heading."""

    disc_offsets: tuple = (0.0,)
    disc_radius: float = 0.325

    def __post_init__(self):
        if len(self.disc_offsets) < 1:
            raise ValueError("need at least one disc")
        if self.disc_radius <= 0.0:
            raise ValueError("disc radius must be positive")

    @property
    def n_discs(self) -> int:
        return len(self.disc_offsets)


@dataclass
class PlannerParams:
    """Planner-side knobs shared by assembly and the solver."""

    horizon: int = 15
    dt: float = 0.2
    weights: CostWeights = field(default_factory=CostWeights)
    input_lo: tuple = (-3.0, -3.0, 0.0)
    input_hi: tuple = (3.0, 3.0, 1.8)
    speed_bounds: tuple = (0.0, 2.0)
    workspace_half_width: float = 20.0
    slack_weight: float = 1000.0
    kkt_tol: float = 1e-6
    qp_tol: float = 1e-8
    max_iterations: int = 30
    seed_projection_passes: int = 10


@dataclass
class AssemblyInfo:
    """Diagnostics of one assembly pass."""

    polytopes: list  # per stage: list per disc of FreePolytope or None
    support_violations: int = 0
    feasibility_incidents: int = 0
    scenario_time: float = 0.0


def predict_linearization_points(
    prev: Optional[Trajectory],
    geometry: VehicleGeometry,
    state: Optional[RobotState] = None,
    N: int = 15,
    dt: float = 0.2,
) -> np.ndarray:
    """Per-stage, per-disc linearization points (N, n_discs, 2).

    Warm path: shift the previous plan one stage forward and repeat its
    last state.  Cold start (no previous plan): propagate the measured
    state at constant velocity.
    """
    offsets = np.asarray(geometry.disc_offsets)
    if prev is not None and prev.horizon >= 2:
        states = prev.states
        Np = prev.horizon
        shifted = [states[min(k + 1, Np)] for k in range(1, N + 1)]
        pos = np.stack([s.pos for s in shifted])
        heading = np.array([s.heading for s in shifted])
    else:
        if state is None:
            raise ValueError("cold start needs the measured state")
        vel = state.speed * np.array([np.cos(state.heading), np.sin(state.heading)])
        ks = np.arange(1, N + 1)[:, None]
        pos = state.pos + ks * dt * vel
        heading = np.full(N, state.heading)
    dirs = np.stack([np.cos(heading), np.sin(heading)], axis=1)
    return pos[:, None, :] + offsets[None, :, None] * dirs[:, None, :]


def shift_warm_start(prev: Trajectory, dynamics: UnicycleDynamics) -> Trajectory:
    """One-stage shift of the previous solution for warm starting."""
    X = prev.states_array()
    U = prev.inputs_array()
    X_new = np.vstack([X[1:], dynamics.step(X[-1], U[-1])[None, :]])
    U_new = np.vstack([U[1:], U[-1][None, :]])
    return Trajectory.from_arrays(X_new, U_new, stamp=prev.stamp + 1)


def stage_cost(
    state: RobotState,
    inp,
    path: ReferencePath,
    polytope: Optional[FreePolytope],
    weights: CostWeights = CostWeights(),
    dt: float = 0.2,
    disc_offset: float = 0.0,
) -> float:
    """Reference stage cost (scalar); the solver mirrors its Gauss-Newton model.

    contour^2 + lag^2 terms at the current progress, a negative progress
    reward, quadratic input cost, and a squared hinge on the distance to
    each supporting half-space of the stage polytope.
    """
    u = inp.as_vector() if hasattr(inp, "as_vector") else np.asarray(inp, dtype=float)
    point, tangent, normal = path.frame_at(state.progress)
    err = state.pos - point
    e_c = float(normal @ err)
    e_l = float(tangent @ err)
    cost = weights.contour * e_c**2 + weights.lag * e_l**2
    cost -= weights.progress * u[2] * dt
    cost += float(u @ (np.asarray(weights.inputs) * u))
    if polytope is not None and weights.boundary > 0.0:
        A_sup, b_sup = polytope.support_arrays()
        p_d = state.disc_center(disc_offset)
        dist = b_sup - A_sup @ p_d
        hinge = np.clip(weights.activation_dist - dist, 0.0, None)
        cost += weights.boundary * float(hinge @ hinge)
    return float(cost)


class BatchedMPCCCost:
    """All-stage cost evaluation for the solver's hot path.

    Flattens every stage's boundary rows into one array block so a full
    merit or quadratics evaluation costs a handful of numpy calls instead
    of a per-stage Python loop.  Semantics match :class:`MPCCStageCost`.
    """

    def __init__(self, path, weights, dt, per_stage_blocks):
        self.path = path
        self.w = weights
        self.dt = dt
        self.qu_diag = np.asarray(weights.inputs, dtype=float)
        self.N = len(per_stage_blocks)
        rows_A, rows_b, rows_off, rows_stage = [], [], [], []
        for k, blocks in enumerate(per_stage_blocks):
            for A2, b, off in blocks:
                if A2.shape[0] == 0:
                    continue
                rows_A.append(A2)
                rows_b.append(b)
                rows_off.append(np.full(A2.shape[0], off))
                rows_stage.append(np.full(A2.shape[0], k, dtype=np.int64))
        if rows_A:
            self.A = np.vstack(rows_A)
            self.b = np.concatenate(rows_b)
            self.off = np.concatenate(rows_off)
            self.stage = np.concatenate(rows_stage)
        else:
            self.A = np.zeros((0, 2))
            self.b = np.zeros(0)
            self.off = np.zeros(0)
            self.stage = np.zeros(0, dtype=np.int64)

    def _tracking(self, X1):
        point, tangent, normal = self.path.frame_at(X1[:, 5])
        err = X1[:, :2] - point
        e_c = np.einsum("ki,ki->k", normal, err)
        e_l = np.einsum("ki,ki->k", tangent, err)
        return e_c, e_l, tangent, normal

    def _hinge(self, X1):
        if self.A.shape[0] == 0:
            return None
        xs = X1[self.stage]
        cth = np.cos(xs[:, 2])
        sth = np.sin(xs[:, 2])
        px = xs[:, 0] + self.off * cth
        py = xs[:, 1] + self.off * sth
        dist = self.b - (self.A[:, 0] * px + self.A[:, 1] * py)
        act = self.w.activation_dist - dist
        return act, cth, sth

    def violation_l1(self, X1: np.ndarray) -> float:
        """Summed positive boundary-row residuals (rows mirror constraints)."""
        hinge = self._hinge(X1)
        if hinge is None:
            return 0.0
        resid = self.w.activation_dist - hinge[0]  # = dist; violated when < 0
        return float(np.clip(-resid, 0.0, None).sum())

    def value_batch(self, X1: np.ndarray, U: np.ndarray) -> float:
        e_c, e_l, _, _ = self._tracking(X1)
        cost = self.w.contour * float(e_c @ e_c) + self.w.lag * float(e_l @ e_l)
        cost += float(np.einsum("ki,i,ki->", U, self.qu_diag, U))
        cost -= self.w.progress * self.dt * float(U[:, 2].sum())
        hinge = self._hinge(X1)
        if hinge is not None:
            act = np.clip(hinge[0], 0.0, None)
            cost += self.w.boundary * float(act @ act)
        return cost

    def quadratics_batch(self, X1: np.ndarray, U: np.ndarray):
        N = self.N
        e_c, e_l, tangent, normal = self._tracking(X1)
        Qxx = np.zeros((N, NX, NX))
        qx = np.zeros((N, NX))
        gc = np.zeros((N, NX))
        gc[:, :2] = normal
        gl = np.zeros((N, NX))
        gl[:, :2] = tangent
        gl[:, 5] = -1.0
        Qxx += 2.0 * self.w.contour * np.einsum("ki,kj->kij", gc, gc)
        Qxx += 2.0 * self.w.lag * np.einsum("ki,kj->kij", gl, gl)
        qx += 2.0 * self.w.contour * e_c[:, None] * gc
        qx += 2.0 * self.w.lag * e_l[:, None] * gl
        hinge = self._hinge(X1)
        if hinge is not None:
            act, cth, sth = hinge
            on = act > 0.0
            if np.any(on):
                Aa = self.A[on]
                off = self.off[on]
                G = np.zeros((Aa.shape[0], NX))
                G[:, :2] = Aa
                G[:, 2] = off * (-Aa[:, 0] * sth[on] + Aa[:, 1] * cth[on])
                contrib = 2.0 * self.w.boundary * np.einsum("ri,rj->rij", G, G)
                np.add.at(Qxx, self.stage[on], contrib)
                np.add.at(qx, self.stage[on], 2.0 * self.w.boundary * act[on, None] * G)
        Quu = np.broadcast_to(np.diag(2.0 * self.qu_diag), (N, NU, NU))
        qu = 2.0 * self.qu_diag * U
        qu[:, 2] -= self.w.progress * self.dt
        return Qxx, qx, Quu, qu


class MPCCStageCost:
    """Gauss-Newton cost model of one stage for the solver.

    Handles an arbitrary set of boundary rows per disc; the quadratics are
    exact for the contour/lag/input terms (piecewise-linear path) and
    Gauss-Newton for the hinge.
    """

    def __init__(self, path, weights, dt, boundary_blocks):
        self.path = path
        self.w = weights
        self.dt = dt
        self.blocks = boundary_blocks  # list of (A (m,2), b (m,), offset)
        self.qu_diag = np.asarray(weights.inputs, dtype=float)

    def value(self, x: np.ndarray, u: np.ndarray) -> float:
        point, tangent, normal = self.path.frame_at(x[5])
        err = x[:2] - point
        e_c = float(normal @ err)
        e_l = float(tangent @ err)
        cost = self.w.contour * e_c**2 + self.w.lag * e_l**2
        cost += float(u @ (self.qu_diag * u)) - self.w.progress * u[2] * self.dt
        th = x[2]
        heading = np.array([np.cos(th), np.sin(th)])
        for A2, b, off in self.blocks:
            if A2.shape[0] == 0:
                continue
            dist = b - A2 @ (x[:2] + off * heading)
            hinge = np.clip(self.w.activation_dist - dist, 0.0, None)
            cost += self.w.boundary * float(hinge @ hinge)
        return float(cost)

    def quadratics(self, x: np.ndarray, u: np.ndarray):
        point, tangent, normal = self.path.frame_at(x[5])
        err = x[:2] - point
        e_c = float(normal @ err)
        e_l = float(tangent @ err)
        Qxx = np.zeros((NX, NX))
        qx = np.zeros(NX)
        # contour residual: grad [n, 0, 0, 0]; lag residual: grad [t, 0, 0, -1]
        gc = np.zeros(NX)
        gc[:2] = normal
        gl = np.zeros(NX)
        gl[:2] = tangent
        gl[5] = -1.0
        Qxx += 2.0 * self.w.contour * np.outer(gc, gc)
        qx += 2.0 * self.w.contour * e_c * gc
        Qxx += 2.0 * self.w.lag * np.outer(gl, gl)
        qx += 2.0 * self.w.lag * e_l * gl
        th = x[2]
        cth, sth = np.cos(th), np.sin(th)
        heading = np.array([cth, sth])
        for A2, b, off in self.blocks:
            if A2.shape[0] == 0:
                continue
            dist = b - A2 @ (x[:2] + off * heading)
            act = self.w.activation_dist - dist
            mask = act > 0.0
            if not np.any(mask):
                continue
            Aa = A2[mask]
            G = np.zeros((Aa.shape[0], NX))
            G[:, :2] = Aa
            if off != 0.0:
                G[:, 2] = off * (-Aa[:, 0] * sth + Aa[:, 1] * cth)
            Qxx += 2.0 * self.w.boundary * G.T @ G
            qx += 2.0 * self.w.boundary * G.T @ act[mask]
        Quu = np.diag(2.0 * self.qu_diag)
        qu = 2.0 * self.qu_diag * u
        qu[2] -= self.w.progress * self.dt
        return Qxx, qx, Quu, qu


def _project_seed(seed: np.ndarray, A: np.ndarray, b: np.ndarray, passes: int) -> np.ndarray:
    """Push the seed onto the feasible side of each violated half-space."""
    margin = 1e-6
    pt = seed.copy()
    for _ in range(passes):
        resid = A @ pt - b
        bad = np.flatnonzero(resid > 0.0)
        if bad.size == 0:
            return pt
        for j in bad:
            pt = pt - (resid[j] + margin) * A[j]
            resid = A @ pt - b
    resid = A @ pt - b
    return pt if resid.max() <= 0.0 else None


def assemble_scenario_program(
    state: RobotState,
    prev: Optional[Trajectory],
    obstacles: Sequence[ObstaclePrediction],
    batches: Sequence[ScenarioBatch],
    profile: RiskProfile,
    path: ReferencePath,
    geometry: VehicleGeometry,
    params: PlannerParams,
    prev_polytopes: Optional[list] = None,
) -> tuple[SPInstance, AssemblyInfo]:
    """Build the per-cycle scenario program (constraints + costs + boxes).

    For every stage and disc: transform each obstacle's relevant samples,
    select the nearest l+R, discard the R furthest from that obstacle's
    mean, build half-spaces at the combined radius, intersect all of them
    with the workspace box, and keep the supporting rows.  Falls back to
    seed projection and then to the previous cycle's polytope on
    infeasible linearization points.
    """
    t0 = time.perf_counter()
    N = params.horizon
    if any(o.horizon < N for o in obstacles):
        raise ValueError("obstacle predictions shorter than the horizon")
    if len(batches) != len(obstacles):
        raise ValueError("need one batch per obstacle")

    lin_pts = predict_linearization_points(prev, geometry, state, N, params.dt)
    ws_center = state.pos
    hw = params.workspace_half_width
    A_ws = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    b_ws = np.array(
        [ws_center[0] + hw, -(ws_center[0] - hw), ws_center[1] + hw, -(ws_center[1] - hw)]
    )

    # per-obstacle standard-sample projections, cached by covariance bytes;
    # distances to the mean are mean-free, so they cache the same way
    transformed: list[list[np.ndarray]] = []
    mean_d2: list[list[np.ndarray]] = []
    lin_d2 = []
    for pred, batch in zip(obstacles, batches):
        z = batch.relevant_samples()
        per_stage = []
        per_stage_d2 = []
        per_stage_proj = []
        cache_key, cache_val, cache_d2 = None, None, None
        for k in range(N):
            key = pred.covariances[k].tobytes()
            if key != cache_key:
                L = _cholesky_factor(pred.covariances[k])
                cache_val = z @ L.T
                cache_d2 = np.einsum("ij,ij->i", cache_val, cache_val)
                cache_key = key
            per_stage.append(cache_val + pred.means[k])
            per_stage_d2.append(cache_d2)
            per_stage_proj.append(cache_val)
        transformed.append(per_stage)
        mean_d2.append(per_stage_d2)
        # |pts - x_hat|^2 expanded around the mean-free projection: a few
        # matmuls per obstacle instead of an (N, n_discs, m, 2) tensor
        centers = pred.means[:, None, :] - lin_pts  # (N, n_discs, 2)
        cc = np.einsum("kdi,kdi->kd", centers, centers)
        if all(p is per_stage_proj[0] for p in per_stage_proj):
            cross = np.einsum("mi,kdi->kdm", per_stage_proj[0], centers)
            d2 = per_stage_d2[0][None, None, :] + 2.0 * cross + cc[:, :, None]
        else:
            d2 = np.empty((N, lin_pts.shape[1], z.shape[0]))
            for k in range(N):
                cross = centers[k] @ per_stage_proj[k].T  # (n_discs, m)
                d2[k] = per_stage_d2[k][None, :] + 2.0 * cross + cc[k][:, None]
        lin_d2.append(d2)

    count = profile.selection_size
    info = AssemblyInfo(polytopes=[[None] * geometry.n_discs for _ in range(N)])
    stage_cons: list[StageConstraints] = []
    stage_costs: list[MPCCStageCost] = []
    all_cost_blocks: list[list] = []

    ws_obs = np.full(4, -1, dtype=np.int64)
    ws_idx = np.zeros(4, dtype=np.int64)
    for k in range(N):
        blocks = []
        cost_blocks = []
        for d_i, off in enumerate(geometry.disc_offsets):
            x_hat = lin_pts[k, d_i]
            A_rows, b_rows, src_obs, src_idx = [], [], [], []
            for v, (pred, per_stage) in enumerate(zip(obstacles, transformed)):
                pts = per_stage[k]
                d2 = lin_d2[v][k, d_i]
                sel = select_from_d2(d2, count) if count < d2.size else np.arange(d2.size)
                kept = discard_from_d2(sel, mean_d2[v][k][sel], profile.discard)
                r = geometry.disc_radius + pred.radius
                good = d2[kept] > 1e-18
                if not np.all(good):
                    # degenerate samples sit on the linearization point; the
                    # stage is in collision there, flag and drop those rows
                    kept = kept[good]
                    info.feasibility_incidents += 1
                if kept.size == 0:
                    continue
                A_v, b_v = build_halfspaces(pts[kept], x_hat, r)
                A_rows.append(A_v)
                b_rows.append(b_v)
                src_obs.append(np.full(kept.size, v, dtype=np.int64))
                src_idx.append(kept)
            A_all = np.vstack(A_rows + [A_ws])
            b_all = np.concatenate(b_rows + [b_ws])
            sources = CompactSources(
                np.concatenate(src_obs + [ws_obs]), np.concatenate(src_idx + [ws_idx])
            )

            seed = x_hat
            resid = A_all @ seed - b_all
            if resid.max() > 0.0:
                seed = _project_seed(seed, A_all, b_all, params.seed_projection_passes)
            if seed is not None:
                poly = intersect_arrays(A_all, b_all, sources, seed)
            else:
                info.feasibility_incidents += 1
                if prev_polytopes is not None and prev_polytopes[k][d_i] is not None:
                    poly = prev_polytopes[k][d_i]
                else:
                    poly = intersect_arrays(
                        A_ws.copy(), b_ws.copy(), CompactSources(ws_obs, ws_idx), state.pos
                    )
            info.polytopes[k][d_i] = poly

            sup = np.asarray(poly.support, dtype=int)
            sup_obs = poly.sources.obs[sup] if isinstance(poly.sources, CompactSources) else None
            if sup_obs is not None and sup_obs.size:
                scn = sup_obs[sup_obs >= 0]
                if scn.size and np.bincount(scn).max() > profile.s_bar:
                    info.support_violations += 1

            A_sup, b_sup = poly.support_arrays()
            blocks.append((A_sup, b_sup, float(off)))
            cost_blocks.append((A_sup, b_sup, float(off)))
        stage_cons.append(StageConstraints(blocks=blocks))
        stage_costs.append(MPCCStageCost(path, params.weights, params.dt, cost_blocks))
        all_cost_blocks.append(cost_blocks)

    batched = BatchedMPCCCost(path, params.weights, params.dt, all_cost_blocks)
    instance = SPInstance(
        x0=state.as_vector(),
        N=N,
        dynamics=UnicycleDynamics(params.dt),
        stage_costs=stage_costs,
        constraints=stage_cons,
        input_box=(np.asarray(params.input_lo), np.asarray(params.input_hi)),
        speed_bounds=params.speed_bounds,
        slack_weight=params.slack_weight,
        kkt_tol=params.kkt_tol,
        qp_tol=params.qp_tol,
        max_iterations=params.max_iterations,
        batched_cost=batched,
    )
    info.scenario_time = time.perf_counter() - t0
    return instance, info
