"""Sequential quadratic programming for the per-cycle scenario program.

The program has nonlinear shooting dynamics, per-stage linear half-space
constraints on the (disc) positions, input boxes, and speed bounds.  Each
SQP iteration linearizes the dynamics about the current iterate, condenses
the state deviations onto the inputs, and solves a strictly convex QP with
a Gauss-Newton Hessian.  The polytope constraints carry a nonnegative
slack per (stage, disc) under a linear penalty, so the controller always
returns an input even when the stage polytopes cannot all be honored.

The QP itself is solved with a dual active-set method (Goldfarb-Idnani):
start at the unconstrained minimum, repeatedly add the most violated
constraint, taking partial dual steps that drop blocking constraints.  A
final KKT refinement solve removes the drift of incremental updates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from scenplan.dynamics import NU, NX, Trajectory

__all__ = ["SPInstance", "SolveReport", "StageConstraints", "solve", "internal_qp_solve"]

QP_TOL = 1e-8
KKT_TOL = 1e-6
SLACK_WEIGHT = 1e3
SLACK_REG = 1e-8


class QPError(RuntimeError):
    """Raised when the QP subproblem cannot be solved."""


@dataclass
class StageConstraints:
    """Linear position constraints for one stage, grouped by vehicle disc.

    Row j of block d requires A[j] . (pos + off_d * heading_dir) <= b[j],
    softened by that disc's stage slack.
    """

    blocks: list  # list of (A (m,2), b (m,), offset float)

    def total_rows(self) -> int:
        return sum(A.shape[0] for A, _, _ in self.blocks)


@dataclass
class SPInstance:
    """Deterministic scenario program handed to the solver.

    ``stage_costs[k]`` models the cost of (state k+1, input k) through
    ``value(x, u)`` and ``quadratics(x, u) -> (Qxx, qx, Quu, qu)``; the
    Gauss-Newton quadratics are exact for quadratic costs.
    ``constraints[k]`` restricts state k+1.
    """

    x0: np.ndarray
    N: int
    dynamics: object
    stage_costs: Sequence[object]
    constraints: Sequence[StageConstraints]
    input_box: tuple[np.ndarray, np.ndarray]
    speed_bounds: tuple[float, float] = (-np.inf, np.inf)
    slack_weight: float = SLACK_WEIGHT
    kkt_tol: float = KKT_TOL
    qp_tol: float = QP_TOL
    max_iterations: int = 30
    batched_cost: Optional[object] = None  # value_batch/quadratics_batch fast path

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if len(self.stage_costs) != self.N or len(self.constraints) != self.N:
            raise ValueError("stage cost/constraint counts must equal N")

    @property
    def n_discs(self) -> int:
        return max((len(c.blocks) for c in self.constraints), default=1) or 1


@dataclass
class SolveReport:
    trajectory: Trajectory
    iterations: int
    kkt_residual: float
    max_constraint_violation: float
    slack_used: bool
    wall_time: float
    status: str  # converged | iteration-capped | infeasible-slacked


# ---------------------------------------------------------------------------
# dual active-set QP


def _as_rows(A_ineq, b_ineq, boxes, n):
    rows = []
    rhs = []
    if A_ineq is not None and len(A_ineq):
        A_ineq = np.atleast_2d(np.asarray(A_ineq, dtype=float))
        rows.append(A_ineq)
        rhs.append(np.asarray(b_ineq, dtype=float))
    if boxes is not None:
        lo, hi = (np.asarray(v, dtype=float) for v in boxes)
        fin = np.flatnonzero(np.isfinite(lo))
        if fin.size:
            E = np.zeros((fin.size, n))
            E[np.arange(fin.size), fin] = -1.0
            rows.append(E)
            rhs.append(-lo[fin])
        fin = np.flatnonzero(np.isfinite(hi))
        if fin.size:
            E = np.zeros((fin.size, n))
            E[np.arange(fin.size), fin] = 1.0
            rows.append(E)
            rhs.append(hi[fin])
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(rows), np.concatenate(rhs)


def internal_qp_solve(
    H: np.ndarray,
    g: np.ndarray,
    A_ineq: Optional[np.ndarray] = None,
    b_ineq: Optional[np.ndarray] = None,
    boxes: Optional[tuple] = None,
    tol: float = QP_TOL,
):
    """Minimize 0.5 w'Hw + g'w subject to A_ineq w <= b_ineq and boxes.

    H must be symmetric positive definite (regularize upstream).  Returns
    (w, lam) where lam holds multipliers for the stacked constraint rows
    (A_ineq rows first, then finite lower-box rows, then upper-box rows).
    Deterministic: violations and blocking constraints resolve by lowest
    index.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    try:
        chol = cho_factor(H, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise QPError("QP Hessian is not positive definite") from exc

    def hsolve(v):
        return cho_solve(chol, v, check_finite=False)

    C, d = _as_rows(A_ineq, b_ineq, boxes, n)
    w = -hsolve(g)
    m = C.shape[0]
    if m == 0:
        return w, np.zeros(0)

    # active-set state kept in preallocated buffers; the Gram matrix
    # M = N_a H^-1 N_a^T grows/shrinks incrementally with adds and drops
    active: list[int] = []
    lam_full = np.zeros(m)
    Na = np.empty((n + 1, n))
    HN = np.empty((n, n + 1))
    M = np.empty((n + 1, n + 1))
    lam = np.empty(n + 1)
    q = 0

    for _ in range(20 * (n + m)):
        viol = C @ w - d
        p = int(np.argmax(viol))
        if viol[p] <= tol:
            break
        cp = C[p]
        hc_p = hsolve(cp)
        lam_p = 0.0
        for _inner in range(m + n + 2):
            if q:
                rhs = Na[:q] @ hc_p
                try:
                    r = np.linalg.solve(M[:q, :q], rhs)
                except np.linalg.LinAlgError:
                    raise QPError("active set became singular")
                z = hc_p - HN[:, :q] @ r
            else:
                rhs = None
                r = np.zeros(0)
                z = hc_p
            czp = cp @ z
            viol_p = float(cp @ w - d[p])
            t2 = viol_p / czp if czp > 1e-14 else np.inf
            if q:
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratios = np.where(r > 1e-14, lam[:q] / r, np.inf)
                j_star = int(np.argmin(ratios))
                t1 = float(ratios[j_star])
            else:
                t1 = np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QPError("QP infeasible: no step renders the constraint feasible")
            if czp > 1e-14:
                w = w - t * z
            lam_p += t
            if q:
                lam[:q] -= t * r
            if t == t2 and t2 <= t1:
                Na[q] = cp
                HN[:, q] = hc_p
                if q:
                    M[:q, q] = rhs
                    M[q, :q] = rhs
                M[q, q] = cp @ hc_p
                lam[q] = lam_p
                active.append(p)
                q += 1
                break
            # drop the blocking constraint, continue working on p
            j = j_star
            Na[j : q - 1] = Na[j + 1 : q]
            HN[:, j : q - 1] = HN[:, j + 1 : q]
            M[j : q - 1, :q] = M[j + 1 : q, :q]
            M[: q - 1, j : q - 1] = M[: q - 1, j + 1 : q]
            lam[j : q - 1] = lam[j + 1 : q]
            active.pop(j)
            q -= 1
        else:
            raise QPError("QP inner loop failed to terminate")
    else:
        raise QPError("QP outer loop failed to terminate")

    # KKT refinement on the final active set removes incremental drift
    if active:
        Nq = C[active]
        K = np.zeros((n + q, n + q))
        K[:n, :n] = H
        K[:n, n:] = Nq.T
        K[n:, :n] = Nq
        rhs_k = np.concatenate([-g, d[active]])
        try:
            sol = np.linalg.solve(K, rhs_k)
            w_ref, lam_ref = sol[:n], sol[n:]
            if np.all(lam_ref >= -tol) and float(np.max(C @ w_ref - d)) <= 10 * tol:
                w = w_ref
                lam[:q] = lam_ref
        except np.linalg.LinAlgError:
            pass
        lam_full[active] = np.clip(lam[:q], 0.0, None)
    return w, lam_full


# ---------------------------------------------------------------------------
# SQP on the condensed program


def _condense(Alist: np.ndarray, Blist: np.ndarray, gaps: np.ndarray, N: int):
    """Express state deviations as dx_{k+1} = Gamma_k du + gamma_k.

    Newton step on the shooting gaps: dx_{k+1} = A_k dx_k + B_k du_k - gap_k
    with dx_0 = 0.  Returns Gamma (N, NX, N*NU) and gamma (N, NX).
    """
    Gamma = np.zeros((N, NX, N * NU))
    gamma = np.zeros((N, NX))
    prev_G = np.zeros((NX, N * NU))
    prev_g = np.zeros(NX)
    for k in range(N):
        G = Alist[k] @ prev_G
        G[:, k * NU : (k + 1) * NU] += Blist[k]
        gm = Alist[k] @ prev_g - gaps[k]
        Gamma[k] = G
        gamma[k] = gm
        prev_G, prev_g = G, gm
    return Gamma, gamma


def _constraint_rows(instance: SPInstance, X: np.ndarray, Gamma, gamma, n_u, n_sl):
    """Linearized polytope/speed rows over [du; sigma] at the iterate."""
    rows, rhs = [], []
    n_c = instance.n_discs
    for k in range(instance.N):
        xbar = X[k + 1]
        th = xbar[2]
        cth, sth = np.cos(th), np.sin(th)
        for d_i, (A2, b, off) in enumerate(instance.constraints[k].blocks):
            if A2.shape[0] == 0:
                continue
            pos_d = xbar[:2] + off * np.array([cth, sth])
            resid = A2 @ pos_d - b  # want <= 0
            Gx = np.zeros((A2.shape[0], NX))
            Gx[:, 0] = A2[:, 0]
            Gx[:, 1] = A2[:, 1]
            if off != 0.0:
                Gx[:, 2] = off * (-A2[:, 0] * sth + A2[:, 1] * cth)
            block = np.zeros((A2.shape[0], n_u + n_sl))
            block[:, :n_u] = Gx @ Gamma[k]
            block[:, n_u + k * n_c + d_i] = -1.0
            rows.append(block)
            rhs.append(-resid - Gx @ gamma[k])
        v_lo, v_hi = instance.speed_bounds
        if np.isfinite(v_hi):
            row = np.zeros(n_u + n_sl)
            row[:n_u] = Gamma[k][3]
            rows.append(row[None, :])
            rhs.append(np.array([v_hi - xbar[3] - gamma[k][3]]))
        if np.isfinite(v_lo):
            row = np.zeros(n_u + n_sl)
            row[:n_u] = -Gamma[k][3]
            rows.append(row[None, :])
            rhs.append(np.array([xbar[3] - v_lo + gamma[k][3]]))
    if rows:
        return np.vstack(rows), np.concatenate(rhs)
    return np.zeros((0, n_u + n_sl)), np.zeros(0)


def _merit(instance: SPInstance, X, U, mu: float) -> float:
    """l1 exact-penalty merit: cost + mu * (shooting gaps + violations)."""
    F = instance.dynamics.step(X[:-1], U)
    gaps = float(np.abs(X[1:] - F).sum())
    bc = instance.batched_cost
    viol = 0.0
    v_lo, v_hi = instance.speed_bounds
    if bc is not None:
        cost = bc.value_batch(X[1:], U)
        viol += bc.violation_l1(X[1:])
        v = X[1:, 3]
        viol += float(np.clip(v - v_hi, 0.0, None).sum())
        viol += float(np.clip(v_lo - v, 0.0, None).sum())
    else:
        cost = 0.0
        for k in range(instance.N):
            cost += instance.stage_costs[k].value(X[k + 1], U[k])
            viol += _stage_violation_l1(instance.constraints[k], X[k + 1])
            v = X[k + 1, 3]
            viol += max(0.0, v - v_hi) + max(0.0, v_lo - v)
    return cost + mu * (gaps + viol)


def _stage_violation_l1(con: StageConstraints, x: np.ndarray) -> float:
    th = x[2]
    heading = np.array([np.cos(th), np.sin(th)])
    total = 0.0
    for A2, b, off in con.blocks:
        if A2.shape[0] == 0:
            continue
        resid = A2 @ (x[:2] + off * heading) - b
        total += float(np.clip(resid, 0.0, None).sum())
    return total


def _max_violation(instance: SPInstance, X: np.ndarray) -> float:
    worst = 0.0
    v_lo, v_hi = instance.speed_bounds
    for k in range(instance.N):
        x = X[k + 1]
        th = x[2]
        heading = np.array([np.cos(th), np.sin(th)])
        for A2, b, off in instance.constraints[k].blocks:
            if A2.shape[0]:
                worst = max(worst, float((A2 @ (x[:2] + off * heading) - b).max()))
        worst = max(worst, x[3] - v_hi, v_lo - x[3])
    return max(worst, 0.0)


def _rollout(instance: SPInstance, U: np.ndarray) -> np.ndarray:
    X = np.empty((instance.N + 1, NX))
    X[0] = instance.x0
    for k in range(instance.N):
        X[k + 1] = instance.dynamics.step(X[k], U[k])
    return X


def solve(
    instance: SPInstance,
    warm: Optional[Trajectory] = None,
    budget: float = np.inf,
) -> SolveReport:
    """Gauss-Newton SQP with l1-merit line search and warm starting.

    Returns the best iterate when the iteration cap or wall budget hits;
    the reported trajectory is always the nonlinear rollout of the final
    inputs, so its dynamics residual is exact.
    """
    t_start = time.perf_counter()
    N = instance.N
    n_u = N * NU
    n_c = instance.n_discs
    n_sl = N * n_c
    u_lo, u_hi = (np.asarray(v, dtype=float) for v in instance.input_box)

    if warm is not None and warm.horizon == N:
        X = warm.states_array().copy()
        U = warm.inputs_array().copy()
        X[0] = instance.x0
    else:
        U = np.zeros((N, NU))
        U[:] = np.clip(0.0, u_lo, u_hi)
        X = _rollout(instance, U)

    mu = instance.slack_weight
    kkt = np.inf
    status = "iteration-capped"
    iterations = 0
    slack_max = 0.0
    phi_cache = None

    for it in range(instance.max_iterations):
        iterations = it + 1
        F = instance.dynamics.step(X[:-1], U)
        gaps = X[1:] - F
        Alist, Blist = instance.dynamics.jac(X[:-1], U)
        Gamma, gamma = _condense(Alist, Blist, gaps, N)

        H = np.zeros((n_u + n_sl, n_u + n_sl))
        g = np.zeros(n_u + n_sl)
        if instance.batched_cost is not None:
            Qxx, qx, Quu, qu = instance.batched_cost.quadratics_batch(X[1:], U)
            QG = np.einsum("kab,kbt->kat", Qxx, Gamma)
            H[:n_u, :n_u] = np.einsum("kas,kat->st", Gamma, QG)
            g[:n_u] = np.einsum(
                "kas,ka->s", Gamma, np.einsum("kab,kb->ka", Qxx, gamma) + qx
            )
            for k in range(N):
                sl = slice(k * NU, (k + 1) * NU)
                H[sl, sl] += Quu[k]
                g[sl] += qu[k]
        else:
            for k in range(N):
                Qxx, qx, Quu, qu = instance.stage_costs[k].quadratics(X[k + 1], U[k])
                Gk = Gamma[k]
                H[:n_u, :n_u] += Gk.T @ (Qxx @ Gk)
                g[:n_u] += Gk.T @ (Qxx @ gamma[k] + qx)
                sl = slice(k * NU, (k + 1) * NU)
                H[sl, sl] += Quu
                g[sl] += qu
        H[n_u:, n_u:] += SLACK_REG * np.eye(n_sl)
        g[n_u:] += mu

        C, dvec = _constraint_rows(instance, X, Gamma, gamma, n_u, n_sl)
        lo = np.concatenate([np.tile(u_lo, N) - U.ravel(), np.zeros(n_sl)])
        hi = np.concatenate([np.tile(u_hi, N) - U.ravel(), np.full(n_sl, np.inf)])

        w = None
        for attempt in range(4):
            try:
                w, _lam = internal_qp_solve(H, g, C, dvec, (lo, hi), tol=instance.qp_tol)
                break
            except QPError:
                if attempt == 3:
                    status = "infeasible-slacked"
                    break
                H[np.diag_indices_from(H)] += 1e-8
        if w is None:
            break

        du = w[:n_u].reshape(N, NU)
        sigma = w[n_u:]
        slack_max = float(sigma.max()) if sigma.size else 0.0
        dX = np.einsum("kij,j->ki", Gamma, w[:n_u]) + gamma

        step_inf = float(max(np.abs(du).max() if du.size else 0.0, np.abs(dX).max()))
        if phi_cache is None:
            phi_cache = _merit(instance, X, U, mu)
        phi0 = phi_cache
        accepted = False
        for alpha in (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125):
            U_try = U + alpha * du
            X_try = X.copy()
            X_try[1:] += alpha * dX
            phi = _merit(instance, X_try, U_try, mu)
            if phi <= phi0 + 1e-10 * max(1.0, abs(phi0)):
                X, U = X_try, U_try
                phi_cache = phi
                accepted = True
                break
        gap_inf = float(np.abs(X[1:] - instance.dynamics.step(X[:-1], U)).max())
        kkt = max(step_inf * (alpha if accepted else 1.0), gap_inf)
        if accepted and step_inf <= instance.kkt_tol and gap_inf <= instance.kkt_tol:
            status = "converged"
            break
        if not accepted:
            # no merit progress: either done or stalled
            if step_inf <= instance.kkt_tol and gap_inf <= instance.kkt_tol:
                status = "converged"
            break
        if time.perf_counter() - t_start > budget:
            break

    X_final = _rollout(instance, U)
    viol = _max_violation(instance, X_final)
    slack_used = slack_max > 1e-8
    if status == "converged" and (viol > 10 * instance.kkt_tol or slack_used):
        status = "infeasible-slacked"
    return SolveReport(
        trajectory=Trajectory.from_arrays(X_final, U),
        iterations=iterations,
        kkt_residual=float(kkt),
        max_constraint_violation=float(viol),
        slack_used=slack_used,
        wall_time=time.perf_counter() - t_start,
        status=status,
    )
