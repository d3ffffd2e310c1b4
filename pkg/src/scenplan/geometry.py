"""Scenario half-space construction and minimal free-polytope extraction.

A sampled obstacle position delta induces the linear collision constraint

    A^T x <= b,   A = (delta - x_hat) / ||delta - x_hat||,   b = A^T delta - r,

which keeps the robot at least the combined radius r away from delta on the
x_hat side.  Intersecting the selected constraints with a bounding workspace
box yields a convex free polygon; the half-spaces touching its boundary form
the support set whose size certifies the per-stage risk bound.

The polygon is traced with a counter-clockwise boundary walk (interior kept
on the left); an O(n^3) pairwise-intersection oracle is provided for
differential testing of the support set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Hashable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "HalfSpace",
    "FreePolytope",
    "InfeasibleSeedError",
    "DegenerateScenarioError",
    "SupportCheck",
    "build_halfspace",
    "build_halfspaces",
    "workspace_box",
    "select_nearest",
    "select_from_d2",
    "discard_outliers",
    "discard_from_d2",
    "intersect_polytope",
    "intersect_arrays",
    "brute_force_support",
    "verify_support_bound",
]

GEOM_TOL = 1e-9       # geometric predicates (feasibility, touching)
PARALLEL_TOL = 1e-12  # cross products below this count as parallel


class InfeasibleSeedError(Exception):
    """Seed point violates one or more half-spaces; carries their positions."""

    def __init__(self, violated: list):
        self.violated = list(violated)
        super().__init__(f"seed infeasible for half-spaces {self.violated}")


class DegenerateScenarioError(ValueError):
    """Sample coincides with the linearization point; no direction defined."""


@dataclass(frozen=True)
class HalfSpace:
    """Linear constraint a^T x <= b with unit normal a.

    ``source_index`` identifies the generating scenario; ``None`` marks
    workspace boundaries, which never count against the support bound.
    """

    a: np.ndarray
    b: float
    source_index: Hashable = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        object.__setattr__(self, "a", a)
        norm = float(np.hypot(a[0], a[1]))
        if abs(norm - 1.0) > GEOM_TOL:
            raise ValueError(f"half-space normal must be unit length, got {norm}")

    def signed_margin(self, x) -> float:
        """b - a^T x; nonnegative on the feasible side."""
        return float(self.b - self.a @ np.asarray(x, dtype=float))


def build_halfspace(delta, x_hat, r: float, source_index: Hashable = None) -> HalfSpace:
    """Linearize the collision disc of radius r at sample ``delta`` as seen
    from ``x_hat``.  The boundary sits r inside the sample along the
    connecting direction, so b = a^T delta - r."""
    delta = np.asarray(delta, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    diff = delta - x_hat
    dist = float(np.hypot(diff[0], diff[1]))
    if dist <= GEOM_TOL:
        raise DegenerateScenarioError(
            f"sample {delta} within {GEOM_TOL} of linearization point {x_hat}"
        )
    a = diff / dist
    return HalfSpace(a=a, b=float(a @ delta) - r, source_index=source_index)


def build_halfspaces(deltas: np.ndarray, x_hat, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized half-space construction for an (m, 2) sample block.

    Returns (A, b) arrays; raises on any degenerate sample.
    """
    deltas = np.asarray(deltas, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    diff = deltas - x_hat
    dist = np.hypot(diff[:, 0], diff[:, 1])
    if np.any(dist <= GEOM_TOL):
        bad = int(np.argmin(dist))
        raise DegenerateScenarioError(
            f"sample {deltas[bad]} within {GEOM_TOL} of linearization point {x_hat}"
        )
    A = diff / dist[:, None]
    b = np.einsum("ij,ij->i", A, deltas) - r
    return A, b


def workspace_box(center, half_width: float) -> list[HalfSpace]:
    """Four axis-aligned half-spaces bounding a square of side 2*half_width."""
    cx, cy = float(center[0]), float(center[1])
    return [
        HalfSpace(np.array([1.0, 0.0]), cx + half_width, None),
        HalfSpace(np.array([-1.0, 0.0]), -(cx - half_width), None),
        HalfSpace(np.array([0.0, 1.0]), cy + half_width, None),
        HalfSpace(np.array([0.0, -1.0]), -(cy - half_width), None),
    ]


def select_nearest(scenarios: np.ndarray, x_hat, count: int) -> np.ndarray:
    """Indices of the ``count`` scenarios closest to ``x_hat``.

    Membership ties at the distance cut break toward the lower index; the
    result is returned in ascending index order, so the full count yields
    the identity permutation.  If fewer scenarios than requested are
    available, all are returned with a warning; the support-bound check
    downstream still applies.
    """
    scenarios = np.asarray(scenarios, dtype=float)
    n = scenarios.shape[0]
    if count >= n:
        if count > n:
            warnings.warn(
                f"requested {count} scenarios but only {n} available; taking all",
                stacklevel=2,
            )
        return np.arange(n)
    diff = scenarios - np.asarray(x_hat, dtype=float)
    d2 = np.einsum("ij,ij->i", diff, diff)
    return select_from_d2(d2, count)


def select_from_d2(d2: np.ndarray, count: int) -> np.ndarray:
    """Nearest-count selection on precomputed squared distances (hot path)."""
    # argpartition for speed, then resolve the boundary tie exactly by index
    part = np.argpartition(d2, count - 1)
    kth = d2[part[count - 1]]
    strictly = np.flatnonzero(d2 < kth)
    equal = np.flatnonzero(d2 == kth)
    need = count - strictly.size
    idx = np.concatenate([strictly, equal[:need]])
    idx.sort()
    return idx


def discard_outliers(selected: np.ndarray, scenarios: np.ndarray, mu, R: int) -> np.ndarray:
    """Drop the R selected scenarios furthest from the distribution mean.

    The surviving indices keep their input order.  Ties at the cut break
    toward discarding the higher index.
    """
    selected = np.asarray(selected)
    if R >= selected.size and R > 0:
        raise ValueError(f"cannot discard {R} of {selected.size} scenarios")
    pts = np.asarray(scenarios, dtype=float)[selected]
    diff = pts - np.asarray(mu, dtype=float)
    d2 = np.einsum("ij,ij->i", diff, diff)
    return discard_from_d2(selected, d2, R)


def discard_from_d2(selected: np.ndarray, d2_sel: np.ndarray, R: int) -> np.ndarray:
    """Outlier discard on precomputed squared distances of the selection."""
    if R <= 0:
        return selected.copy()
    # order by distance descending, index descending among exact ties
    order = np.lexsort((-selected, -d2_sel))
    drop = np.zeros(selected.size, dtype=bool)
    drop[order[:R]] = True
    return selected[~drop]


class SupportCheck(NamedTuple):
    ok: bool
    observed: int


class CompactSources:
    """Array-backed source map for the hot path.

    Rows with obstacle id < 0 are workspace rows (source ``None``); other
    rows materialize to (obstacle_id, sample_index) tuples on access.
    """

    __slots__ = ("obs", "idx")

    def __init__(self, obs: np.ndarray, idx: np.ndarray):
        self.obs = obs
        self.idx = idx

    def __len__(self):
        return self.obs.shape[0]

    def __getitem__(self, i):
        o = self.obs[i]
        return None if o < 0 else (int(o), int(self.idx[i]))


@dataclass
class FreePolytope:
    """Convex free region with counter-clockwise vertices and its support.

    ``support`` holds positions into the concatenated half-space input
    (scenario half-spaces first, then workspace), ordered along the
    boundary walk.  ``sources`` maps positions back to scenario ids
    (``None`` for workspace rows).
    """

    vertices: np.ndarray
    support: list[int]
    seed: np.ndarray
    A: np.ndarray = field(repr=False, default=None)
    b: np.ndarray = field(repr=False, default=None)
    sources: Sequence = field(repr=False, default=())

    @property
    def support_sources(self) -> list:
        return [self.sources[i] for i in self.support]

    def scenario_support(self) -> list[int]:
        """Support positions whose half-space stems from a scenario."""
        return [i for i in self.support if self.sources[i] is not None]

    def support_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(A, b) rows of the supporting half-spaces, walk-ordered."""
        idx = np.asarray(self.support, dtype=int)
        return self.A[idx], self.b[idx]


def _walk(A: np.ndarray, b: np.ndarray, seed: np.ndarray):
    """Counter-clockwise boundary walk over the intersection of half-spaces.

    Starts on the boundary first hit by a +x ray from the seed, then
    repeatedly advances to the earliest forward intersection that keeps the
    feasible side on the left; among coincident intersection points the
    sharpest counter-clockwise turn (the most restrictive boundary) wins.
    Returns (vertices, walked positions in order).
    """
    margins = b - A @ seed
    if np.any(margins < -GEOM_TOL):
        raise InfeasibleSeedError(np.flatnonzero(margins < -GEOM_TOL).tolist())

    m = A.shape[0]
    t = np.empty(m)
    dp = np.empty((2, 2))

    def forward_hits(point, d, floor):
        # t_i = (b_i - A_i.p) / (A_i.d) where the walk exits i moving along d
        dp[:, 0] = d
        dp[:, 1] = point
        M = A @ dp
        denom = M[:, 0]
        np.subtract(b, M[:, 1], out=t)
        valid = denom > PARALLEL_TOL
        np.divide(t, denom, out=t, where=valid)
        t[~valid] = np.inf
        t[t <= floor] = np.inf
        return t

    def pick_turn(cands, d):
        # sharpest CCW turn from direction d; lowest position breaks ties
        ax, ay = A[cands, 0], A[cands, 1]
        cross = d[0] * ax + d[1] * ay
        dot = -d[0] * ay + d[1] * ax
        angles = np.arctan2(cross, dot)
        amax = angles.max()
        return int(cands[angles >= amax - PARALLEL_TOL].min())

    ray = np.array([1.0, 0.0])
    t0 = forward_hits(seed, ray, -GEOM_TOL)
    if not np.any(np.isfinite(t0)):
        raise RuntimeError("boundary walk has no start; workspace box missing?")
    tmin = float(np.min(t0))
    h = pick_turn(np.flatnonzero(t0 <= tmin + GEOM_TOL), ray)
    p = seed + max(tmin, 0.0) * ray

    h0, vertices, walked = h, [], [h]
    for _ in range(m + 8):
        d = np.array([-A[h, 1], A[h, 0]])
        th = forward_hits(p, d, GEOM_TOL)  # turns happen strictly forward
        g = int(np.argmin(th))
        tmin = th[g]
        if not np.isfinite(tmin):
            raise RuntimeError("boundary walk escaped; polytope unbounded")
        v = p + tmin * d
        vertices.append(v)
        near = th <= tmin + GEOM_TOL
        if near.sum() > 1:  # coincident intersections: resolve by turn angle
            cands = np.flatnonzero(near)
            if h0 in cands:
                return np.array(vertices), walked
            g = pick_turn(cands, d)
        elif g == h0:
            return np.array(vertices), walked
        walked.append(g)
        h, p = g, v
    raise RuntimeError("boundary walk failed to close; degenerate input")


def intersect_arrays(
    A: np.ndarray,
    b: np.ndarray,
    sources: Sequence[Hashable],
    seed,
) -> FreePolytope:
    """Core polytope intersection on raw (A, b) rows.

    ``sources[i] is None`` marks workspace rows.  The rows must include a
    bounding box; the seed must satisfy every row within tolerance.
    """
    A = np.ascontiguousarray(A, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    seed = np.asarray(seed, dtype=float)
    vertices, walked = _walk(A, b, seed)
    # support: any boundary passing through a vertex within tolerance
    resid = np.abs(b[:, None] - A @ vertices.T)
    touches = resid <= GEOM_TOL
    first_touch = np.where(touches, np.arange(vertices.shape[0])[None, :], np.inf).min(axis=1)
    touching = np.flatnonzero(np.any(touches, axis=1))
    walk_rank = {h: i for i, h in enumerate(walked)}
    support = sorted(
        touching.tolist(),
        key=lambda i: (walk_rank.get(i, first_touch[i] + 0.5), i),
    )
    if not isinstance(sources, CompactSources):
        sources = tuple(sources)
    return FreePolytope(
        vertices=vertices,
        support=support,
        seed=seed,
        A=A,
        b=b,
        sources=sources,
    )


def intersect_polytope(
    halfspaces: Sequence[HalfSpace],
    workspace: Sequence[HalfSpace],
    seed,
) -> FreePolytope:
    """Minimal free polytope from scenario half-spaces plus a workspace box.

    Support positions index the concatenation [scenario..., workspace...].
    Raises :class:`InfeasibleSeedError` (with violated positions) when the
    seed lies outside any half-space; the planner owns the fallback.
    """
    hs = list(halfspaces) + list(workspace)
    if not hs:
        raise ValueError("need at least the workspace half-spaces")
    A = np.stack([h.a for h in hs])
    b = np.array([h.b for h in hs])
    return intersect_arrays(A, b, [h.source_index for h in hs], seed)


def brute_force_support(
    halfspaces: Sequence[HalfSpace],
    workspace: Sequence[HalfSpace],
    seed,
) -> set[int]:
    """Support set by exhaustive pairwise intersection (test oracle).

    Every pairwise boundary intersection that satisfies all half-spaces
    within tolerance is a candidate polytope point; a half-space is
    supporting iff its boundary passes through one of them.  O(n^3) but
    vectorized; positions match :func:`intersect_polytope`.
    """
    hs = list(halfspaces) + list(workspace)
    A = np.stack([h.a for h in hs])
    b = np.array([h.b for h in hs])
    seed = np.asarray(seed, dtype=float)
    margins = b - A @ seed
    if np.any(margins < -GEOM_TOL):
        raise InfeasibleSeedError(np.flatnonzero(margins < -GEOM_TOL).tolist())
    n = len(hs)
    ii, jj = np.triu_indices(n, k=1)
    det = A[ii, 0] * A[jj, 1] - A[ii, 1] * A[jj, 0]
    ok = np.abs(det) > PARALLEL_TOL
    ii, jj, det = ii[ok], jj[ok], det[ok]
    # Cramer solve for each boundary pair
    px = (b[ii] * A[jj, 1] - b[jj] * A[ii, 1]) / det
    py = (A[ii, 0] * b[jj] - A[jj, 0] * b[ii]) / det
    pts = np.stack([px, py], axis=1)
    feas = np.all(A @ pts.T - b[:, None] <= GEOM_TOL, axis=0)
    kept = pts[feas]
    if kept.shape[0] == 0:
        return set()
    touch = np.any(np.abs(b[:, None] - A @ kept.T) <= GEOM_TOL, axis=1)
    return set(np.flatnonzero(touch).tolist())


def verify_support_bound(polytope: FreePolytope, s_bar: int) -> SupportCheck:
    """Check that scenario-sourced support stays within the certified bound."""
    observed = len(polytope.scenario_support())
    return SupportCheck(ok=observed <= s_bar, observed=observed)
