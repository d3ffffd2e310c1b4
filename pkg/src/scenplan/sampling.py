"""Offline sample batches, online transforms, and relevance pruning.

Standard bivariate batches are drawn once, offline, with a counter-based
generator (Philox) so every batch is reproducible from its 64-bit seed.
Radial truncation is exact: the Box-Muller radius comes from u1 alone, so
restricting u1 to [exp(-rho^2/2), 1] caps the radius at rho without
rejection.  Width truncation (a slab along one axis) is done by rejection
before any covariance scaling.

Online, a batch is mapped onto an obstacle's predicted distribution via
delta = L z + mu with L L^T = Sigma, and only the indices that survived
offline pruning are touched in the planner hot path.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from scenplan.geometry import discard_outliers, select_nearest
from scenplan.risk import RiskProfile

__all__ = [
    "TruncationSpec",
    "ScenarioBatch",
    "ObstaclePrediction",
    "MixtureModel",
    "box_muller",
    "draw_standard",
    "sample_standard_batch",
    "transform_batch",
    "sample_mixture",
    "offline_prune",
    "default_prune_sweep",
    "save_batch",
    "load_batch",
]

ARCHIVE_MAGIC = b"SMPB"
ARCHIVE_VERSION = 1
_TRUNCATION_TAGS = {"none": 0, "radial": 1, "width": 2}
_TAG_KINDS = {v: k for k, v in _TRUNCATION_TAGS.items()}

MIN_ACCEPTANCE_RATE = 1e-3


@dataclass(frozen=True)
class TruncationSpec:
    """Support restriction of the standard distribution.

    kind "none": full bivariate normal.
    kind "radial": radius capped at ``rho`` sigma (exact via u1 support).
    kind "width": component along ``axis`` capped at ``rho`` sigma
    (rejection sampling in standard coordinates).
    """

    kind: str = "none"
    rho: float = 0.0
    axis: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in _TRUNCATION_TAGS:
            raise ValueError(f"unknown truncation kind {self.kind!r}")
        if self.kind != "none":
            if self.rho <= 0.0:
                raise ValueError(f"truncation rho must be positive, got {self.rho}")
        if self.kind == "width":
            if self.axis is None:
                raise ValueError("width truncation needs an axis")
            axis = np.asarray(self.axis, dtype=float)
            if abs(np.hypot(axis[0], axis[1]) - 1.0) > 1e-9:
                raise ValueError(f"truncation axis must be unit length, got {axis}")
            object.__setattr__(self, "axis", axis)

    @staticmethod
    def none() -> "TruncationSpec":
        return TruncationSpec("none")

    @staticmethod
    def radial(rho: float) -> "TruncationSpec":
        return TruncationSpec("radial", rho=rho)

    @staticmethod
    def width(axis, rho: float) -> "TruncationSpec":
        return TruncationSpec("width", rho=rho, axis=np.asarray(axis, dtype=float))


@dataclass(frozen=True)
class ScenarioBatch:
    """Pre-sampled standard-scale scenarios with their relevant subset.

    ``relevant`` indexes ``samples``; after offline pruning only these rows
    are transformed online.  Before pruning it covers every sample.
    """

    samples: np.ndarray
    relevant: np.ndarray
    truncation: TruncationSpec
    seed: Optional[int]

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        relevant = np.asarray(self.relevant, dtype=np.int64)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "relevant", relevant)
        if samples.ndim != 2 or samples.shape[1] != 2:
            raise ValueError(f"samples must be (S, 2), got {samples.shape}")
        if relevant.size and (relevant.min() < 0 or relevant.max() >= samples.shape[0]):
            raise ValueError("relevant indices out of range")
        if self.truncation.kind == "radial":
            radii = np.hypot(samples[:, 0], samples[:, 1])
            if radii.size and radii.max() > self.truncation.rho + 1e-12:
                raise ValueError("radially truncated batch exceeds rho")

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])

    def relevant_samples(self) -> np.ndarray:
        return self.samples[self.relevant]


@dataclass(frozen=True)
class ObstaclePrediction:
    """Per-stage Gaussian prediction of one obstacle over the horizon.

    means: (N, 2) positions [m]; covariances: (N, 2, 2) SPD [m^2];
    truncation applies in standard coordinates; radius is the obstacle
    disc radius [m].
    """

    means: np.ndarray
    covariances: np.ndarray
    truncation: TruncationSpec
    radius: float
    obstacle_id: int = 0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        if means.ndim != 2 or means.shape[1] != 2:
            raise ValueError(f"means must be (N, 2), got {means.shape}")
        if covs.shape != (means.shape[0], 2, 2):
            raise ValueError(f"covariances must be (N, 2, 2), got {covs.shape}")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        # SPD check via eigenvalues of the symmetric part
        eig = np.linalg.eigvalsh(covs)
        if eig.min() <= 0.0:
            raise ValueError("covariances must be positive definite")
        if self.radius < 0.0:
            raise ValueError("radius must be nonnegative")

    @property
    def horizon(self) -> int:
        return int(self.means.shape[0])


@dataclass(frozen=True)
class MixtureModel:
    """Mixture of Gaussians: (weight, mean, covariance) components."""

    components: Sequence[tuple]

    def __post_init__(self):
        comps = []
        total = 0.0
        for w, mu, cov in self.components:
            w = float(w)
            if w < 0.0:
                raise ValueError("mixture weights must be nonnegative")
            mu = np.asarray(mu, dtype=float)
            cov = np.asarray(cov, dtype=float)
            if cov.shape != (2, 2) or np.linalg.eigvalsh(cov).min() <= 0.0:
                raise ValueError("mixture covariances must be 2x2 SPD")
            total += w
            comps.append((w, mu, cov))
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1, got {total}")
        object.__setattr__(self, "components", tuple(comps))


def box_muller(u1: float, u2: float) -> tuple[float, float]:
    """Map two uniforms to one standard bivariate normal sample.

    z0 = sqrt(-2 ln u1) cos(2 pi u2), z1 = sqrt(-2 ln u1) sin(2 pi u2).
    u1 = 0 would put the sample at infinite radius and is rejected.
    """
    if not (0.0 < u1 <= 1.0):
        raise ValueError(f"u1 must lie in (0, 1], got {u1}")
    if not (0.0 <= u2 < 1.0):
        raise ValueError(f"u2 must lie in [0, 1), got {u2}")
    radius = math.sqrt(-2.0 * math.log(u1))
    angle = 2.0 * math.pi * u2
    return radius * math.cos(angle), radius * math.sin(angle)


def _rng(seed: int) -> np.random.Generator:
    # Philox: counter-based, identical streams on every platform
    return np.random.Generator(np.random.Philox(seed))


def _box_muller_block(rng: np.random.Generator, n: int, u1_floor: float) -> np.ndarray:
    u = rng.random((n, 2))
    u1 = u1_floor + (1.0 - u1_floor) * (1.0 - u[:, 0])  # support (u1_floor, 1]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u[:, 1]
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def draw_standard(rng: np.random.Generator, n: int, truncation: TruncationSpec) -> np.ndarray:
    """Draw n standard samples under the truncation from a live generator.

    Same construction as :func:`sample_standard_batch`, for consumers that
    manage their own generator state (simulation noise, risk oracles).
    """
    if truncation.kind == "radial":
        return _box_muller_block(rng, n, math.exp(-truncation.rho**2 / 2.0))
    if truncation.kind == "width":
        rate = math.erf(truncation.rho / math.sqrt(2.0))
        if rate < MIN_ACCEPTANCE_RATE:
            raise ValueError(
                f"width truncation at rho={truncation.rho} accepts only "
                f"{rate:.2e} of samples; refusing"
            )
        out = _box_muller_block(rng, n, 0.0)
        axis = truncation.axis
        bad = np.flatnonzero(np.abs(out @ axis) > truncation.rho)
        while bad.size:
            out[bad] = _box_muller_block(rng, bad.size, 0.0)
            bad = bad[np.abs(out[bad] @ axis) > truncation.rho]
        return out
    return _box_muller_block(rng, n, 0.0)


def sample_standard_batch(
    S: int, truncation: TruncationSpec = TruncationSpec.none(), seed: int = 0
) -> ScenarioBatch:
    """Draw S iid standard bivariate samples under the given truncation.

    Radial truncation is exact (restricted u1 support).  Width truncation
    rejects and redraws until every component along the axis is within
    rho; specs with analytic acceptance rate below 1e-3 are refused.
    Deterministic given (S, truncation, seed).
    """
    if S < 1:
        raise ValueError(f"need S >= 1, got {S}")
    samples = draw_standard(_rng(seed), S, truncation)
    return ScenarioBatch(
        samples=samples,
        relevant=np.arange(S, dtype=np.int64),
        truncation=truncation,
        seed=seed,
    )


def _cholesky_factor(Sigma) -> np.ndarray:
    Sigma = np.asarray(Sigma, dtype=float)
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"covariance is not SPD: {Sigma}") from exc


def transform_batch(
    batch: ScenarioBatch, mu, Sigma, only_relevant: bool = False
) -> np.ndarray:
    """Map standard samples onto N(mu, Sigma): delta_i = L z_i + mu.

    L is the lower Cholesky factor of Sigma.  With ``only_relevant`` the
    planner hot path touches just the pruned subset.
    """
    L = _cholesky_factor(Sigma)
    z = batch.relevant_samples() if only_relevant else batch.samples
    return z @ L.T + np.asarray(mu, dtype=float)


def sample_mixture(model: MixtureModel, S: int, seed: int = 0) -> np.ndarray:
    """Draw S samples from a mixture of Gaussians; deterministic given seed."""
    if S < 1:
        raise ValueError(f"need S >= 1, got {S}")
    rng = _rng(seed)
    z = _box_muller_block(rng, S, 0.0)  # drawn first: one component == standard batch
    weights = np.array([w for w, _, _ in model.components])
    choice = rng.choice(len(model.components), size=S, p=weights)
    out = np.empty((S, 2))
    for ci, (_, mu, cov) in enumerate(model.components):
        mask = choice == ci
        if np.any(mask):
            out[mask] = z[mask] @ _cholesky_factor(cov).T + mu
    return out


def default_prune_sweep(
    directions: int = 64,
    radii: int = 8,
    radius_min: float = 3.0,
    radius_max: float = 5.0,
) -> np.ndarray:
    """Grid of linearization points (standard coordinates) for offline pruning.

    The radii cover the band where constraints can bind for a 3-sigma risk
    level; sweeping closer to the origin would keep most of the batch and
    defeat the pruning.
    """
    angles = np.linspace(0.0, 2.0 * np.pi, directions, endpoint=False)
    rads = np.linspace(radius_min, radius_max, radii)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return (rads[:, None, None] * dirs[None, :, :]).reshape(-1, 2)


def offline_prune(
    batch: ScenarioBatch, sweep: np.ndarray, profile: RiskProfile
) -> ScenarioBatch:
    """Mark the union of all kept-nearest selections over a sweep as relevant.

    Runs the online selection (nearest l+R, discard the R furthest from the
    mean) at every sweep point against the standard-scale batch; indices
    that are never kept are dropped from hot-path storage.  The full sample
    array is retained on the batch for audit and archives.
    """
    sweep = np.asarray(sweep, dtype=float)
    if sweep.ndim != 2 or sweep.shape[0] == 0:
        raise ValueError("sweep must be a nonempty (M, 2) array")
    samples = batch.samples
    count = profile.selection_size
    keep = np.zeros(samples.shape[0], dtype=bool)
    origin = np.zeros(2)
    for pt in sweep:
        d = samples - pt
        if np.min(np.einsum("ij,ij->i", d, d)) < 1e-24:
            warnings.warn(f"sweep point {pt} coincides with a sample; skipped")
            continue
        sel = select_nearest(samples, pt, count)
        kept = discard_outliers(sel, samples, origin, profile.discard)
        keep[kept] = True
    return replace(batch, relevant=np.flatnonzero(keep).astype(np.int64))


def save_batch(path, batch: ScenarioBatch) -> None:
    """Write the batch archive.

    Layout (little-endian): magic "SMPB", version u32, S u64, truncation
    tag u32, three f64 params (rho, axis_x, axis_y; zero when unused),
    S pairs of f64 samples, then u64 relevant count + u64 indices.
    """
    t = batch.truncation
    axis = t.axis if t.kind == "width" else (0.0, 0.0)
    header = struct.pack(
        "<4sIQIddd",
        ARCHIVE_MAGIC,
        ARCHIVE_VERSION,
        batch.size,
        _TRUNCATION_TAGS[t.kind],
        float(t.rho),
        float(axis[0]),
        float(axis[1]),
    )
    rel = batch.relevant.astype("<u8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(batch.samples, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", rel.size))
        fh.write(rel.tobytes())


def load_batch(path) -> ScenarioBatch:
    """Read a batch archive written by :func:`save_batch`.

    The archive does not carry the generator seed; the loaded batch has
    ``seed=None`` and compares equal on samples, truncation, and relevant
    indices.
    """
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sIQIddd"))
        magic, version, S, tag, rho, ax, ay = struct.unpack("<4sIQIddd", head)
        if magic != ARCHIVE_MAGIC:
            raise ValueError(f"not a batch archive: bad magic {magic!r}")
        if version != ARCHIVE_VERSION:
            raise ValueError(f"unsupported archive version {version}")
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise ValueError(f"unknown truncation tag {tag}")
        if kind == "none":
            trunc = TruncationSpec.none()
        elif kind == "radial":
            trunc = TruncationSpec.radial(rho)
        else:
            trunc = TruncationSpec.width((ax, ay), rho)
        samples = np.frombuffer(fh.read(16 * S), dtype="<f8").reshape(S, 2).copy()
        (n_rel,) = struct.unpack("<Q", fh.read(8))
        relevant = np.frombuffer(fh.read(8 * n_rel), dtype="<u8").astype(np.int64)
    return ScenarioBatch(samples=samples, relevant=relevant, truncation=trunc, seed=None)
