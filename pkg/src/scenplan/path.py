"""Arc-length parameterized reference path for contouring control."""

from __future__ import annotations

import numpy as np

__all__ = ["ReferencePath"]


class ReferencePath:
    """Piecewise-linear path over ordered waypoints.

    Parameterized by cumulative arc length with linear interpolation;
    tangents are the finite-difference segment directions, normals their
    counter-clockwise rotation.  Queries clamp to the path extent.
    """

    def __init__(self, waypoints):
        pts = np.asarray(waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError(f"need at least 2 waypoints of dim 2, got {pts.shape}")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ValueError("waypoints must have strictly increasing arc length")
        self.waypoints = pts
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self._tangents = seg / seg_len[:, None]

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def _segment_of(self, s: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self._cum, s, side="right") - 1
        return np.clip(idx, 0, self._tangents.shape[0] - 1)

    def point_at(self, s) -> np.ndarray:
        """Position on the path at arc length s (clamped); broadcasts."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = self._segment_of(s)
        base = self.waypoints[idx]
        return base + (s - self._cum[idx])[..., None] * self._tangents[idx]

    def tangent_at(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return self._tangents[self._segment_of(s)]

    def normal_at(self, s) -> np.ndarray:
        t = self.tangent_at(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)

    def frame_at(self, s):
        """(point, tangent, normal) at arc length s."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = self._segment_of(s)
        t = self._tangents[idx]
        pt = self.waypoints[idx] + (s - self._cum[idx])[..., None] * t
        n = np.stack([-t[..., 1], t[..., 0]], axis=-1)
        return pt, t, n
