"""Cone-beam projection geometry, view-depth slabs and depth-based fusion weights.

Conventions: world z is vertical.  A view rotates the source/detector pair
rigidly about the vertical axis through the isocenter; ``view_angle = 0`` puts
the source at ``-y`` looking along ``+y`` (AP), ``pi/2`` puts it at ``+x``
looking along ``-x`` (lateral).  The detector v axis is world vertical and
``u = axis x v``.  Detector pixel coordinates start at 0 on the first pixel
center; view-depth is measured along the principal axis from the isocenter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEPTH_EPS = 1e-6


class ProjectionError(ValueError):
    """Point lies at or behind the X-ray source."""


@dataclass(frozen=True)
class ConeBeamGeometry:
    sid: float = 1000.0
    sdd: float = 1500.0
    detector_px: tuple[int, int] = (64, 64)
    pixel_spacing: tuple[float, float] = (2.5, 2.5)
    view_angle: float = 0.0
    isocenter: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.sdd > self.sid > 0):
            raise ValueError(f"need sdd > sid > 0, got sid={self.sid}, sdd={self.sdd}")
        if min(self.detector_px) < 2:
            raise ValueError(f"detector must be at least 2x2 pixels, got {self.detector_px}")
        if min(self.pixel_spacing) <= 0:
            raise ValueError(f"pixel spacing must be positive, got {self.pixel_spacing}")

    @property
    def axis(self) -> np.ndarray:
        """Unit principal direction, source -> detector."""
        a = self.view_angle
        return np.array([-math.sin(a), math.cos(a), 0.0])

    @property
    def v_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    @property
    def u_axis(self) -> np.ndarray:
        return np.cross(self.axis, self.v_axis)

    @property
    def source(self) -> np.ndarray:
        return np.asarray(self.isocenter, dtype=float) - self.sid * self.axis

    @property
    def magnification(self) -> float:
        return self.sdd / self.sid

    @property
    def height(self) -> int:
        return int(self.detector_px[0])

    @property
    def width(self) -> int:
        return int(self.detector_px[1])

    def pixel_centers(self) -> np.ndarray:
        """World positions of all detector pixel centers, shape (H, W, 3)."""
        h, w = self.detector_px
        su, sv = self.pixel_spacing
        uu = (np.arange(w) - (w - 1) / 2) * su
        vv = (np.arange(h) - (h - 1) / 2) * sv
        center = self.source + self.sdd * self.axis
        return center + vv[:, None, None] * self.v_axis + uu[None, :, None] * self.u_axis

    def with_angle(self, view_angle: float) -> "ConeBeamGeometry":
        return ConeBeamGeometry(self.sid, self.sdd, self.detector_px, self.pixel_spacing, view_angle, self.isocenter)


def project_points(geom: ConeBeamGeometry, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perspective projection of world points (N, 3) -> (u, v, depth).

    ``u``/``v`` are continuous detector pixel coordinates (column, row);
    ``depth`` is the signed view-depth in mm (negative = towards the source).
    """
    pts = np.asarray(points, dtype=np.float64)
    rel = pts - geom.source
    along = rel @ geom.axis
    if np.any(along <= 0):
        raise ProjectionError("point at or behind the source; projection undefined")
    scale = geom.sdd / along
    h, w = geom.detector_px
    su, sv = geom.pixel_spacing
    u = (rel @ geom.u_axis) * scale / su + (w - 1) / 2
    v = (rel @ geom.v_axis) * scale / sv + (h - 1) / 2
    return u, v, along - geom.sid


def project_point(geom: ConeBeamGeometry, p) -> tuple[float, float, float]:
    u, v, d = project_points(geom, np.asarray(p, dtype=np.float64)[None])
    return float(u[0]), float(v[0]), float(d[0])


def view_depth(geom: ConeBeamGeometry, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return (pts - np.asarray(geom.isocenter, dtype=float)) @ geom.axis


@dataclass(frozen=True)
class ReconSpace:
    lo: tuple[float, float, float] = (-40.0, -40.0, -40.0)
    hi: tuple[float, float, float] = (40.0, 40.0, 40.0)

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate reconstruction space {self.lo} .. {self.hi}")

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=float)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=float)

    @property
    def extent(self) -> np.ndarray:
        return self.hi_arr - self.lo_arr

    def corners(self) -> np.ndarray:
        lo, hi = self.lo_arr, self.hi_arr
        return np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]] for i in (0, 1) for j in (0, 1) for k in (0, 1)])

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.all((pts >= self.lo_arr) & (pts <= self.hi_arr), axis=-1)

    def grid_points(self, resolution: int) -> np.ndarray:
        """Voxel-center coordinates of an R^3 grid, shape (R, R, R, 3), indexed [ix, iy, iz]."""
        axes = [self.lo[i] + (np.arange(resolution) + 0.5) * (self.hi[i] - self.lo[i]) / resolution for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class ViewSlabs:
    view: int
    boundaries: np.ndarray = field(repr=False)
    midpoints: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return len(self.midpoints)

    def interval(self, k: int) -> tuple[float, float]:
        return float(self.boundaries[k]), float(self.boundaries[k + 1])


def divide_subspaces(space: ReconSpace, geom: ConeBeamGeometry, K: int, view: int = 0) -> ViewSlabs:
    """Split the view-depth extent of ``space`` into ``K`` equal-thickness slabs."""
    if K < 1:
        raise ValueError(f"subspace count must be >= 1, got {K}")
    depths = view_depth(geom, space.corners())
    lo, hi = float(depths.min()), float(depths.max())
    bounds = lo + (hi - lo) * np.arange(K + 1) / K
    bounds[0], bounds[-1] = lo, hi
    mids = 0.5 * (bounds[:-1] + bounds[1:])
    return ViewSlabs(view=view, boundaries=bounds, midpoints=mids)


def depth_weights(d, slabs: ViewSlabs | np.ndarray, eps: float = DEPTH_EPS) -> np.ndarray:
    """Normalised inverse-distance weights of each slab midpoint, shape (..., K)."""
    mids = slabs.midpoints if isinstance(slabs, ViewSlabs) else np.asarray(slabs, dtype=float)
    d = np.asarray(d, dtype=np.float64)
    inv = 1.0 / np.maximum(np.abs(d[..., None] - mids), eps)
    return inv / inv.sum(axis=-1, keepdims=True)
