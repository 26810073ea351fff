"""Digitally reconstructed radiographs by fixed-step ray marching.

Each detector pixel integrates attenuation along the ray from the source to
the pixel center.  Samples use the midpoint rule with trilinear interpolation
on a zero-padded grid, so attenuation falls linearly to zero over the half
voxel outside the outermost voxel centers.  A view-depth interval restricts
the integral to samples whose depth lies inside it (mask-then-integrate).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ConeBeamGeometry, ViewSlabs


@dataclass
class Volume3D:
    values: np.ndarray  # (nx, ny, nz), mm^-1
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]  # world position of voxel (0, 0, 0) center

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError(f"volume needs >= 2 voxels per axis, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0:
            raise ValueError("attenuation must be finite and non-negative")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Support of the interpolated field: outer voxel centers padded by one voxel."""
        sp = np.asarray(self.spacing)
        lo = np.asarray(self.origin) - sp
        hi = np.asarray(self.origin) + np.asarray(self.dims) * sp
        return lo, hi

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world points (..., 3); zero outside the grid."""
        pts = np.asarray(points, dtype=np.float64)
        shape = pts.shape[:-1]
        pts = pts.reshape(-1, 3)
        padded = np.pad(self.values, 1)
        c = (pts - np.asarray(self.origin)) / np.asarray(self.spacing) + 1.0
        i0 = np.floor(c).astype(np.int64)
        f = c - i0
        dims = np.asarray(padded.shape)
        ok = np.all((i0 >= 0) & (i0 + 1 < dims), axis=1)
        i0 = np.where(ok[:, None], i0, 0)
        f = np.where(ok[:, None], f, 0.0)
        flat = padded.reshape(-1)
        sy, sz = dims[1] * dims[2], dims[2]
        base = i0[:, 0] * sy + i0[:, 1] * sz + i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        out = np.zeros(len(pts))
        for dx in (0, 1):
            wx = fx if dx else 1 - fx
            for dy in (0, 1):
                wy = fy if dy else 1 - fy
                for dz in (0, 1):
                    wz = fz if dz else 1 - fz
                    out += flat[base + dx * sy + dy * sz + dz] * (wx * wy * wz)
        out[~ok] = 0.0
        return out.reshape(shape)


@dataclass
class DRRImage:
    pixels: np.ndarray  # (H, W)
    view: int = 0
    norm_range: tuple[float, float] | None = None  # (min, max) before normalisation

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("DRR pixels must be finite")


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tn = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)).max(axis=1)
    tf = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)).min(axis=1)
    return np.maximum(tn, 0.0), tf


def march(
    vol: Volume3D,
    geom: ConeBeamGeometry,
    edges=None,
    step: float | None = None,
    chunk: int = 1024,
) -> np.ndarray:
    """Line integrals binned by view-depth, shape (B, H, W) for ``B = len(edges) - 1``.

    ``edges`` are increasing view-depth bin edges (``+-inf`` allowed).  Samples
    outside every bin are dropped.  Without edges a single unbounded bin is used.
    """
    if step is None:
        step = min(vol.spacing) / 4
    if not step > 0:
        raise ValueError(f"step size must be positive, got {step}")
    edges = np.array([-np.inf, np.inf] if edges is None else edges, dtype=np.float64)
    nbins = len(edges) - 1
    h, w = geom.detector_px
    targets = geom.pixel_centers().reshape(-1, 3)
    src = geom.source
    dirs = targets - src
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo, hi = vol.bounds()
    t_in, t_out = _ray_box(src, dirs, lo, hi)
    cos_axis = dirs @ geom.axis
    out = np.zeros((len(targets), nbins))
    for start in range(0, len(targets), chunk):
        sl = slice(start, start + chunk)
        ti, to = t_in[sl], t_out[sl]
        hit = to > ti
        if not np.any(hit):
            continue
        n = int(math.ceil(float(np.max((to - ti)[hit])) / step))
        t = ti[:, None] + (np.arange(n) + 0.5) * step
        live = hit[:, None] & (t < to[:, None])
        pts = src + t[..., None] * dirs[sl, None, :]
        mu = np.where(live, vol.sample(pts), 0.0) * step
        depth = t * cos_axis[sl, None] - geom.sid
        bins = np.searchsorted(edges, depth, side="right") - 1
        inside = (bins >= 0) & (bins < nbins)
        rays = np.broadcast_to(np.arange(mu.shape[0])[:, None], mu.shape)
        key = rays[inside] * nbins + bins[inside]
        acc = np.bincount(key, weights=mu[inside], minlength=mu.shape[0] * nbins)
        out[sl] = acc.reshape(mu.shape[0], nbins)
    return out.T.reshape(nbins, h, w)


def render_drr(
    vol: Volume3D,
    geom: ConeBeamGeometry,
    slab: tuple[float, float] | None = None,
    step: float | None = None,
    view: int = 0,
) -> DRRImage:
    """Raw line-integral image; ``slab`` is an optional (lo, hi) view-depth interval."""
    edges = None if slab is None else [slab[0], slab[1]]
    return DRRImage(march(vol, geom, edges, step)[0], view=view)


def slab_edges(slabs: ViewSlabs) -> np.ndarray:
    """Bin edges for the slab set; the outer slabs are open-ended so the set tiles the ray."""
    edges = np.array(slabs.boundaries, dtype=np.float64)
    edges[0], edges[-1] = -np.inf, np.inf
    return edges


def render_augmented_set(
    vol: Volume3D, geom: ConeBeamGeometry, slabs: ViewSlabs, step: float | None = None
) -> list[DRRImage]:
    """One masked render per slab, ordered near (source side) to far."""
    stack = march(vol, geom, slab_edges(slabs), step)
    return [DRRImage(img, view=slabs.view) for img in stack]


def normalize_image(img: DRRImage) -> DRRImage:
    """Per-image min-max scaling into [0, 1]; a constant image maps to zeros."""
    px = np.asarray(img.pixels, dtype=np.float64)
    lo, hi = float(px.min()), float(px.max())
    if hi > lo:
        out = (px - lo) / (hi - lo)
    else:
        out = np.zeros_like(px)
    record = img.norm_range if img.norm_range is not None else (lo, hi)
    return DRRImage(out.astype(np.float32), view=img.view, norm_range=record)


def denormalize_image(img: DRRImage) -> DRRImage:
    if img.norm_range is None:
        return img
    lo, hi = img.norm_range
    return DRRImage(img.pixels.astype(np.float64) * (hi - lo) + lo, view=img.view)


# ---------------------------------------------------------------------------
# raw little-endian float32 + JSON sidecar


def _write_raw(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _write_json(path: Path, meta: dict) -> None:
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def save_volume(vol: Volume3D, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    raw, meta = stem.with_suffix(".raw"), stem.with_suffix(".json")
    _write_raw(raw, vol.values)
    _write_json(meta, {"dims": list(vol.dims), "spacing": list(vol.spacing), "origin": list(vol.origin)})
    return raw, meta


def load_volume(stem: str | Path) -> Volume3D:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    dims = tuple(meta["dims"])
    data = np.fromfile(stem.with_suffix(".raw"), dtype="<f4")
    if data.size != math.prod(dims):
        raise ValueError(f"{stem.with_suffix('.raw')}: expected {math.prod(dims)} floats, found {data.size}")
    return Volume3D(data.reshape(dims), meta["spacing"], meta["origin"])


def save_image(img: DRRImage, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    raw, meta = stem.with_suffix(".raw"), stem.with_suffix(".json")
    _write_raw(raw, img.pixels)
    info = {"dims": list(img.pixels.shape), "view": img.view}
    if img.norm_range is not None:
        info["norm_range"] = list(img.norm_range)
    _write_json(meta, info)
    return raw, meta


def load_image(stem: str | Path) -> DRRImage:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    dims = tuple(meta["dims"])
    data = np.fromfile(stem.with_suffix(".raw"), dtype="<f4")
    if data.size != math.prod(dims):
        raise ValueError(f"{stem.with_suffix('.raw')}: expected {math.prod(dims)} floats, found {data.size}")
    rng = meta.get("norm_range")
    return DRRImage(data.reshape(dims), view=meta.get("view", 0), norm_range=tuple(rng) if rng else None)


def write_pgm(img: DRRImage, path: str | Path) -> None:
    """8-bit binary PGM of the min-max normalised image, for eyeballing."""
    px = normalize_image(img).pixels
    h, w = px.shape
    body = np.clip(np.round(px * 255), 0, 255).astype(np.uint8)[::-1]
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + body.tobytes())
