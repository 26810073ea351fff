"""Two-lobe bone-like phantoms with exact occupancy / signed-distance oracles."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drr import Volume3D
from .geometry import ReconSpace

BONE_MU = 1.0
TISSUE_MU = 0.2
MARGIN_MM = 2.0
BAND_MM = 2.0
LABELS = ("left", "right")


class DegeneratePhantomError(RuntimeError):
    pass


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # columns = local axes in world

    def local(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.center) @ self.rotation

    def quadric(self, p) -> np.ndarray:
        return np.sum((self.local(p) / self.radii) ** 2, axis=-1)

    def inside(self, p) -> np.ndarray:
        return self.quadric(p) <= 1.0

    def sdf(self, p) -> np.ndarray:
        y = self.local(p)
        dist = ellipsoid_distance(y, self.radii)
        return np.where(self.quadric(p) <= 1.0, -dist, dist)

    def half_extent(self) -> np.ndarray:
        return np.sqrt(((self.rotation * self.radii) ** 2).sum(axis=1))

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + (d * self.radii) @ self.rotation.T

    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.radii))

    def to_dict(self) -> dict:
        return {"type": "ellipsoid", "center": self.center.tolist(), "radii": self.radii.tolist(), "rotation": self.rotation.tolist()}


@dataclass
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def _seg_dist(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        ab = self.b - self.a
        t = np.clip(((p - self.a) @ ab) / float(ab @ ab), 0.0, 1.0)
        return np.linalg.norm(p - (self.a + t[..., None] * ab), axis=-1)

    def inside(self, p) -> np.ndarray:
        return self._seg_dist(p) <= self.radius

    def sdf(self, p) -> np.ndarray:
        return self._seg_dist(p) - self.radius

    def half_extent(self) -> np.ndarray:
        return np.abs(self.b - self.a) / 2 + self.radius

    @property
    def center(self) -> np.ndarray:
        return (self.a + self.b) / 2

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        t = rng.uniform(size=(n, 1))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        ab = self.b - self.a
        axis = ab / np.linalg.norm(ab)
        # drop the axial component in the cylinder section, keep it on the caps
        radial = d - (d @ axis)[:, None] * axis
        radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-12)
        on_cap = rng.uniform(size=n) < 0.25
        at_a = rng.uniform(size=n) < 0.5
        proj = d @ axis
        outward = proj * np.where(at_a, -1.0, 1.0) >= 0
        cap_dir = np.where(outward[:, None], d, d - 2 * proj[:, None] * axis)
        body = self.a + t * ab + self.radius * radial
        caps = np.where(at_a[:, None], self.a, self.b) + self.radius * cap_dir
        return np.where(on_cap[:, None], caps, body)

    def volume(self) -> float:
        length = float(np.linalg.norm(self.b - self.a))
        return np.pi * self.radius**2 * (length + 4.0 / 3.0 * self.radius)

    def to_dict(self) -> dict:
        return {"type": "capsule", "a": self.a.tolist(), "b": self.b.tolist(), "radius": float(self.radius)}


def ellipsoid_distance(y: np.ndarray, radii: np.ndarray, iters: int = 128) -> np.ndarray:
    """Euclidean distance from local-frame points ``y`` (..., 3) to an axis-aligned ellipsoid surface.

    Bisection on the Lagrange multiplier ``t`` of the closest-point condition
    ``x_i = e_i^2 y_i / (t + e_i^2)`` with ``sum (x_i / e_i)^2 = 1``.
    """
    e = np.asarray(radii, dtype=np.float64)
    y = np.abs(np.asarray(y, dtype=np.float64))
    shape = y.shape[:-1]
    y = y.reshape(-1, 3)
    # zero components make the interior root sit on the pole; a tiny offset keeps it bracketed
    y = np.maximum(y, 1e-12 * e.max())
    e2 = e * e
    # bisect on u = t + min(e^2) so the pole sits at u = 0 without cancellation
    shift = e2 - e2.min()

    y0, y1, y2 = y[:, 0], y[:, 1], y[:, 2]
    a0, a1, a2 = e[0] * y0, e[1] * y1, e[2] * y2
    s0, s1, s2 = shift

    def f(u):
        return (a0 / (u + s0)) ** 2 + (a1 / (u + s1)) ** 2 + (a2 / (u + s2)) ** 2 - 1.0

    outside = (y0 / e[0]) ** 2 + (y1 / e[1]) ** 2 + (y2 / e[2]) ** 2 > 1.0
    lo = np.where(outside, e2.min(), 0.0)
    hi = np.where(outside, e2.min() + np.sqrt(y0 * y0 + y1 * y1 + y2 * y2) * e.max(), e2.min())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = f(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    u = 0.5 * (lo + hi)
    x = e2 * y / (u[:, None] + shift)
    return np.linalg.norm(x - y, axis=1).reshape(shape)


def primitive_from_dict(d: dict):
    if d["type"] == "ellipsoid":
        return Ellipsoid(np.array(d["center"]), np.array(d["radii"]), np.array(d["rotation"]))
    return Capsule(np.array(d["a"]), np.array(d["b"]), float(d["radius"]))


@dataclass
class PhantomSpec:
    seed: int
    lobes: dict[str, list]  # label -> primitives
    envelope: Ellipsoid
    space: ReconSpace = field(default_factory=ReconSpace)

    def lobe_center(self, label: str) -> np.ndarray:
        return np.mean([p.center for p in self.lobes[label]], axis=0)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "lobes": {k: [p.to_dict() for p in v] for k, v in self.lobes.items()},
            "envelope": self.envelope.to_dict(),
            "space": {"lo": list(self.space.lo), "hi": list(self.space.hi)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(
            seed=int(d["seed"]),
            lobes={k: [primitive_from_dict(p) for p in v] for k, v in d["lobes"].items()},
            envelope=primitive_from_dict(d["envelope"]),
            space=ReconSpace(tuple(d["space"]["lo"]), tuple(d["space"]["hi"])),
        )


def _lobe(side: int, rng: np.random.Generator) -> list:
    """One lobe: an ellipsoid body, an outward wing, optional inward/lower capsule and knob."""
    c0 = np.array([side * rng.uniform(13, 22), rng.uniform(-8, 8), rng.uniform(-8, 6)])
    prims: list = [
        Ellipsoid(c0, np.array([rng.uniform(5, 9), rng.uniform(4, 8), rng.uniform(8, 13)]),
                  _rotation(rng.uniform(-0.3, 0.3), side * rng.uniform(0.0, 0.4), rng.uniform(-0.3, 0.3))),
        Capsule(c0 + np.array([0, 0, rng.uniform(3, 7)]),
                c0 + np.array([side * rng.uniform(6, 10), rng.uniform(-5, 5), rng.uniform(12, 16)]),
                rng.uniform(3.0, 5.0)),
    ]
    n_extra = int(rng.integers(0, 3))
    if n_extra >= 1:
        prims.append(Capsule(c0 - np.array([0, 0, rng.uniform(4, 8)]),
                             c0 + np.array([-side * rng.uniform(5, 9), rng.uniform(-6, 2), -rng.uniform(11, 15)]),
                             rng.uniform(2.5, 4.0)))
    if n_extra >= 2:
        off = np.array([side * rng.uniform(-2, 4), rng.uniform(4, 8), rng.uniform(-4, 4)])
        prims.append(Ellipsoid(c0 + off, np.array([rng.uniform(3, 5), rng.uniform(3, 5), rng.uniform(3, 6)]),
                               _rotation(0.0, 0.0, rng.uniform(-0.5, 0.5))))
    return prims


def _lobe_box(prims: list) -> tuple[np.ndarray, np.ndarray]:
    lo = np.min([p.center - p.half_extent() if isinstance(p, Ellipsoid) else np.minimum(p.a, p.b) - p.radius for p in prims], axis=0)
    hi = np.max([p.center + p.half_extent() if isinstance(p, Ellipsoid) else np.maximum(p.a, p.b) + p.radius for p in prims], axis=0)
    return lo, hi


def make_phantom_spec(seed: int, space: ReconSpace | None = None) -> PhantomSpec:
    space = space or ReconSpace()
    rng = np.random.default_rng([seed, 0x5EED])
    env = Ellipsoid(
        np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0]),
        np.array([rng.uniform(33, 36), rng.uniform(24, 28), rng.uniform(33, 36)]),
        _rotation(0.0, 0.0, rng.uniform(-0.1, 0.1)),
    )
    lobes = {}
    for label, side in (("left", -1), ("right", 1)):
        for _ in range(1000):
            prims = _lobe(side, rng)
            lo, hi = _lobe_box(prims)
            in_half = hi[0] <= -MARGIN_MM if side < 0 else lo[0] >= MARGIN_MM
            if in_half and np.all(lo >= space.lo_arr + MARGIN_MM) and np.all(hi <= space.hi_arr - MARGIN_MM):
                break
        else:  # pragma: no cover - ranges make this unreachable
            raise DegeneratePhantomError(f"seed {seed}: could not place {label} lobe")
        lobes[label] = prims
    return PhantomSpec(seed, lobes, env, space)


def lobe_inside(spec: PhantomSpec, label: str, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros(pts.shape[:-1], dtype=bool)
    for prim in spec.lobes[label]:
        out |= prim.inside(pts)
    return out


def occupancy_oracle(spec: PhantomSpec, points) -> np.ndarray:
    """Exact (left, right) membership of points (..., 3) -> (..., 2) in {0, 1}.

    Boundary points count as inside; points outside the reconstruction space are (0, 0).
    """
    pts = np.asarray(points, dtype=np.float64)
    inspace = spec.space.contains(pts)
    cols = [lobe_inside(spec, lab, pts) & inspace for lab in LABELS]
    return np.stack(cols, axis=-1).astype(np.float32)


def signed_distance(spec: PhantomSpec, points) -> np.ndarray:
    """Per-lobe signed distance (..., 2) in mm; negative inside."""
    pts = np.asarray(points, dtype=np.float64)
    cols = []
    for lab in LABELS:
        cols.append(np.min([p.sdf(pts) for p in spec.lobes[lab]], axis=0))
    return np.stack(cols, axis=-1)


def attenuation(spec: PhantomSpec, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    bone = lobe_inside(spec, "left", pts) | lobe_inside(spec, "right", pts)
    tissue = spec.envelope.inside(pts)
    return np.where(bone, BONE_MU, np.where(tissue, TISSUE_MU, 0.0))


def voxelize(spec: PhantomSpec, dims: int = 64) -> Volume3D:
    """Point-sample the attenuation at voxel centers of a grid spanning the reconstruction space."""
    space = spec.space
    spacing = space.extent / dims
    origin = space.lo_arr + spacing / 2
    vals = attenuation(spec, space.grid_points(dims))
    return Volume3D(vals.astype(np.float32), tuple(spacing), tuple(origin))


def generate_phantom(seed: int, dims: int = 64, space: ReconSpace | None = None) -> tuple[PhantomSpec, Volume3D]:
    spec = make_phantom_spec(seed, space)
    return spec, voxelize(spec, dims)


@dataclass
class OccupancyBatch:
    points: np.ndarray  # (N, 3) mm
    labels: np.ndarray  # (N, 2) {0, 1}
    predictions: np.ndarray | None = None  # (N, 2)

    def __len__(self) -> int:
        return len(self.points)


def sample_training_points(spec: PhantomSpec, n: int, seed: int, band: float = BAND_MM) -> OccupancyBatch:
    """Half uniform over the reconstruction space, half within ``band`` mm of a lobe surface."""
    if n % 2:
        raise ValueError(f"point count must be even, got {n}")
    rng = np.random.default_rng([seed, 0xB00E])
    space = spec.space
    half = n // 2
    uniform = rng.uniform(space.lo_arr, space.hi_arr, size=(half, 3))
    prims = [p for lab in LABELS for p in spec.lobes[lab]]
    areas = np.array([_approx_area(p) for p in prims])
    probs = areas / areas.sum()
    accepted: list[np.ndarray] = []
    got, trials = 0, 0
    batch = max(64, 2 * half)
    while got < half:
        if trials >= 1000 * n:
            raise DegeneratePhantomError(f"seed {spec.seed}: band sampler exhausted {trials} trials")
        which = rng.choice(len(prims), size=batch, p=probs)
        cand = np.empty((batch, 3))
        for i, prim in enumerate(prims):
            sel = which == i
            if np.any(sel):
                cand[sel] = prim.surface_points(int(sel.sum()), rng)
        cand += rng.normal(scale=band / 2, size=cand.shape)
        trials += batch
        ok = space.contains(cand)
        ok[ok] = np.min(np.abs(signed_distance(spec, cand[ok])), axis=-1) <= band
        keep = cand[ok][: half - got]
        accepted.append(keep)
        got += len(keep)
    pts = np.concatenate([uniform, *accepted], axis=0)
    return OccupancyBatch(pts, occupancy_oracle(spec, pts))


def _approx_area(prim) -> float:
    if isinstance(prim, Capsule):
        return 2 * np.pi * prim.radius * float(np.linalg.norm(prim.b - prim.a)) + 4 * np.pi * prim.radius**2
    a, b, c = prim.radii
    p = 1.6075
    return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def make_dataset(n_train: int, n_val: int, n_test: int, base_seed: int = 0) -> dict[str, list[int]]:
    """Disjoint contiguous seed ranges per split."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one phantom")
    seeds = {"train": [], "val": [], "test": []}
    s = base_seed
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        seeds[split] = list(range(s, s + count))
        s += count
    return seeds


def write_manifest(seeds: dict[str, list[int]], path: str | Path) -> None:
    rows = [{"seed": s, "split": split} for split in ("train", "val", "test") for s in seeds[split]]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")
