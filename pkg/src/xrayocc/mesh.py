"""Iso-surface extraction from occupancy grids, surface sampling and OBJ IO."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes as _lewiner

from .geometry import ReconSpace

ISO_LEVEL = 0.5


class EmptyMeshError(ValueError):
    pass


class ObjParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass
class OccupancyGrid:
    values: np.ndarray  # (nx, ny, nz) in [0, 1]
    space: ReconSpace

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError(f"grid needs >= 2 samples per axis, got {self.values.shape}")

    @property
    def spacing(self) -> np.ndarray:
        return self.space.extent / np.asarray(self.values.shape)

    @property
    def origin(self) -> np.ndarray:
        """World position of sample (0, 0, 0): the first voxel center."""
        return self.space.lo_arr + self.spacing / 2


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) world mm
    faces: np.ndarray  # (F, 3) int

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_areas(self) -> np.ndarray:
        t = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        return not self.is_empty and all(c == 2 for c in self.edge_counts().values())


def marching_cubes(grid: OccupancyGrid, iso: float = ISO_LEVEL) -> TriangleMesh:
    """Triangulate ``values == iso`` with topologically consistent (33-case) disambiguation.

    Vertices are placed by linear interpolation along cube edges and returned
    in world mm.  Faces are wound so normals point towards decreasing values
    (outward for occupancy).  A field that never crosses ``iso`` gives an empty mesh.
    """
    vals = np.asarray(grid.values, dtype=np.float64)
    if not (vals.min() < iso < vals.max()):
        return TriangleMesh.empty()
    verts, faces, _, _ = _lewiner(vals, level=iso, spacing=tuple(grid.spacing), method="lewiner", allow_degenerate=False)
    faces = faces[:, ::-1].astype(np.int64)
    mesh = TriangleMesh(verts.astype(np.float64) + grid.origin, faces)
    keep = mesh.triangle_areas() > 1e-12 * float(np.min(grid.spacing)) ** 2
    mesh.faces = np.ascontiguousarray(mesh.faces[keep])
    return mesh


def sample_surface_points(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniformly distributed over the mesh area."""
    if mesh.is_empty:
        raise EmptyMeshError("cannot sample points from an empty mesh")
    rng = np.random.default_rng([seed, 0x5A3F])
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.uniform(size=n), rng.uniform(size=n)
    s = np.sqrt(r1)
    b = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    corners = mesh.vertices[mesh.faces[tri]]
    return np.einsum("nk,nkd->nd", b, corners)


def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path: str | Path) -> TriangleMesh:
    verts, faces = [], []
    face_lines = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangular faces are supported")
                faces.append(idx)
                face_lines.append(lineno)
            else:
                raise ValueError(f"unsupported record {parts[0]!r}")
        except ValueError as exc:
            raise ObjParseError(path, lineno, str(exc)) from None
    nv = len(verts)
    for lineno, f in zip(face_lines, faces):
        if any(i < 1 or i > nv for i in f):
            raise ObjParseError(path, lineno, f"face index out of range 1..{nv}: {f}")
    if not faces:
        return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64) - 1)
