"""Reconstruction evaluation: infer grid -> marching cubes -> surface samples -> CD / EMD."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .geometry import ReconSpace
from .mesh import OccupancyGrid, TriangleMesh, marching_cubes, sample_surface_points
from .metrics import chamfer_distance, earth_movers_distance
from .network import Setup, StudentModel, TeacherModel, infer_occupancy_grid
from .phantom import LABELS, PhantomSpec, occupancy_oracle, signed_distance
from .training import PhantomCase

FAILED = -1.0  # sentinel metric value for an empty predicted mesh


def sdf_grid(spec: PhantomSpec, R: int) -> np.ndarray:
    """Signed distances (R, R, R, 2) at voxel centers of the reconstruction space."""
    return signed_distance(spec, spec.space.grid_points(R))


def ground_truth_meshes(spec: PhantomSpec, R: int = 96) -> list[TriangleMesh]:
    """Per-channel surfaces from the analytic signed distance (smooth ramp through 0.5 at sdf = 0)."""
    sdf = sdf_grid(spec, R)
    h = float(np.min(spec.space.extent)) / R
    meshes = []
    for ch in range(len(LABELS)):
        field = np.clip(0.5 - sdf[..., ch] / (4 * h), 0.0, 1.0)
        meshes.append(marching_cubes(OccupancyGrid(field, spec.space)))
    return meshes


def occupancy_grid(spec: PhantomSpec, R: int) -> np.ndarray:
    return occupancy_oracle(spec, spec.space.grid_points(R))


def mean_shape_grid(specs: list[PhantomSpec], R: int) -> np.ndarray:
    """Average ground-truth occupancy over phantoms: the input-agnostic mean-shape predictor."""
    return np.mean([occupancy_grid(s, R) for s in specs], axis=0)


@dataclass
class CaseResult:
    seed: int
    channel: str
    run: int
    cd: float
    emd: float
    infer_seconds: float
    mesh_seconds: float
    failed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compare_meshes(pred: TriangleMesh, gt: TriangleMesh, n_points: int, seed: int) -> tuple[float, float]:
    if pred.is_empty:
        return FAILED, FAILED
    a = sample_surface_points(pred, n_points, seed)
    b = sample_surface_points(gt, n_points, seed + 7919)
    return chamfer_distance(a, b), earth_movers_distance(a, b)


def evaluate_grids(
    grids: dict[int, tuple[np.ndarray, float]],
    gt: dict[int, list[TriangleMesh]],
    space: ReconSpace,
    n_points: int = 512,
    runs: int = 3,
    seed: int = 0,
) -> dict:
    """Score precomputed (R, R, R, 2) grids (with their inference time) against GT meshes."""
    rows: list[CaseResult] = []
    for case_seed, (grid, infer_s) in grids.items():
        for ch, label in enumerate(LABELS):
            t0 = time.perf_counter()
            mesh = marching_cubes(OccupancyGrid(grid[..., ch], space))
            mesh_s = time.perf_counter() - t0
            for run in range(runs):
                cd, emd = compare_meshes(mesh, gt[case_seed][ch], n_points, seed=(seed * 1009 + run) * 7 + case_seed)
                rows.append(CaseResult(case_seed, label, run, cd, emd, infer_s, mesh_s, mesh.is_empty))
    return summarize(rows)


def summarize(rows: list[CaseResult]) -> dict:
    summary = {}
    for label in LABELS:
        sel = [r for r in rows if r.channel == label]
        ok = [r for r in sel if not r.failed]
        cd = np.array([r.cd for r in ok])
        emd = np.array([r.emd for r in ok])
        summary[label] = {
            "cd_mean": float(cd.mean()) if len(ok) else None,
            "cd_std": float(cd.std()) if len(ok) else None,
            "emd_mean": float(emd.mean()) if len(ok) else None,
            "emd_std": float(emd.std()) if len(ok) else None,
            "infer_seconds": float(np.mean([r.infer_seconds for r in sel])) if sel else None,
            "mesh_seconds": float(np.mean([r.mesh_seconds for r in sel])) if sel else None,
            "failures": int(sum(r.failed for r in sel)),
            "n": len(sel),
        }
    return {"per_case": [r.to_dict() for r in rows], "summary": summary}


def mean_cd(report: dict) -> float:
    """Channel-averaged mean CD over non-failed cases."""
    vals = [v["cd_mean"] for v in report["summary"].values() if v["cd_mean"] is not None]
    return float(np.mean(vals)) if vals else float("inf")


def evaluate_reconstruction(
    model: StudentModel | TeacherModel,
    setup: Setup,
    cases: list[PhantomCase],
    R: int,
    n_points: int = 512,
    runs: int = 3,
    gt_resolution: int = 96,
    chunk: int = 8192,
    seed: int = 0,
    gt_cache: dict | None = None,
) -> dict:
    """Per test phantom and channel: CD and EMD of the extracted surface vs. the analytic surface."""
    gt_cache = {} if gt_cache is None else gt_cache
    grids = {}
    for case in cases:
        if case.seed not in gt_cache:
            gt_cache[case.seed] = ground_truth_meshes(case.spec, gt_resolution)
        images = case.originals if isinstance(model, StudentModel) else case.augmented
        t0 = time.perf_counter()
        grid = infer_occupancy_grid(model, setup, images, R, chunk)
        grids[case.seed] = (grid, time.perf_counter() - t0)
    report = evaluate_grids(grids, gt_cache, setup.space, n_points, runs, seed)
    report["resolution"] = R
    report["n_points"] = n_points
    report["runs"] = runs
    return report


TIMING_KEYS = ("infer_seconds", "mesh_seconds")


def strip_timing(report: dict) -> dict:
    """Copy of ``report`` with wall-clock fields set to None (for byte-level comparisons)."""
    out = {**report, "per_case": [{**r, **dict.fromkeys(TIMING_KEYS)} for r in report["per_case"]]}
    out["summary"] = {ch: {**v, **dict.fromkeys(TIMING_KEYS)} for ch, v in report["summary"].items()}
    return out
