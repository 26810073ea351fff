"""Experiment drivers shared by the acceptance tests and ``scripts/``."""
from __future__ import annotations

import logging
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, make_setup
from .evaluation import evaluate_grids, evaluate_reconstruction, ground_truth_meshes, mean_cd, mean_shape_grid
from .network import Setup, StudentModel, infer_occupancy_grid
from .training import FitSettings, PhantomCase, render_case, train_student, train_teacher

log = logging.getLogger(__name__)


@dataclass
class Benchmark:
    """Rendered splits plus cached ground-truth meshes for one config."""

    cfg: RunConfig
    setup: Setup
    train: list[PhantomCase]
    val: list[PhantomCase]
    test: list[PhantomCase]
    gt_cache: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: RunConfig) -> "Benchmark":
        from .phantom import make_dataset

        setup = make_setup(cfg)
        seeds = make_dataset(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.data.base_seed)
        render = lambda s: render_case(s, setup, cfg.data.volume_dims, cfg.data.step)  # noqa: E731
        return cls(cfg, setup, *([render(s) for s in seeds[k]] for k in ("train", "val", "test")))

    def fit_settings(self, seed: int, alpha: float) -> FitSettings:
        c = self.cfg
        return FitSettings(c.train.epochs, c.train.lr, c.data.n_points, seed, alpha, warmup_epochs=c.train.warmup_epochs)

    def evaluate(self, model, R: int | None = None, seed: int = 0) -> dict:
        e = self.cfg.eval
        return evaluate_reconstruction(
            model, self.setup, self.test, R or e.resolution, e.n_points, e.runs, e.gt_resolution, e.chunk, seed, self.gt_cache
        )

    def mean_shape_report(self, R: int | None = None) -> dict:
        """Score the train-set average occupancy, the same grid for every test phantom."""
        e = self.cfg.eval
        R = R or e.resolution
        grid = mean_shape_grid([c.spec for c in self.train], R)
        for c in self.test:
            if c.seed not in self.gt_cache:
                self.gt_cache[c.seed] = ground_truth_meshes(c.spec, e.gt_resolution)
        return evaluate_grids({c.seed: (grid, 0.0) for c in self.test}, self.gt_cache, self.setup.space, e.n_points, e.runs)


def distillation_run(bench: Benchmark, seed: int, alpha: float = 0.2) -> dict:
    """Teacher, distilled student and no-division baseline for one training seed."""
    C, layers, hidden = bench.cfg.model.channels, tuple(bench.cfg.model.distill_layers), tuple(bench.cfg.model.mlp_hidden)
    t0 = time.perf_counter()
    teacher, _ = train_teacher(bench.setup, bench.train, bench.val, bench.fit_settings(seed, alpha), C, hidden)
    student, _ = train_student(bench.setup, bench.train, bench.val, bench.fit_settings(seed, alpha), teacher, C, layers, hidden)
    baseline, _ = train_student(bench.setup, bench.train, bench.val, bench.fit_settings(seed, 0.0), None, C, layers, hidden)
    out = {
        "seed": seed,
        "teacher": mean_cd(bench.evaluate(teacher)),
        "student": mean_cd(bench.evaluate(student)),
        "baseline": mean_cd(bench.evaluate(baseline)),
        "seconds": time.perf_counter() - t0,
    }
    log.info("seed %d: teacher %.3f student %.3f baseline %.3f (%.0f s)", seed, out["teacher"], out["student"], out["baseline"], out["seconds"])
    return out | {"models": {"teacher": teacher, "student": student, "baseline": baseline}}


def inference_peak_bytes(model: StudentModel, setup: Setup, images: np.ndarray, R: int, chunk: int = 8192) -> int:
    """Peak traced allocation of one dense inference call."""
    tracemalloc.start()
    try:
        infer_occupancy_grid(model, setup, images, R, chunk)
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
