"""Finite-difference checks for every op kind and for the full teacher / student losses."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .geometry import ConeBeamGeometry, ReconSpace, divide_subspaces
from .gradcheck import GradCheckReport, gradient_check
from .network import Setup, StudentModel, TeacherModel, recon_loss, total_loss, view_queries

OP_TOL = 1e-5
MODEL_TOL = 1e-4
E2E32_TOL = 1e-3


def _projected(out: Tensor, seed: int) -> Tensor:
    """Random linear functional of ``out``: its gradient is a vector-Jacobian product."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ad.reduce_mean(ad.mul(out, Tensor(r.astype(out.dtype))))


def op_cases(seed: int = 0) -> dict[str, tuple[ParamStore, Callable[[ParamStore], Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = {}

    def store(**arrays) -> ParamStore:
        ps = ParamStore()
        for k, v in arrays.items():
            ps.add(k, v, dtype=np.float64)
        return ps

    def away_from_zero(shape):
        x = rng.uniform(0.2, 1.5, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    shape = tuple(int(s) for s in rng.integers(2, 5, size=2))
    cases["add"] = (store(a=rng.normal(size=shape), b=rng.normal(size=shape[1:])), lambda p: _projected(ad.add(p["a"], p["b"]), 1))
    cases["sub"] = (store(a=rng.normal(size=shape), b=rng.normal(size=(1, shape[1]))), lambda p: _projected(ad.sub(p["a"], p["b"]), 2))
    cases["mul"] = (store(a=rng.normal(size=shape), b=rng.normal(size=shape)), lambda p: _projected(ad.mul(p["a"], p["b"]), 3))
    cases["square"] = (store(a=rng.normal(size=shape)), lambda p: _projected(ad.square(p["a"]), 4))
    cases["relu"] = (store(a=away_from_zero(shape)), lambda p: _projected(ad.relu(p["a"]), 5))
    cases["sigmoid"] = (store(a=rng.normal(size=shape) * 2), lambda p: _projected(ad.sigmoid(p["a"]), 6))
    cases["reduce_mean"] = (store(a=rng.normal(size=shape)), lambda p: ad.reduce_mean(p["a"]))
    cases["reshape"] = (store(a=rng.normal(size=(2, 6))), lambda p: _projected(ad.reshape(p["a"], (3, 4)), 7))
    cases["concat"] = (
        store(a=rng.normal(size=(3, 2)), b=rng.normal(size=(3, 4))),
        lambda p: _projected(ad.concat([p["a"], p["b"]], axis=1), 8),
    )
    cases["slice"] = (store(a=rng.normal(size=(5, 3))), lambda p: _projected(ad.slice_axis(p["a"], 0, 1, 4), 9))
    w_ws = [rng.uniform(size=(shape[0], 1)), 0.3, rng.uniform(size=shape)]
    cases["weighted_sum"] = (
        store(a=rng.normal(size=shape), b=rng.normal(size=shape), c=rng.normal(size=shape)),
        lambda p: _projected(ad.weighted_sum([p["a"], p["b"], p["c"]], w_ws), 10),
    )
    n_in, n_out = (int(s) for s in rng.integers(2, 6, size=2))
    cases["linear"] = (
        store(x=rng.normal(size=(4, n_in)), w=rng.normal(size=(n_in, n_out)), b=rng.normal(size=n_out)),
        lambda p: _projected(ad.linear(p["x"], p["w"], p["b"]), 11),
    )
    cases["conv2d"] = (
        store(x=rng.normal(size=(2, 3, 7, 6)), w=rng.normal(size=(4, 3, 3, 3)), b=rng.normal(size=4)),
        lambda p: _projected(ad.conv2d(p["x"], p["w"], p["b"], stride=1, padding=1), 12),
    )
    cases["conv2d_stride2"] = (
        store(x=rng.normal(size=(1, 2, 8, 8)), w=rng.normal(size=(3, 2, 3, 3)), b=rng.normal(size=3)),
        lambda p: _projected(ad.conv2d(p["x"], p["w"], p["b"], stride=2, padding=1), 13),
    )
    coords = np.stack([rng.uniform(0, 5, size=(2, 7)), rng.uniform(0, 4, size=(2, 7))], axis=-1)
    cases["bilinear_sample"] = (
        store(planes=rng.normal(size=(2, 3, 5, 6))),
        lambda p: _projected(ad.bilinear_sample(p["planes"], coords), 14),
    )
    return cases


def micro_setup(K: int = 2) -> Setup:
    space = ReconSpace()
    geoms = [ConeBeamGeometry(detector_px=(8, 8), pixel_spacing=(20.0, 20.0), view_angle=a) for a in (0.0, math.pi / 2)]
    return Setup(geoms, space, [divide_subspaces(space, g, K, i) for i, g in enumerate(geoms)])


def _micro_inputs(setup: Setup, seed: int, n_points: int = 4):
    rng = np.random.default_rng(seed)
    h, w = setup.geoms[0].detector_px
    aug = rng.uniform(size=(setup.M, setup.K, h, w)).astype(np.float32)
    orig = rng.uniform(size=(setup.M, h, w)).astype(np.float32)
    pts = rng.uniform(-30, 30, size=(n_points, 3))
    labels = rng.integers(0, 2, size=(n_points, 2)).astype(np.float32)
    queries = view_queries(setup, pts, (h // 4, w // 4))
    return aug, orig, queries, labels


def _randomize_biases(params: ParamStore, seed: int) -> None:
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if name.endswith(".b"):
            t.data = rng.normal(0, 0.1, size=t.shape).astype(t.dtype)


def teacher_case(seed: int = 0, channels: int = 4):
    setup = micro_setup()
    model = TeacherModel.create(channels, setup.K, setup.M, seed, hidden=(8, 8))
    _randomize_biases(model.params, seed)
    aug, _, queries, labels = _micro_inputs(setup, seed)

    def loss_fn(p: ParamStore) -> Tensor:
        m = TeacherModel(p, model.channels, model.K, model.hidden)
        pred, _ = m.forward(aug, queries)
        return recon_loss(pred, labels)

    return model.params, loss_fn


def student_case(seed: int = 0, channels: int = 4, alpha: float = 0.2, layers=(2, 3)):
    setup = micro_setup()
    teacher = TeacherModel.create(channels, setup.K, setup.M, seed + 1, hidden=(8, 8))
    model = StudentModel.create(channels, setup.K, setup.M, seed, layers=layers, hidden=(8, 8))
    _randomize_biases(model.params, seed)
    aug, orig, queries, labels = _micro_inputs(setup, seed)
    stacks = teacher.feature_stacks(aug, layers)

    def loss_fn(p: ParamStore) -> Tensor:
        m = StudentModel(p, model.channels, model.K, model.layers, model.hidden)
        pred, distill = m.forward(orig, queries, stacks)
        return total_loss(recon_loss(pred, labels), distill, alpha, setup.M, len(layers))

    return model.params, loss_fn


def run_suite(seed: int = 0, max_entries: int = 64) -> list[tuple[str, GradCheckReport]]:
    """Every op kind in float64 at 1e-5, teacher/student losses in float64 at 1e-4,
    and the student total loss with float32 analytic gradients at 1e-3."""
    results = []
    for name, (params, fn) in op_cases(seed).items():
        results.append((f"op:{name}", gradient_check(fn, params, tol=OP_TOL)))
    params, fn = teacher_case(seed)
    results.append(("teacher_loss_f64", gradient_check(fn, params.astype(np.float64), tol=MODEL_TOL, max_entries=max_entries, seed=seed)))
    params, fn = student_case(seed)
    results.append(("student_loss_f64", gradient_check(fn, params.astype(np.float64), tol=MODEL_TOL, max_entries=max_entries, seed=seed)))
    results.append(("student_loss_f32", gradient_check(fn, params, tol=E2E32_TOL, max_entries=max_entries, seed=seed, metric="maxnorm")))
    return results
