"""Central finite-difference gradient checking for the autodiff engine."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParamStore, Tensor


class CheckInvalidError(RuntimeError):
    """The loss is not a deterministic function of the parameters."""


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    params: dict[str, ParamReport]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params.values())

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params.values()), default=0.0)

    def lines(self) -> list[str]:
        return [
            f"{'ok  ' if p.passed else 'FAIL'} {p.name:<28s} rel={p.max_rel_error:.3e} "
            f"abs={p.max_abs_error:.3e} n={p.n_checked}"
            for p in self.params.values()
        ]


def _loss_value(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore) -> float:
    return loss_fn(params).item()


def gradient_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    tol: float = 1e-6,
    atol: float = 1e-8,
    max_entries: int | None = None,
    seed: int = 0,
    metric: str = "elementwise",
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` to central finite differences.

    The analytic pass runs in the dtype of ``params``; finite differences
    always run on a float64 copy with ``h = 1e-5 * max(1, |theta|)``.

    ``metric="elementwise"``: max over entries of ``|a-n| / max(|a|, |n|, atol/tol)``,
    so an entry passes when ``|a-n| <= max(tol * max(|a|, |n|), atol)``; the
    floor keeps finite-difference noise on near-zero gradients from failing.  ``metric="maxnorm"``:
    ``max|a-n| / max|n|`` per parameter, for float32 analytic gradients whose
    rounding noise swamps tiny entries.
    """
    if metric not in ("elementwise", "maxnorm"):
        raise ValueError(f"unknown metric {metric!r}")
    params.zero_grad()
    with Graph() as g:
        loss = loss_fn(params)
    g.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64) for name, p in params.items()}

    p64 = params.astype(np.float64)
    base = _loss_value(loss_fn, p64)
    if _loss_value(loss_fn, p64) != base:
        raise CheckInvalidError("loss differs between two evaluations at the same parameters")

    rng = np.random.default_rng(seed)
    reports: dict[str, ParamReport] = {}
    for name, p in p64.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a = analytic[name].reshape(-1)[idx]
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            theta = flat[i]
            h = 1e-5 * max(1.0, abs(theta))
            flat[i] = theta + h
            up = _loss_value(loss_fn, p64)
            flat[i] = theta - h
            down = _loss_value(loss_fn, p64)
            flat[i] = theta
            num[j] = (up - down) / (2 * h)
        diff = np.abs(a - num)
        if metric == "elementwise":
            denom = np.maximum(np.abs(a), np.abs(num))
            rel = diff / np.maximum(denom, atol / tol)
            max_rel = float(rel.max(initial=0.0))
        else:
            scale = float(np.abs(num).max(initial=0.0))
            max_rel = float(diff.max(initial=0.0) / max(scale, atol))
        reports[name] = ParamReport(name, max_rel, float(diff.max(initial=0.0)), len(idx), max_rel <= tol)
    return GradCheckReport(reports, tol)


@contextlib.contextmanager
def mutated_backward(kind: str, scale: float = 1.5) -> Iterator[None]:
    """Temporarily scale the backward rule of ``kind`` (negative-control helper)."""
    original = ad.OPS[kind]

    def corrupted(xs, attrs):
        out, bwd = original(xs, attrs)
        return out, lambda g: tuple(None if gi is None else gi * scale for gi in bwd(g))

    ad.OPS[kind] = corrupted
    try:
        yield
    finally:
        ad.OPS[kind] = original
