"""Chamfer and Earth Mover's distances between surface point sets (Euclidean, mm)."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

BRUTE_FORCE_LIMIT = 512
EMD_LIMIT = 512


class EmptyInputError(ValueError):
    pass


class CapabilityError(ValueError):
    pass


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise EmptyInputError("point set is empty")
    return a


def nearest_distances(src: np.ndarray, dst: np.ndarray, brute_limit: int = BRUTE_FORCE_LIMIT) -> np.ndarray:
    if max(len(src), len(dst)) <= brute_limit:
        return cdist(src, dst).min(axis=1)
    return cKDTree(dst).query(src, k=1)[0]


def chamfer_distance(pred, gt, brute_limit: int = BRUTE_FORCE_LIMIT) -> float:
    """Half the sum of the two mean nearest-neighbour distances."""
    a, b = _points(pred), _points(gt)
    return 0.5 * (float(nearest_distances(a, b, brute_limit).mean()) + float(nearest_distances(b, a, brute_limit).mean()))


def earth_movers_distance(pred, gt, limit: int = EMD_LIMIT) -> float:
    """Mean matched distance under the optimal bijection (exact assignment)."""
    a, b = _points(pred), _points(gt)
    if len(a) != len(b):
        raise ValueError(f"EMD needs equal-size sets, got {len(a)} and {len(b)}")
    if len(a) > limit:
        raise CapabilityError(f"exact EMD limited to {limit} points, got {len(a)}; subsample first")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))
