import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xrayocc.metrics import CapabilityError, EmptyInputError, chamfer_distance, earth_movers_distance

seeds = st.integers(0, 2**31 - 1)


def brute_chamfer(a, b):
    d = np.array([[np.sqrt(sum((x - y) ** 2 for x, y in zip(p, q))) for q in b] for p in a])
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def brute_emd(a, b):
    n = len(a)
    return min(sum(np.linalg.norm(a[i] - b[p[i]]) for i in range(n)) for p in itertools.permutations(range(n))) / n


def pair(seed, n=None, m=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 9))
    return rng.normal(size=(n, 3)) * 10, rng.normal(size=(m or n, 3)) * 10


def test_trivial_values():
    a = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer_distance(a, a) == 0.0
    assert earth_movers_distance(a, a[::-1]) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[3, 4, 0]]) == pytest.approx(5.0)
    assert earth_movers_distance([[0, 0, 0]], [[3, 4, 0]]) == pytest.approx(5.0)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 8), st.integers(1, 8))
def test_chamfer_matches_brute_force(seed, n, m):
    a, b = pair(seed, n, m)
    assert chamfer_distance(a, b) == pytest.approx(brute_chamfer(a, b), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 7))
def test_emd_matches_all_bijections(seed, n):
    a, b = pair(seed, n)
    assert earth_movers_distance(a, b) == pytest.approx(brute_emd(a, b), abs=1e-9)


def test_accelerated_chamfer_matches_brute_force():
    a, b = pair(3, 700, 650)
    fast = chamfer_distance(a, b)
    exact = chamfer_distance(a, b, brute_limit=10**6)
    assert fast == pytest.approx(exact, abs=1e-9)
    small_a, small_b = pair(4, 16)
    assert chamfer_distance(small_a, small_b, brute_limit=0) == pytest.approx(brute_chamfer(small_a, small_b), abs=1e-9)


@given(seeds)
def test_symmetry_and_translation(seed):
    a, b = pair(seed, 6)
    t = np.random.default_rng(seed + 1).uniform(-100, 100, size=3)
    for metric in (chamfer_distance, earth_movers_distance):
        assert metric(a, b) == pytest.approx(metric(b, a), abs=1e-9)
        assert metric(a + t, b + t) == pytest.approx(metric(a, b), abs=1e-9)


def test_chamfer_never_exceeds_emd():
    for seed in range(100):
        a, b = pair(seed, 12)
        assert chamfer_distance(a, b) <= earth_movers_distance(a, b) + 1e-12


@given(seeds)
def test_emd_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(10, 3)) for _ in range(3))
    assert earth_movers_distance(a, c) <= earth_movers_distance(a, b) + earth_movers_distance(b, c) + 1e-9


def test_errors():
    with pytest.raises(EmptyInputError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(EmptyInputError):
        earth_movers_distance([], [[0, 0, 0]])
    with pytest.raises(ValueError, match="equal-size"):
        earth_movers_distance(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(CapabilityError, match="subsample"):
        earth_movers_distance(np.zeros((600, 3)), np.zeros((600, 3)))
    assert earth_movers_distance(np.zeros((600, 3)), np.zeros((600, 3)), limit=600) == 0.0
