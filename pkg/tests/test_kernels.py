import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amr import _fallback, kernels
from amr.checks import brute_force_assignment

try:
    from amr import _kernels
except ImportError:  # extension not built
    _kernels = None

IMPLS = [pytest.param(_fallback, id="python")]
if _kernels is not None:
    IMPLS.append(pytest.param(_kernels, id="cython"))
needs_cython = pytest.mark.skipif(_kernels is None, reason="compiled kernels not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    if _kernels is not None:
        assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("impl", IMPLS)
def test_assignment_hand_example(impl):
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    r, c = impl.linear_sum_assignment(cost)
    assert r.tolist() == [0, 1, 2] and c.tolist() == [1, 0, 2]
    assert cost[r, c].sum() == 5.0


@pytest.mark.parametrize("impl", IMPLS)
def test_assignment_rectangular_and_errors(impl):
    cost = np.array([[5.0, 1.0, 9.0, 0.5], [1.0, 7.0, 0.2, 3.0]])
    r, c = impl.linear_sum_assignment(cost)
    assert c.tolist() == [3, 2]
    with pytest.raises(ValueError):
        impl.linear_sum_assignment(np.ones((3, 2)))
    with pytest.raises(ValueError):
        impl.linear_sum_assignment(np.array([[np.nan, 1.0]]))
    r, c = impl.linear_sum_assignment(np.zeros((0, 3)))
    assert r.size == 0 and c.size == 0


@pytest.mark.parametrize("impl", IMPLS)
@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**31))
def test_assignment_is_optimal(impl, n, extra, seed):
    cost = np.random.default_rng(seed).normal(size=(n, n + extra))
    r, c = impl.linear_sum_assignment(cost)
    assert len(set(c.tolist())) == n
    assert cost[r, c].sum() == pytest.approx(brute_force_assignment(cost), abs=1e-9)


def test_assignment_agrees_with_scipy():
    scipy_opt = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(3)
    for _ in range(200):
        cost = rng.normal(size=(10, 15))
        r, c = kernels.linear_sum_assignment(cost)
        rs, cs = scipy_opt.linear_sum_assignment(cost)
        assert cost[r, c].sum() == pytest.approx(cost[rs, cs].sum(), abs=1e-9)


@pytest.mark.parametrize("impl", IMPLS)
def test_iou_giou_matrix_examples(impl):
    a = np.array([[0.0, 10.0], [0.0, 1.0]])
    b = np.array([[5.0, 15.0], [2.0, 3.0]])
    assert np.allclose(impl.iou_matrix(a, b), [[1 / 3, 0.1], [0.0, 0.0]])
    assert np.allclose(impl.giou_matrix(a, b), [[1 / 3, 0.1], [-4 / 15, -1 / 3]])


@pytest.mark.parametrize("impl", IMPLS)
def test_ap_examples(impl):
    gts = np.array([[0.0, 10.0], [20.0, 30.0]])
    # one hit at rank 1, a miss, then the second hit: envelope gives 1*0.5 + (2/3)*0.5
    preds = np.array([[0.0, 10.0], [40.0, 50.0], [20.0, 30.0]])
    assert impl.greedy_average_precision([0.9, 0.8, 0.7], preds, gts, 0.5) == pytest.approx(0.5 + 1 / 3)
    assert impl.greedy_average_precision([0.9], preds[:1], gts[:0], 0.5) == 0.0
    assert impl.greedy_average_precision([], np.zeros((0, 2)), gts, 0.5) == 0.0
    # duplicates of one gt only count once
    dup = np.array([[0.0, 10.0], [0.0, 10.0]])
    assert impl.greedy_average_precision([0.9, 0.9], dup, gts[:1], 0.5) == 1.0


@needs_cython
@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 8))
def test_cython_matches_python_bitwise(seed, n, m):
    rng = np.random.default_rng(seed)
    lo = rng.integers(0, 40, size=(n, 1)).astype(float)
    a = np.hstack([lo, lo + rng.integers(1, 20, size=(n, 1))])
    lo = rng.integers(0, 40, size=(m, 1)).astype(float)
    b = np.hstack([lo, lo + rng.integers(1, 20, size=(m, 1))])
    for name in ("iou_matrix", "giou_matrix"):
        assert getattr(_kernels, name)(a, b).tobytes() == getattr(_fallback, name)(a, b).tobytes()
    scores = rng.integers(0, 4, size=n) / 4.0
    for thr in (0.3, 0.5, 0.7):
        assert _kernels.greedy_average_precision(scores, a, b, thr) == \
            _fallback.greedy_average_precision(scores, a, b, thr)
    cost = rng.integers(0, 5, size=(min(n, m), max(n, m))).astype(float)  # integer costs force ties
    for x, y in zip(_kernels.linear_sum_assignment(cost), _fallback.linear_sum_assignment(cost)):
        assert x.tolist() == y.tolist()


def test_env_var_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, AMR_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import amr.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
