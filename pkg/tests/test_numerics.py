import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modalfuse.errors import DomainError, NumericalError, StructuralError
from modalfuse.numerics import (
    cosine,
    finite_diff_check,
    l2_normalize,
    layer_norm,
    layer_norm_rows,
    layer_norm_rows_backward,
    normalize_rows,
    normalize_rows_backward,
    sigmoid,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vec(n_min=1, n_max=8):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, n, elements=finite))


def test_cosine_examples():
    assert cosine([1, 0], [1, 0]) == 1.0
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_errors():
    with pytest.raises(StructuralError):
        cosine([1, 0], [1, 0, 0])
    with pytest.raises(DomainError):
        cosine([0, 0], [1, 0])


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                     arrays(np.float64, n, elements=finite))))
def test_cosine_symmetric_and_bounded(ab):
    a, b = ab
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    assert cosine(a, b) == cosine(b, a)
    assert abs(cosine(a, b)) <= 1 + 1e-12
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize([1, 0]), [1, 0])
    with pytest.raises(DomainError):
        l2_normalize([0, 0])


@given(vec())
def test_l2_normalize_idempotent(v):
    if np.linalg.norm(v) < 1e-6:
        return
    once = l2_normalize(v)
    assert abs(np.linalg.norm(once) - 1) < 1e-6
    np.testing.assert_allclose(l2_normalize(once), once, atol=1e-6)


def test_layer_norm_examples():
    np.testing.assert_allclose(layer_norm([5, 5], [1, 1], [0, 0]), [0, 0], atol=1e-12)
    np.testing.assert_allclose(layer_norm([1, -1], [1, 1], [0, 0], eps=0.0), [1, -1])
    np.testing.assert_allclose(layer_norm([1, -1], [2, 2], [1, 1], eps=0.0), [3, -1])
    with pytest.raises(StructuralError):
        layer_norm([1, 2, 3], [1, 1], [0, 0])


@given(st.integers(2, 8).flatmap(lambda n: arrays(np.float64, n, elements=st.floats(-10, 10))))
def test_layer_norm_moments(x):
    if np.ptp(x) < 1e-3:
        return
    d = x.size
    y = layer_norm(x, np.ones(d), np.zeros(d), eps=1e-12)
    assert abs(y.mean()) < 1e-6
    assert abs(y.var() - 1) < 1e-5


def test_sigmoid_stable():
    z = np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    assert s[1] == pytest.approx(1 / (1 + np.e))


def test_finite_diff_quadratic():
    def f(p):
        return float(np.sum(p["p"] ** 2)), {"p": 2 * p["p"]}
    rep = finite_diff_check(f, {"p": np.array([1.0, 2.0])}, step=1e-5, tol=1e-6)
    assert rep.passed and rep.max_error < 1e-6


def test_finite_diff_constant():
    rep = finite_diff_check(lambda p: (3.0, {"w": np.zeros(3)}), {"w": np.ones(3)})
    assert rep.max_error == 0.0 and rep.passed


def test_finite_diff_flags_wrong_gradient():
    rep = finite_diff_check(lambda p: (float(np.sum(p["w"] ** 2)), {"w": 3 * p["w"]}), {"w": np.ones(2)})
    assert rep.failed == ["w"]
    assert rep.worst_index["w"] in ((0,), (1,))


def test_finite_diff_nonfinite_names_parameter():
    def f(p):
        x = p["a"][0]
        return (np.inf if x > 1.0 else x), {"a": np.ones(1)}
    with pytest.raises(NumericalError, match=r"a\[0\]"):
        finite_diff_check(f, {"a": np.array([1.0])}, step=0.5)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(DomainError):
        finite_diff_check(lambda p: (0.0, {}), {}, step=0.0)


def test_row_kernel_gradients():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 5))
    gain0, bias0 = rng.standard_normal(5), rng.standard_normal(5)
    w = rng.standard_normal((3, 5))

    def f(p):
        y, norms = normalize_rows(p["x"])
        z, cache = layer_norm_rows(y, p["gain"], p["bias"])
        dz = w
        dy, dgain, dbias = layer_norm_rows_backward(cache, dz)
        return float(np.sum(z * w)), {"x": normalize_rows_backward(y, norms, dy), "gain": dgain, "bias": dbias}

    rep = finite_diff_check(f, {"x": x0, "gain": gain0, "bias": bias0})
    assert rep.passed, rep.per_tensor
