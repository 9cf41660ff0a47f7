import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils.errors import DegenerateInputError, DimensionError, NonFiniteError, ParameterError, UsageError
from utils.numerics import (
    Tape,
    Tensor,
    _result,
    as_tensor,
    backward,
    concat,
    cosine_matrix,
    cosine_similarity,
    gather,
    grad_check,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    no_grad,
    parameter,
    softmax_temp,
    tabs,
    tsum,
)


def test_matmul_value():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    assert_allclose(out.values, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_temp_values():
    out = softmax_temp(Tensor([2.0, 0.0]), 1.0)
    assert_allclose(out.values, [0.880797, 0.119203], atol=1e-6)
    uniform = softmax_temp(Tensor(np.full(5, 0.3)), 0.07)
    assert_allclose(uniform.values, np.full(5, 0.2), atol=1e-6)


def test_softmax_temp_is_stable_for_large_logits():
    out = softmax_temp(Tensor([1000.0, 1000.0, -1000.0]), 0.01)
    assert np.all(np.isfinite(out.values))
    assert_allclose(out.values.sum(), 1.0, atol=1e-6)


def test_softmax_temp_rejects_bad_input():
    with pytest.raises(ParameterError):
        softmax_temp(Tensor([1.0, 2.0]), 0.0)
    with pytest.raises(DimensionError):
        softmax_temp(Tensor(np.zeros(0)), 1.0)


def test_cosine_similarity():
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-7)
    assert cosine_similarity(Tensor([1.0, 1.0]), Tensor([2.0, 2.0])).item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(DegenerateInputError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_cosine_matrix_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    expected = np.array([[x @ y / np.linalg.norm(x) / np.linalg.norm(y) for y in b] for x in a])
    assert_allclose(cosine_matrix(Tensor(a), Tensor(b)).values, expected, atol=1e-6)


def test_l2_normalize_unit_rows():
    out = l2_normalize(Tensor([[3.0, 4.0], [0.0, 2.0]]))
    assert_allclose(out.values, [[0.6, 0.8], [0.0, 1.0]], atol=1e-7)


def test_layer_norm_checks_width():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_backward_simple_chain():
    # setup: f(x, w) = sum((x @ w) * c)
    # -------------------------------------------------------------------------
    x = parameter([[1.0, 2.0]])
    w = parameter([[3.0], [4.0]])
    with Tape() as tape:
        out = tsum(matmul(x, w) * 2.0)
    backward(out, tape)
    assert out.item() == pytest.approx(22.0)
    assert_allclose(x.grad, [[6.0, 8.0]])
    assert_allclose(w.grad, [[2.0], [4.0]])


def test_backward_accumulates_reused_inputs():
    x = parameter([1.0, -2.0, 3.0])
    with Tape() as tape:
        out = tsum(x * x + x)
    backward(out, tape)
    assert_allclose(x.grad, 2 * np.array([1.0, -2.0, 3.0]) + 1.0)


def test_gather_duplicates_accumulate():
    x = parameter([[1.0, 2.0, 3.0]])
    with Tape() as tape:
        out = tsum(gather(x, np.array([[2, 2, 0]])))
    backward(out, tape)
    assert out.item() == pytest.approx(7.0)
    assert_allclose(x.grad, [[1.0, 0.0, 2.0]])


def test_backward_needs_scalar_root():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        out = x * 2.0
    with pytest.raises(UsageError):
        backward(out, tape)


def test_no_grad_records_nothing():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        with no_grad():
            out = tsum(x * x)
    assert len(tape) == 0
    backward(out, tape)
    assert x.grad is None


def test_frozen_inputs_get_no_gradient():
    x = parameter([1.0, 2.0])
    frozen = Tensor([3.0, 4.0])
    with Tape() as tape:
        out = tsum(x * frozen)
    backward(out, tape)
    assert frozen.grad is None
    assert_allclose(x.grad, [3.0, 4.0])


def test_tensor_defaults_to_float32():
    assert Tensor(np.arange(3, dtype=np.float64)).dtype == np.float32
    assert parameter([1, 2]).dtype == np.float32


def test_grad_check_passes_on_smooth_function():
    rng = np.random.default_rng(3)
    x, w = parameter(rng.normal(size=(2, 4))), parameter(rng.normal(size=(4, 3)))
    y = np.array([0, 2])

    def f():
        logp = log_softmax(matmul(x, w))
        return -tsum(logp[np.arange(2), y])

    report = grad_check(f, [x, w], names=["x", "w"])
    assert report.passed, report.errors
    assert set(report.errors) == {"x", "w"}
    assert x.dtype == np.float32


def test_grad_check_detects_wrong_gradient():
    x = parameter([0.5, 1.5])
    # backward deliberately doubled

    def bad_square(t):
        t = as_tensor(t)
        return _result("bad_square", t.values ** 2, (t,), lambda g: (g * 4.0 * t.values,))

    report = grad_check(lambda: tsum(bad_square(x)), [x])
    assert not report.passed
    assert report.max_error == pytest.approx(0.5, abs=1e-3)


def test_grad_check_rejects_non_finite_neighbourhood():
    x = parameter([-1.0])
    with pytest.raises(NonFiniteError):
        grad_check(lambda: tsum(log(x)), [x])


def test_abs_gradient_away_from_zero():
    x = parameter([-0.7, 0.4])
    report = grad_check(lambda: tsum(tabs(x)), [x])
    assert report.passed


def test_grad_check_samples_elements():
    rng = np.random.default_rng(4)
    x = parameter(rng.uniform(-1, 1, (4, 5)))
    y = parameter(rng.uniform(-1, 1, 3))

    def f():
        return tsum(x * x) + tsum(y * y * y)

    assert grad_check(f, [x, y]).checked == 23
    sampled = grad_check(f, [x, y], max_elements=6, seed=1)
    assert sampled.passed
    assert sampled.checked in (6, 7)
    assert grad_check(f, [x, y], max_elements=6, seed=1).errors == sampled.errors
    # every leaf keeps at least one element
    assert grad_check(f, [x, y], max_elements=1).checked == 2


def _leaf_grad(fn, leaf):
    leaf.zero_grad()
    with Tape() as tape:
        out = fn()
    backward(out, tape)
    grad = leaf.grad_or_zeros().copy()
    leaf.zero_grad()
    return grad


def test_backward_is_linear():
    rng = np.random.default_rng(11)
    x = parameter(rng.uniform(-1, 1, (3, 4)), dtype=np.float64)
    b = Tensor(rng.uniform(-1, 1, (4, 5)), dtype=np.float64)
    w1 = Tensor(rng.uniform(-1, 1, (3, 5)), dtype=np.float64)
    w2 = Tensor(rng.uniform(-1, 1, (3, 4)), dtype=np.float64)

    def f():
        return tsum(softmax_temp(matmul(x, b), 0.5) * w1)

    def g():
        return tsum(log_softmax(layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))), axis=-1) * w2)

    assert_allclose(_leaf_grad(lambda: f() + g(), x), _leaf_grad(f, x) + _leaf_grad(g, x), atol=1e-6)
    assert_allclose(_leaf_grad(lambda: f() * 2.5, x), 2.5 * _leaf_grad(f, x), atol=1e-6)
