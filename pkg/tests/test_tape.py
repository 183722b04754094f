import numpy as np
import pytest

from bevcontrast.errors import ContractError
from bevcontrast.nnet import tape as T
from bevcontrast.nnet.gradcheck import grad_check
from bevcontrast.nnet.tape import Tape, Tensor


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        g.ravel()[i] = (fp - fm) / (2 * eps)
    return g


def check_unary(op, x, tol=1e-7):
    tape = Tape()
    leaf = tape.leaf(x.copy())
    out = T.tsum(T.mul(op(leaf), np.arange(1.0, 1.0 + x.size).reshape(x.shape)))
    tape.backward(out)

    def f(arr):
        t2 = Tape()
        l2 = t2.leaf(arr)
        return float(T.tsum(T.mul(op(l2), np.arange(1.0, 1.0 + x.size).reshape(x.shape))).value)

    num = numeric_grad(f, x.copy())
    assert np.allclose(leaf.grad, num, rtol=tol, atol=tol)


def test_elementwise_ops_match_fd(rng):
    x = rng.uniform(0.5, 2.0, (4, 3))
    check_unary(lambda t: T.exp(t), x)
    check_unary(lambda t: T.log(t), x)
    check_unary(lambda t: T.sqrt(t), x)
    check_unary(lambda t: T.mul(t, t), x)
    check_unary(lambda t: T.neg(t), x)
    check_unary(lambda t: T.relu(T.sub(t, 1.2)), x)


def test_broadcast_add_and_div(rng):
    x = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    n = rng.uniform(1.0, 2.0, (5, 1))

    def build(leaves, tape):
        return T.tsum(T.div(T.add(leaves["x"], leaves["b"]), leaves["n"]))

    report = grad_check(build, {"x": x, "b": b, "n": n}, eps=1e-6)
    assert report.max_rel_err < 1e-7


def test_matmul_transpose_concat_gather(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    idx = np.array([0, 2, 2, 3])

    def build(leaves, tape):
        prod = T.matmul(leaves["a"], leaves["b"])
        both = T.concat([prod, T.transpose(T.matmul(leaves["b"], T.transpose(prod)))], axis=1)
        picked = T.gather_rows(both, idx)
        return T.tsum(T.mul(picked, np.arange(1.0, 1.0 + picked.value.size).reshape(picked.value.shape)))

    report = grad_check(build, {"a": a, "b": b}, eps=1e-6)
    assert report.max_rel_err < 1e-6


def test_rowgroup_max_gradient_routes_to_argmax():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    tape = Tape()
    leaf = tape.leaf(x)
    pooled = T.rowgroup_max(leaf, [np.array([0, 1]), np.array([2])])
    assert np.array_equal(pooled.value, [[1.0, 1.0], [5.0, 5.0]])
    tape.backward(T.tsum(pooled))
    assert np.array_equal(leaf.grad, [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def test_rowgroup_max_tie_goes_to_lowest_index():
    x = np.array([[2.0], [2.0]])
    tape = Tape()
    leaf = tape.leaf(x)
    pooled = T.rowgroup_max(leaf, [np.array([0, 1])])
    tape.backward(T.tsum(pooled))
    assert np.array_equal(leaf.grad, [[1.0], [0.0]])


def test_pillar_scatter_max_values_and_grads():
    feats = np.array([[1.0, -2.0], [3.0, -1.0], [0.5, 9.0]])
    cells = np.array([0, 0, 2])
    tape = Tape()
    leaf = tape.leaf(feats)
    out = T.pillar_scatter_max(leaf, cells, n_cells=4)
    assert np.array_equal(out.value, [[3.0, -1.0], [0, 0], [0.5, 9.0], [0, 0]])
    tape.backward(T.tsum(out))
    assert np.array_equal(leaf.grad, [[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])


def test_pillar_scatter_max_tie_lowest_point():
    feats = np.array([[7.0], [7.0]])
    tape = Tape()
    leaf = tape.leaf(feats)
    out = T.pillar_scatter_max(leaf, np.array([1, 1]), n_cells=2)
    tape.backward(T.tsum(out))
    assert np.array_equal(leaf.grad, [[1.0], [0.0]])


def test_conv3x3_matches_fd(rng):
    x = rng.standard_normal((5, 5, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)

    def build(leaves, tape):
        out = T.conv3x3(leaves["x"], leaves["k"], leaves["b"])
        return T.tsum(T.mul(out, np.arange(1.0, 1.0 + out.value.size).reshape(out.value.shape) / 40.0))

    report = grad_check(build, {"x": x, "k": k, "b": b})
    assert report.max_rel_err < 1e-6


def test_conv3x3_zero_padding():
    x = np.zeros((3, 3, 1))
    x[1, 1, 0] = 1.0
    k = np.zeros((3, 3, 1, 1))
    k[0, 0, 0, 0] = 1.0  # top-left tap reads the bottom-right neighbor
    out = T.conv3x3(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
    expected = np.zeros((3, 3, 1))
    expected[2, 2, 0] = 1.0
    assert np.array_equal(out.value, expected)


def test_bilinear_gather_weights(rng):
    fm = rng.standard_normal((4, 4, 3))
    tape = Tape()
    leaf = tape.leaf(fm)
    out = T.bilinear_gather(leaf, np.array([1.0, 1.5]), np.array([2.0, 2.5]))
    assert np.allclose(out.value[0], fm[1, 2])
    mid = 0.25 * (fm[1, 2] + fm[1, 3] + fm[2, 2] + fm[2, 3])
    assert np.allclose(out.value[1], mid)
    tape.backward(T.tsum(out))
    assert np.isclose(leaf.grad.sum(), 2.0 * 3)


def test_logsumexp_rows_stability_and_value(rng):
    x = rng.standard_normal((3, 6)) * 50  # large logits
    tape = Tape()
    leaf = tape.leaf(x)
    out = T.logsumexp_rows(leaf)
    expected = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1, keepdims=True)) + x.max(1, keepdims=True)
    assert np.allclose(out.value, expected)
    assert np.isfinite(out.value).all()


def test_l2_normalize_rows_unit_norm(rng):
    x = rng.standard_normal((6, 5))
    out = T.l2_normalize_rows(Tensor(x))
    norms = np.linalg.norm(out.value, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-9


def test_backward_requires_scalar(rng):
    tape = Tape()
    leaf = tape.leaf(rng.standard_normal((2, 2)))
    out = T.mul(leaf, 2.0)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_mixing_tapes_rejected(rng):
    t1, t2 = Tape(), Tape()
    a = t1.leaf(rng.standard_normal(3))
    b = t2.leaf(rng.standard_normal(3))
    with pytest.raises(ContractError):
        T.add(a, b)


def test_sum_of_backwards_equals_backward_of_sum(rng):
    """Linearity of the reverse sweep."""
    x = rng.standard_normal((3, 3))

    def grad_of(fn):
        tape = Tape()
        leaf = tape.leaf(x.copy())
        tape.backward(fn(leaf))
        return leaf.grad

    ga = grad_of(lambda t: T.tsum(T.mul(t, t)))
    gb = grad_of(lambda t: T.tsum(T.exp(t)))
    gsum = grad_of(lambda t: T.add(T.tsum(T.mul(t, t)), T.tsum(T.exp(t))))
    assert np.allclose(gsum, ga + gb, rtol=1e-12)


def test_detach_blocks_gradient(rng):
    tape = Tape()
    leaf = tape.leaf(rng.standard_normal((2, 2)))
    frozen = T.mul(leaf, 3.0).detach()
    out = T.tsum(T.mul(Tensor(frozen.value), 2.0))
    tape.backward(out)
    assert leaf.grad is None


def test_linear_function_machine_precision(rng):
    w = rng.standard_normal(7)

    def build(leaves, tape):
        return T.tsum(T.mul(leaves["w"], np.arange(7.0)))

    report = grad_check(build, {"w": w})
    assert report.max_rel_err < 1e-9
