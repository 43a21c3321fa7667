"""Graph engine checks: values, first/second-order gradients vs finite differences."""

import numpy as np
import pytest

from metaloss import autodiff as ad
from fdcheck import numerical_grad, rel_error


def scalarize(node, rng):
    # Reduce an arbitrary-shape node to a scalar with fixed random weights so
    # finite differences see every output entry.
    w = ad.constant(rng.standard_normal(node.shape))
    return ad.mul(node, w).sum() if node.shape != () else node


def test_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        ad.Tensor([np.inf])
    t = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.array.dtype == np.float64


def test_closed_form_values():
    assert ad.softplus(ad.constant(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-12)
    assert ad.relu(ad.constant(-3.0)).item() == 0.0
    assert ad.relu(ad.constant(3.0)).item() == 3.0


def test_softplus_stable_at_extremes():
    hi = ad.softplus(ad.constant(50.0)).item()
    lo = ad.softplus(ad.constant(-50.0)).item()
    assert hi == pytest.approx(50.0, abs=1e-12)
    assert 0.0 < lo < 1e-20


def test_matmul_shape_error_names_both_shapes():
    a = ad.constant(np.zeros((2, 3)))
    b = ad.constant(np.zeros((4, 2)))
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_elementwise_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.constant(np.zeros(3)), ad.constant(np.zeros(4)))


def test_simple_derivatives():
    x = ad.leaf(3.0, requires_grad=True)
    y = ad.square(x)
    (g,) = ad.backward(y, [x])
    assert g.item() == pytest.approx(6.0, abs=1e-12)


def test_second_order_via_double_backward():
    # d^2/dx^2 x^3 = 6x -> 12 at x=2
    x = ad.leaf(2.0, requires_grad=True)
    y = ad.mul(ad.square(x), x)
    (g,) = ad.backward(y, [x], create_graph=True)
    (gg,) = ad.backward(g, [x])
    assert gg.item() == pytest.approx(12.0, rel=1e-10)


def test_mean_of_squares_gradient_vs_fd():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(4)

    def f(v):
        x = ad.leaf(v, requires_grad=True)
        return ad.square(x).mean().item()

    x = ad.leaf(x0, requires_grad=True)
    (g,) = ad.backward(ad.square(x).mean(), [x])
    assert rel_error(g.array, numerical_grad(f, x0)) < 1e-6


def test_unconnected_leaf_gradient_is_exactly_zero():
    x = ad.leaf([1.0, 2.0], requires_grad=True)
    z = ad.leaf([5.0, 7.0], requires_grad=True)
    y = ad.square(x).sum()
    gz = ad.backward(y, [z])[0]
    assert np.all(gz.array == 0.0)


def test_backward_rejects_nonscalar_root():
    x = ad.leaf([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.square(x), [x])


def test_backward_rejects_nongrad_target():
    x = ad.leaf(1.0, requires_grad=True)
    c = ad.constant(2.0)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.square(x), [c])


def test_evaluation_deterministic():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((5, 5))
    w = rng.standard_normal((5, 5))

    def run():
        a = ad.constant(v)
        b = ad.constant(w)
        return ad.tanh(ad.matmul(a, b)).sum().item()

    assert run() == run()


# one entry per primitive: builder(inputs as nodes) -> node, input shapes,
# and an offset that keeps relu inputs away from the kink at 0
UNARY_OPS = [
    ("square", ad.square, 0.0),
    ("relu", ad.relu, 0.3),
    ("softplus", ad.softplus, 0.0),
    ("sigmoid", ad.sigmoid, 0.0),
    ("tanh", ad.tanh, 0.0),
    ("sin", ad.sin, 0.0),
    ("cos", ad.cos, 0.0),
]


@pytest.mark.parametrize("name,op,offset", UNARY_OPS)
def test_unary_op_gradient_vs_fd(name, op, offset):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        x0 = rng.standard_normal(6)
        x0 += np.sign(x0) * offset
        w = rng.standard_normal(6)

        def f(v):
            return float(np.sum(op(ad.constant(v)).array * w))

        x = ad.leaf(x0, requires_grad=True)
        root = ad.mul(op(x), ad.constant(w)).sum()
        (g,) = ad.backward(root, [x])
        assert rel_error(g.array, numerical_grad(f, x0)) < 1e-6, name


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
@pytest.mark.parametrize("scalar_side", [None, 0, 1])
def test_binary_op_gradient_vs_fd(name, scalar_side):
    op = getattr(ad, name)
    rng = np.random.default_rng(7)
    for _ in range(10):
        shape_a = () if scalar_side == 0 else (3, 4)
        shape_b = () if scalar_side == 1 else (3, 4)
        a0 = rng.standard_normal(shape_a)
        b0 = rng.standard_normal(shape_b)
        w = rng.standard_normal((3, 4)) if (shape_a or shape_b) else np.asarray(1.0)

        def f_a(v):
            out = op(ad.constant(v.reshape(shape_a)), ad.constant(b0))
            return float(np.sum(out.array * w))

        def f_b(v):
            out = op(ad.constant(a0), ad.constant(v.reshape(shape_b)))
            return float(np.sum(out.array * w))

        a = ad.leaf(a0, requires_grad=True)
        b = ad.leaf(b0, requires_grad=True)
        root = ad.mul(op(a, b), ad.constant(w)).sum()
        ga, gb = ad.backward(root, [a, b])
        assert rel_error(ga.array, numerical_grad(f_a, a0.ravel()).reshape(shape_a)) < 1e-6
        assert rel_error(gb.array, numerical_grad(f_b, b0.ravel()).reshape(shape_b)) < 1e-6


def test_matmul_gradient_vs_fd():
    rng = np.random.default_rng(11)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))

    def f_a(v):
        return float(np.sum((v.reshape(3, 4) @ b0) * w))

    def f_b(v):
        return float(np.sum((a0 @ v.reshape(4, 2)) * w))

    a = ad.leaf(a0, requires_grad=True)
    b = ad.leaf(b0, requires_grad=True)
    root = ad.mul(ad.matmul(a, b), ad.constant(w)).sum()
    ga, gb = ad.backward(root, [a, b])
    assert rel_error(ga.array, numerical_grad(f_a, a0.ravel()).reshape(3, 4)) < 1e-6
    assert rel_error(gb.array, numerical_grad(f_b, b0.ravel()).reshape(4, 2)) < 1e-6


@pytest.mark.parametrize("axis", [None, 0, 1])
def test_sum_mean_gradients_vs_fd(axis):
    rng = np.random.default_rng(13)
    x0 = rng.standard_normal((4, 3))
    out_shape = {None: (), 0: (3,), 1: (4,)}[axis]
    w = rng.standard_normal(out_shape) if out_shape else np.asarray(1.0)

    for reducer in (ad.reduce_sum, ad.reduce_mean):
        def f(v):
            out = reducer(ad.constant(v.reshape(4, 3)), axis)
            return float(np.sum(out.array * w))

        x = ad.leaf(x0, requires_grad=True)
        red = reducer(x, axis)
        root = red if red.shape == () else ad.mul(red, ad.constant(w)).sum()
        if axis is None and reducer is ad.reduce_sum:
            root = red
        (g,) = ad.backward(root, [x])
        want = numerical_grad(f, x0.ravel()).reshape(4, 3)
        assert rel_error(g.array, want) < 1e-6


def test_structural_op_gradients_vs_fd():
    rng = np.random.default_rng(17)
    x0 = rng.standard_normal((3, 5))
    y0 = rng.standard_normal((2, 5))
    v0 = rng.standard_normal(5)
    w_cat = rng.standard_normal((5, 5))
    w_nar = rng.standard_normal((3, 2))
    w_rep = rng.standard_normal((4, 5))
    w_t = rng.standard_normal((5, 3))

    def f_concat(v):
        out = np.concatenate([v.reshape(3, 5), y0], axis=0)
        return float(np.sum(out * w_cat))

    def f_narrow(v):
        return float(np.sum(v.reshape(3, 5)[:, 1:3] * w_nar))

    def f_repeat(v):
        return float(np.sum(np.broadcast_to(v, (4, 5)) * w_rep))

    def f_transpose(v):
        return float(np.sum(v.reshape(3, 5).T * w_t))

    x = ad.leaf(x0, requires_grad=True)
    g = ad.backward(ad.mul(ad.concat([x, ad.constant(y0)], axis=0), ad.constant(w_cat)).sum(), [x])[0]
    assert rel_error(g.array, numerical_grad(f_concat, x0.ravel()).reshape(3, 5)) < 1e-6

    x = ad.leaf(x0, requires_grad=True)
    g = ad.backward(ad.mul(ad.narrow(x, 1, 1, 3), ad.constant(w_nar)).sum(), [x])[0]
    assert rel_error(g.array, numerical_grad(f_narrow, x0.ravel()).reshape(3, 5)) < 1e-6

    v = ad.leaf(v0, requires_grad=True)
    g = ad.backward(ad.mul(ad.repeat_rows(v, 4), ad.constant(w_rep)).sum(), [v])[0]
    assert rel_error(g.array, numerical_grad(f_repeat, v0)) < 1e-6

    x = ad.leaf(x0, requires_grad=True)
    g = ad.backward(ad.mul(ad.transpose(x), ad.constant(w_t)).sum(), [x])[0]
    assert rel_error(g.array, numerical_grad(f_transpose, x0.ravel()).reshape(3, 5)) < 1e-6


def test_scalar_mul_gradient():
    x = ad.leaf([1.0, -2.0, 3.0], requires_grad=True)
    root = ad.scalar_mul(x, -2.5).sum()
    (g,) = ad.backward(root, [x])
    assert np.allclose(g.array, -2.5)


def test_second_order_composition_vs_fd():
    # s(x) = r2 . grad_x[ sum(r1 * softplus(W x)) ]; check ds/dx against FD of s.
    rng = np.random.default_rng(23)
    W = rng.standard_normal((4, 3))
    r1 = rng.standard_normal(4)
    r2 = rng.standard_normal(3)
    x0 = rng.standard_normal(3)

    def first_grad(v):
        x2 = ad.leaf(v.reshape(3, 1), requires_grad=True)
        out = ad.softplus(ad.matmul(ad.constant(W), x2))
        root = ad.mul(out, ad.constant(r1.reshape(4, 1))).sum()
        (g,) = ad.backward(root, [x2])
        return g.array.ravel()

    def s(v):
        return float(first_grad(v) @ r2)

    x2 = ad.leaf(x0.reshape(3, 1), requires_grad=True)
    out = ad.softplus(ad.matmul(ad.constant(W), x2))
    root = ad.mul(out, ad.constant(r1.reshape(4, 1))).sum()
    (g,) = ad.backward(root, [x2], create_graph=True)
    s_node = ad.mul(g, ad.constant(r2.reshape(3, 1))).sum()
    (gg,) = ad.backward(s_node, [x2])
    want = numerical_grad(s, x0)
    assert rel_error(gg.array.ravel(), want) < 1e-4


def test_second_order_tanh_chain_vs_fd():
    rng = np.random.default_rng(29)
    x0 = rng.standard_normal(4)
    r = rng.standard_normal(4)

    def first_grad(v):
        x = ad.leaf(v, requires_grad=True)
        root = ad.square(ad.tanh(x)).sum()
        (g,) = ad.backward(root, [x])
        return g.array

    def s(v):
        return float(first_grad(v) @ r)

    x = ad.leaf(x0, requires_grad=True)
    root = ad.square(ad.tanh(x)).sum()
    (g,) = ad.backward(root, [x], create_graph=True)
    (gg,) = ad.backward(ad.mul(g, ad.constant(r)).sum(), [x])
    assert rel_error(gg.array, numerical_grad(s, x0)) < 1e-4


def test_create_graph_false_detaches():
    x = ad.leaf(2.0, requires_grad=True)
    y = ad.square(x)
    (g,) = ad.backward(y, [x])
    assert g.op == "leaf" and not g.requires_grad


def test_grad_accumulates_over_reuse():
    # y = x*x + x -> dy/dx = 2x + 1
    x = ad.leaf(3.0, requires_grad=True)
    y = ad.add(ad.mul(x, x), x)
    (g,) = ad.backward(y, [x])
    assert g.item() == pytest.approx(7.0, abs=1e-12)
