import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spreadnet import autodiff as ad
from spreadnet.autodiff import AutodiffError, Tape, Tensor, backward, grad_check


def grads_of(fn, *values):
    leaves = [Tensor(np.asarray(v, dtype=float), requires_grad=True) for v in values]
    with Tape() as tape:
        loss = fn(*leaves)
    g = backward(tape, loss, wrt=leaves)
    return [g[t] for t in leaves]


def test_primitive_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    a = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(ad.matmul(np.eye(3), a).data, a)
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_allclose(ad.sigmoid(Tensor([-800.0, 800.0])).data, [0.0, 1.0])
    np.testing.assert_array_equal(ad.pad(Tensor([[1.0]]), [(1, 0), (0, 2)]).data, [[0, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(ad.concat([Tensor([1.0]), Tensor([2.0, 3.0])]).data, [1, 2, 3])
    np.testing.assert_array_equal(ad.max_window(Tensor([[1.0, 2.0], [3.0, 4.0]]), (2, 2)).data, [[4.0]])


def test_backward_examples():
    (g,) = grads_of(lambda x: ad.sum(x), np.ones((2, 3, 4)))
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))
    (g,) = grads_of(lambda x: ad.sum(x * x), [1.0, -2.0])
    np.testing.assert_array_equal(g, [2.0, -4.0])
    (g,) = grads_of(lambda x: ad.mean(ad.relu(x)), [3.0, -3.0])
    np.testing.assert_array_equal(g, [0.5, 0.0])


def test_unused_leaf_gets_zero_and_reuse_across_tapes():
    w = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    for k in (1.0, 3.0):
        with Tape() as tape:
            loss = ad.sum(w * k)
        g = backward(tape, loss, wrt=[w, unused])
        np.testing.assert_array_equal(g[w], [k, k])
        np.testing.assert_array_equal(g[unused], np.zeros((2, 2)))


def test_shared_subexpression_accumulates():
    (g,) = grads_of(lambda x: ad.sum(x * x + x), [2.0])
    assert g[0] == 5.0


def test_errors_name_operation_and_shapes():
    with pytest.raises(AutodiffError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(AutodiffError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(AutodiffError, match="max_window"):
        ad.max_window(Tensor(np.ones((3, 3))), (2, 2))
    with Tape() as tape:
        y = Tensor(np.ones(2), requires_grad=True) * 2.0
    with pytest.raises(AutodiffError, match="scalar"):
        backward(tape, y)


def test_no_tape_means_no_tracking():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert y._tape is None


def test_tape_nodes_are_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        ad.sum(ad.tanh(x * x) + x)
    for i, node in enumerate(tape.nodes):
        assert all(src < i for src in node.inputs if src is not None)


def test_tapes_are_thread_confined():
    out = {}

    def work(k):
        x = Tensor(np.full(4, float(k)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(x * x)
        out[k] = backward(tape, loss, [x])[x]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_array_equal(out[k], np.full(4, 2.0 * k))


def test_max_window_tie_goes_to_first():
    (g,) = grads_of(lambda x: ad.sum(ad.max_window(x, (2, 2))), np.full((2, 2), 5.0))
    np.testing.assert_array_equal(g, [[1.0, 0.0], [0.0, 0.0]])
    (g,) = grads_of(lambda x: ad.sum(ad.max_window(x, (2, 2))), [[1.0, 7.0], [7.0, 2.0]])
    np.testing.assert_array_equal(g, [[0.0, 1.0], [0.0, 0.0]])


def test_grad_check_examples():
    rng = np.random.default_rng(0)
    # Linear f with exactly representable arithmetic (dyadic inputs and step):
    # central differences are exact.
    a = rng.integers(-5, 6, (3, 4)).astype(float)
    x = rng.integers(-64, 64, (3, 4)) / 8.0
    assert grad_check(lambda t: ad.sum(t * a), x, eps=2.0 ** -17) < 1e-10
    # Generic linear f: only float rounding of f remains.
    a = rng.standard_normal((3, 4))
    assert grad_check(lambda t: ad.sum(t * a), rng.standard_normal((3, 4))) < 1e-6
    assert grad_check(lambda x: ad.sum(x * x), rng.standard_normal(20)) < 1e-7


PRIMITIVES = {
    "add": lambda x, c: x + c,
    "sub": lambda x, c: c - x,
    "mul": lambda x, c: x * c,
    "div": lambda x, c: x / (ad.sigmoid(c) + 1.0),
    "power": lambda x, c: ad.power(ad.sigmoid(x) + 1.0, 1.5),
    "relu": lambda x, c: ad.relu(x),
    "sigmoid": lambda x, c: ad.sigmoid(x),
    "tanh": lambda x, c: ad.tanh(x),
    "scale_shift": lambda x, c: ad.scale_shift(x, c[:1], c[1:2]),
    "matmul": lambda x, c: ad.matmul(x, ad.transpose(c, (1, 0))),
    "sum_axis": lambda x, c: ad.sum(x, axis=1, keepdims=True) * c,
    "mean_axis": lambda x, c: ad.mean(x, axis=0) * c[0],
    "max_window": lambda x, c: ad.max_window(x, (1, 2)),
    "pad": lambda x, c: ad.pad(x, [(1, 0), (0, 2)]),
    "slice": lambda x, c: x[1:, ::2],
    "concat": lambda x, c: ad.concat([x, c, x], axis=1),
    "reshape": lambda x, c: ad.reshape(x, (2, 6)),
    "transpose": lambda x, c: ad.transpose(x, (1, 0)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_every_primitive_passes_grad_check(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    # Well separated values keep relu and max away from kinks and ties.
    x = (rng.permutation(12) - 5.5) * 0.1
    x = x.reshape(3, 4)
    c = rng.standard_normal((3, 4))
    fn = PRIMITIVES[name]
    probe = rng.standard_normal(np.shape(fn(Tensor(x), Tensor(c)).data))
    assert grad_check(lambda t: ad.sum(fn(t, Tensor(c)) * probe), x) < 1e-6
    if name not in ("relu", "max_window", "power"):
        assert grad_check(lambda t: ad.sum(fn(Tensor(x), t) * probe), c) < 1e-6


def test_correlation_primitives_grad_check():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 2, 3, 3))
    w = rng.standard_normal((2, 2, 1, 3, 3))
    probe = rng.standard_normal((1, 2, 2, 3, 3))
    assert grad_check(lambda t: ad.sum(ad.correlate3d(t, w) * probe), x, 1e-3) < 1e-6
    assert grad_check(lambda t: ad.sum(ad.correlate3d(x, t) * probe), w, 1e-3) < 1e-6
    wu = rng.standard_normal((2, 2, 2, 3, 1, 3))
    assert grad_check(lambda t: ad.sum(ad.correlate3d_unshared(x, t) * probe), wu, 1e-3) < 1e-6


def test_backward_is_deterministic():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 3, 4, 4))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)), requires_grad=True)
    results = []
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum(ad.tanh(ad.correlate3d(x, w)))
        results.append(backward(tape, loss, [w])[w])
    assert np.array_equal(results[0], results[1])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       st.floats(-5, 5), st.floats(-5, 5))
def test_gradient_linearity(x, a, b):
    f = lambda t: ad.sum(ad.tanh(t) * ad.sigmoid(t))
    g = lambda t: ad.sum(t * t * t)
    (gf,) = grads_of(f, x)
    (gg,) = grads_of(g, x)
    (gc,) = grads_of(lambda t: f(t) * a + g(t) * b, x)
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-12 * (1 + np.abs(gg).max() * 5))


def test_debug_mode_flags_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(AutodiffError), np.errstate(divide="ignore"):
            ad.div(Tensor([1.0]), Tensor([0.0]))
    finally:
        ad.set_debug(False)
    with np.errstate(divide="ignore"):
        assert np.isinf(ad.div(Tensor([1.0]), Tensor([0.0])).data[0])
