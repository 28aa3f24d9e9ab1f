import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plvo import autodiff as ad
from plvo.errors import NonScalarLoss, ShapeMismatch


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def grad_of(build, *arrays):
    ts = [ad.Tensor(a) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*ts)
    return ad.backward(tape, loss, ts)


def test_matmul_identity():
    A = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(ad.matmul(np.eye(3), A).data, A)


def test_relu_and_softmax_examples():
    assert np.array_equal(ad.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    assert np.array_equal(ad.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])


def test_square_gradient():
    (g,) = grad_of(lambda x: ad.sum_(ad.mul(x, x)), np.array([3.0]))
    assert g[0] == 6.0


def test_unused_leaf_gets_zero_gradient():
    gx, gy = grad_of(lambda x, y: ad.sum_(ad.scale(x, 2.0)), np.ones(3), np.ones((2, 2)))
    assert np.array_equal(gx, 2 * np.ones(3))
    assert np.array_equal(gy, np.zeros((2, 2)))


def test_sum_of_leaf_gives_all_ones():
    (g,) = grad_of(lambda x: ad.sum_(x), np.random.default_rng(0).normal(size=(4, 5)))
    assert np.array_equal(g, np.ones((4, 5)))


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones(3))
    with ad.Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(NonScalarLoss):
        ad.backward(tape, y, [x])


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeMismatch):
        ad.concat([np.ones((2, 3)), np.ones((2, 2))], axis=0)


def test_row_bias_broadcast_allowed():
    out = ad.add(np.zeros((2, 3)), np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out.data, [[1, 2, 3], [1, 2, 3]])


def _w(rng, *shape):
    return rng.normal(size=shape)


PRIMITIVES = {
    "matmul": (lambda a, b: ad.matmul(a, b), lambda r: [_w(r, 3, 4), _w(r, 4, 2)]),
    "add": (lambda a, b: ad.add(a, b), lambda r: [_w(r, 3, 4), _w(r, 3, 4)]),
    "add_bias": (lambda a, b: ad.add(a, b), lambda r: [_w(r, 3, 4), _w(r, 4)]),
    "sub": (lambda a, b: ad.sub(a, b), lambda r: [_w(r, 3, 4), _w(r, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), lambda r: [_w(r, 3, 4), _w(r, 3, 4)]),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [_w(r, 3, 4)]),
    "relu": (lambda a: ad.relu(a), lambda r: [_w(r, 3, 4) + 0.05 * np.sign(_w(r, 3, 4))]),
    "exp": (lambda a: ad.exp(a), lambda r: [_w(r, 3, 4)]),
    "log": (lambda a: ad.log(a), lambda r: [np.abs(_w(r, 3, 4)) + 0.5]),
    "softmax_rows": (lambda a: ad.softmax_rows(a), lambda r: [_w(r, 3, 4)]),
    "logsumexp_rows": (lambda a: ad.logsumexp_rows(a), lambda r: [_w(r, 3, 4)]),
    "concat0": (lambda a, b: ad.concat([a, b], axis=0), lambda r: [_w(r, 2, 4), _w(r, 3, 4)]),
    "concat1": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [_w(r, 3, 2), _w(r, 3, 4)]),
    "slice": (lambda a: ad.slice_(a, (slice(1, 3), slice(0, 2))), lambda r: [_w(r, 3, 4)]),
    "transpose": (lambda a: ad.transpose(a), lambda r: [_w(r, 3, 4)]),
    "gather": (lambda a: ad.gather(a, np.array([0, 2, 2]), np.array([1, 3, 3])), lambda r: [_w(r, 3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), lambda r: [_w(r, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@given(seed=st.integers(0, 2**31))
@settings(max_examples=10, deadline=None)
def test_primitive_vjp_matches_finite_differences(name, seed):
    op, make = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    inputs = make(rng)
    weight = rng.normal(size=np.shape(op(*inputs).data))

    def scalar(*arrs):
        return float(np.sum(op(*arrs).data * weight))

    grads = grad_of(lambda *ts: ad.sum_(ad.mul(op(*ts), ad.Tensor(weight))), *inputs)
    for k, (x, g) in enumerate(zip(inputs, grads)):
        def f(xk, k=k):
            args = list(inputs)
            args[k] = xk
            return scalar(*args)
        assert rel_err(g, numeric_grad(f, x)) < 1e-4


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 4))
    Ws = [rng.normal(size=s) for s in [(4, 8), (8, 6), (6, 1)]]
    bs = [rng.normal(size=s[1]) for s in [(4, 8), (8, 6), (6, 1)]]

    def forward(*params):
        h = ad.Tensor(x)
        for k in range(3):
            h = ad.add(ad.matmul(h, params[2 * k]), params[2 * k + 1])
            if k < 2:
                h = ad.relu(h)
        return ad.sum_(h)

    params = [p for pair in zip(Ws, bs) for p in pair]
    grads = grad_of(forward, *params)
    for k, (p, g) in enumerate(zip(params, grads)):
        def f(pk, k=k):
            args = list(params)
            args[k] = pk
            return forward(*args).item()
        assert rel_err(g, numeric_grad(f, p)) < 1e-4


def test_gradients_are_deterministic():
    rng = np.random.default_rng(5)
    A, B = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    build = lambda a, b: ad.sum_(ad.softmax_rows(ad.matmul(a, b)))  # noqa: E731
    g1 = grad_of(build, A, B)
    g2 = grad_of(build, A, B)
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    out, _ = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(), lr=0.1)
    assert np.array_equal(out["w"], p["w"])


def test_adam_single_step_formula():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    g = 0.5
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expected = 2.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    out, state = ad.adam_step({"x": np.array(2.0)}, {"x": np.array(g)}, ad.AdamState(), lr, b1, b2, eps)
    assert out["x"] == pytest.approx(expected, abs=1e-15)
    assert state.t == 1


def test_adam_descends_on_parabola():
    x = {"x": np.array(1.0)}
    state = ad.AdamState()
    history = []
    for _ in range(60):
        x, state = ad.adam_step(x, {"x": 2 * x["x"]}, state, lr=0.1)
        history.append(abs(float(x["x"])))
    # monotone approach until the first crossing of the optimum
    first_cross = next(k for k in range(1, 60) if history[k] > history[k - 1])
    assert first_cross >= 9
    assert all(b < a for a, b in zip(history[:first_cross], history[1:first_cross]))
    # afterwards the overshoot envelope shrinks
    peaks = [history[k] for k in range(1, 59) if history[k - 1] < history[k] > history[k + 1]]
    assert len(peaks) >= 2 and all(b < a for a, b in zip(peaks, peaks[1:]))


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, ad.AdamState())


def test_tapes_are_thread_local():
    import threading
    results = {}

    def worker(k):
        x = ad.Tensor(np.array([float(k)]))
        with ad.Tape() as tape:
            y = ad.sum_(ad.mul(x, x))
        results[k] = ad.backward(tape, y, [x])[0][0]

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: 2.0 * k for k in range(1, 5)}
