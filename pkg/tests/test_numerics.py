import numpy as np
import pytest

from distime import numerics as nx
from distime.numerics import DenseStack, Tensor


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


UNARY = {
    "exp": nx.exp,
    "log": lambda t: nx.log(t * t + 1.0),
    "sigmoid": nx.sigmoid,
    "softmax": lambda t: nx.softmax(t) * np.arange(4.0),
    "log_softmax": lambda t: nx.log_softmax(t) * np.arange(4.0),
    "rms_norm": lambda t: nx.rms_norm(t, Tensor(np.array([1.0, 2.0, -1.0, 0.5]))),
    "transpose": lambda t: t.transpose(1, 0) @ np.ones(3),
    "getitem": lambda t: t[np.array([0, 0, 2]), np.array([1, 1, 3])] * 2.0,
    "concat": lambda t: nx.concat([t, t * 2.0], axis=1),
    "stack": lambda t: nx.stack([t, nx.exp(t)], axis=0),
    "mean": lambda t: t.mean(axis=0),
    "safe_div": lambda t: nx.safe_div(t, t * t + 1.0, 0.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradients(name):
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 4))
    w = rng.normal(size=UNARY[name](Tensor(x0)).shape)
    x = nx.parameter(x0.copy())
    (UNARY[name](x) * w).sum().backward()
    num = fd_grad(lambda a: float((UNARY[name](Tensor(a)).data * w).sum()), x0.copy())
    np.testing.assert_allclose(x.grad, num, rtol=1e-6, atol=1e-8)


def test_matmul_gradients_batched_and_vector():
    rng = np.random.default_rng(2)
    a0, b0, v0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=4)
    a, b, v = nx.parameter(a0.copy()), nx.parameter(b0.copy()), nx.parameter(v0.copy())
    ((a @ b).sum() + (a @ v).sum()).backward()
    f = lambda A: float((A @ b0).sum() + (A @ v0).sum())
    np.testing.assert_allclose(a.grad, fd_grad(f, a0.copy()), rtol=1e-6)
    np.testing.assert_allclose(v.grad, fd_grad(lambda V: float((a0 @ V).sum()), v0.copy()), rtol=1e-6)


def test_causal_attention_matches_reference_and_gradient():
    rng = np.random.default_rng(3)
    q0, k0, v0 = (rng.normal(size=(2, 2, 5, 3)) for _ in range(3))
    out = nx.causal_attention(Tensor(q0), Tensor(k0), Tensor(v0)).data
    s = q0 @ np.swapaxes(k0, -1, -2) / np.sqrt(3)
    s = np.where(np.tril(np.ones((5, 5), bool)), s, -np.inf)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(out, p @ v0, rtol=1e-12)

    w = rng.normal(size=out.shape)
    q, k, v = (nx.parameter(t.copy()) for t in (q0, k0, v0))
    (nx.causal_attention(q, k, v) * w).sum().backward()
    for param, x0, pos in ((q, q0, 0), (k, k0, 1), (v, v0, 2)):
        def f(x):
            args = [q0, k0, v0]
            args[pos] = x
            return float((nx.causal_attention(*map(Tensor, args)).data * w).sum())
        np.testing.assert_allclose(param.grad, fd_grad(f, x0.copy()), rtol=1e-5, atol=1e-9)


def test_backward_twice_raises():
    x = nx.parameter(np.ones(3))
    y = (x * 2.0).sum()
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_no_grad_builds_no_graph():
    x = nx.parameter(np.ones(3))
    with nx.no_grad():
        y = (x * 2.0).sum()
    with pytest.raises(RuntimeError):
        y.backward()


def test_dense_stack_defaults_and_reference():
    rng = np.random.default_rng(0)
    stack = DenseStack.build(6, 4, 8, rng=rng)
    assert stack.layer_count == 3 and stack.dims == (6, 8, 8, 4)
    for p in stack.biases:
        p.data = rng.normal(size=p.shape)
    x = rng.normal(size=(5, 6))
    np.testing.assert_allclose(stack(x).data, nx.dense_forward_reference(stack, x), rtol=1e-12)
    with pytest.raises(ValueError):
        stack(np.ones((2, 5)))


def test_dense_last_layer_is_linear():
    stack = DenseStack([1, 1])
    stack.weights[0].data[:] = -1.0
    assert stack(np.array([[2.0]])).data[0, 0] == -2.0


def test_snapshot_round_trip(tmp_path):
    stack = DenseStack.build(3, 2, 5, rng=np.random.default_rng(4))
    path = tmp_path / "s.bin"
    nx.save_stack(stack, path)
    back = nx.load_stack(path)
    assert back.dims == stack.dims
    for a, b in zip(stack.parameters(), back.parameters()):
        assert np.array_equal(a.data, b.data)
    raw = path.read_bytes()
    assert raw[:8] == b"DISTIME1"
    with pytest.raises(ValueError):
        nx.stack_from_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        nx.stack_from_bytes(b"NOTMAGIC" + raw[8:])


def test_sections_round_trip():
    blob = nx.pack_sections([("A", b"xy"), ("BCDE", b"")])
    assert nx.unpack_sections(blob) == [("A", b"xy"), ("BCDE", b"")]
    with pytest.raises(ValueError):
        nx.pack_sections([("TOOLONG", b"")])


def test_finite_difference_check_small_stack():
    rng = np.random.default_rng(5)
    stack = DenseStack.build(4, 3, 6, rng=rng)
    x = rng.normal(size=(7, 4))
    y = rng.integers(0, 3, size=7)
    loss = lambda: -nx.log_softmax(stack(x))[np.arange(7), y].sum()
    assert nx.finite_difference_check(stack, loss, n_coords=40) < 1e-6


def test_finite_difference_check_detects_wrong_gradient():
    x = nx.parameter(np.array([0.3, -0.7]))

    def bad_square(t):
        return nx._result(t.data ** 2, (t,), lambda g: (g * t.data,))  # true derivative is 2t

    loss = lambda: bad_square(x).sum()
    assert nx.finite_difference_check(x, loss, n_coords=5) > 0.4


def test_kinks_are_not_differenced_across():
    x = nx.parameter(np.array([1e-6, 0.5, -0.5]))
    assert nx.finite_difference_check(x, lambda: nx.relu(x).sum(), n_coords=20, step=1e-5) < 1e-8
