"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product. ``loss.backward()`` replays
the recorded graph in reverse topological order and accumulates ``.grad`` on
leaf tensors. A graph can be replayed once; run a new forward pass to get a
fresh one.

Only the ops needed by the time codec and the toy sequence model exist here.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without building a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch decisions of every non-smooth op (relu, min, max, clip).

    Yields a list that receives one boolean array per op, in execution order.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(mask):
    if _kink_log is not None:
        _kink_log.append(np.asarray(mask).copy())


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")
    # make numpy defer to the reflected operators instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Back-propagate from this tensor (a scalar unless ``grad`` is given)."""
        if self._consumed:
            raise RuntimeError("backward was already run on this graph; run a new forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor does not depend on any parameter")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar")
            grad = np.ones_like(self.data)

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
            node._consumed = True
            node._parents = ()
            node._backward = None
        self._consumed = True

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _result(data, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def safe_div(num, den, fallback) -> Tensor:
    """``num / den`` where ``den > 0``; ``fallback`` (a constant) elsewhere."""
    num, den = as_tensor(num), as_tensor(den)
    ok = den.data > 0
    _log_kink(ok)
    safe_den = np.where(ok, den.data, 1.0)
    q = num.data / safe_den
    out = np.where(ok, q, fallback)

    def backward(g):
        gn = np.where(ok, g / safe_den, 0.0)
        gd = np.where(ok, -g * q / safe_den, 0.0)
        return _unbroadcast(gn, num.shape), _unbroadcast(gd, den.shape)
    return _result(out, (num, den), backward)


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    mask = a.data > 0
    _log_kink(mask)
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    _log_kink(pick_a)
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    _log_kink(pick_a)
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    _log_kink(inside)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape ops ----------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _result(a.data[idx], (a,), backward)


def put(base, idx, values) -> Tensor:
    """Functional ``base[idx] = values``; ``idx`` must not repeat locations."""
    base, values = as_tensor(base), as_tensor(values)
    out = base.data.copy()
    out[idx] = values.data

    def backward(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, _unbroadcast(g[idx], values.shape)
    return _result(out, (base, values), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.moveaxis(g, axis, 0)))


def broadcast_to(a, shape) -> Tensor:
    old = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, old),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)
    return _result(table.data[ids], (table,), backward)


# linear algebra and normalisers --------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
        elif bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _result(ad @ bd, (a, b), backward)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    s = _softmax_np(a.data, axis)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over ``(..., S, dh)`` with a causal mask."""
    S, dh = q.shape[-2], q.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    future = np.triu(np.ones((S, S), dtype=bool), k=1)
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    s[..., future] = -np.inf
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    qd, kd, vd = q.data, k.data, v.data

    def backward(g):
        dp = g @ np.swapaxes(vd, -1, -2)
        dv = np.swapaxes(p, -1, -2) @ g
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= scale
        return ds @ kd, np.swapaxes(ds, -1, -2) @ qd, dv
    return _result(p @ vd, (q, k, v), backward)


def rms_norm(x, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        return dx, dgain
    return _result(xhat * gd, (x, gain), backward)


def softmax_rows(x):
    """Row-wise softmax (max-subtracted). Works on arrays and tensors."""
    if isinstance(x, Tensor):
        return softmax(x, axis=-1)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    return _softmax_np(x, axis=-1)


# dense stacks ------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DenseStack:
    """Fully connected layers with ReLU between them and none after the last.

    ``dims`` lists the widths from input to output, so a stack with
    ``layer_count`` layers has ``layer_count + 1`` dims.
    """

    def __init__(self, dims: Sequence[int], rng: np.random.Generator | None = None):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"bad layer dims {dims}")
        self.dims = dims
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = [parameter(glorot_uniform(rng, i, o)) for i, o in zip(dims[:-1], dims[1:])]
        self.biases = [parameter(np.zeros(o)) for o in dims[1:]]

    @classmethod
    def build(cls, in_dim: int, out_dim: int, hidden: int, layer_count: int = 3,
              rng: np.random.Generator | None = None) -> "DenseStack":
        if layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        return cls([in_dim] + [hidden] * (layer_count - 1) + [out_dim], rng)

    @property
    def layer_count(self) -> int:
        return len(self.dims) - 1

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params

    def __call__(self, x) -> Tensor:
        return dense_forward(self, x)


def dense_forward(stack: DenseStack, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != stack.in_dim:
        raise ValueError(f"input width {x.shape[-1]} does not match stack input {stack.in_dim}")
    n = stack.layer_count
    for i, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        x = matmul(x, w) + b
        if i < n - 1:
            x = relu(x)
    return x


def dense_forward_reference(stack: DenseStack, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass used to cross-check :func:`dense_forward`."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        h = np.einsum("...i,ij->...j", h, w.data) + b.data
        if i < stack.layer_count - 1:
            h = np.maximum(h, 0.0)
    return h


# snapshots -----------------------------------------------------------------------

MAGIC = b"DISTIME1"


def stack_to_bytes(stack: DenseStack) -> bytes:
    """``DISTIME1`` | u32 n_dims | u32 dims... | f64 params (W0, b0, W1, b1, ...)."""
    parts = [MAGIC, struct.pack("<I", len(stack.dims)),
             np.asarray(stack.dims, dtype="<u4").tobytes()]
    parts += [p.data.astype("<f8").tobytes() for p in stack.parameters()]
    return b"".join(parts)


def stack_from_bytes(buf: bytes) -> DenseStack:
    if buf[:8] != MAGIC:
        raise ValueError("not a DISTIME1 snapshot")
    (n,) = struct.unpack_from("<I", buf, 8)
    dims = np.frombuffer(buf, dtype="<u4", count=n, offset=12).tolist()
    stack = DenseStack(dims)
    offset = 12 + 4 * n
    for p in stack.parameters():
        count = p.data.size
        p.data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(p.shape)
        offset += 8 * count
    if offset != len(buf):
        raise ValueError("snapshot has trailing or missing bytes")
    return stack


def save_stack(stack: DenseStack, path) -> None:
    with open(path, "wb") as fh:
        fh.write(stack_to_bytes(stack))


def load_stack(path) -> DenseStack:
    with open(path, "rb") as fh:
        return stack_from_bytes(fh.read())


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype=np.float64)
    return (struct.pack("<I", t.ndim) + np.asarray(t.shape, dtype="<u4").tobytes()
            + t.astype("<f8").tobytes())


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", buf, 0)
    shape = tuple(np.frombuffer(buf, dtype="<u4", count=ndim, offset=4).tolist())
    count = int(np.prod(shape)) if shape else 1
    offset = 4 + 4 * ndim
    if offset + 8 * count != len(buf):
        raise ValueError("tensor block size mismatch")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)


def pack_sections(sections: Iterable[tuple[str, bytes]]) -> bytes:
    """``DISTIME1`` | u32 n | n x (4-byte tag | u32 length | payload)."""
    sections = list(sections)
    out = [MAGIC, struct.pack("<I", len(sections))]
    for tag, payload in sections:
        raw = tag.encode("ascii")
        if len(raw) > 4:
            raise ValueError(f"section tag too long: {tag}")
        out += [raw.ljust(4, b"\0"), struct.pack("<I", len(payload)), payload]
    return b"".join(out)


def unpack_sections(buf: bytes) -> list[tuple[str, bytes]]:
    if buf[:8] != MAGIC:
        raise ValueError("not a DISTIME1 file")
    (n,) = struct.unpack_from("<I", buf, 8)
    offset, sections = 12, []
    for _ in range(n):
        tag = buf[offset:offset + 4].rstrip(b"\0").decode("ascii")
        (length,) = struct.unpack_from("<I", buf, offset + 4)
        offset += 8
        sections.append((tag, buf[offset:offset + length]))
        offset += length
    if offset != len(buf):
        raise ValueError("trailing bytes after last section")
    return sections


# gradient checking ---------------------------------------------------------------

def _collect_params(model) -> list[Tensor]:
    if isinstance(model, Tensor):
        return [model]
    if hasattr(model, "parameters"):
        params = model.parameters()
    else:
        params = list(model)
    return [p[1] if isinstance(p, tuple) else p for p in params]


def finite_difference_check(model, loss_fn: Callable[[], Tensor], n_coords: int = 100,
                            step: float = 1e-5, seed: int = 0, max_tries: int = 20,
                            records: list | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``n_coords`` coordinates are drawn uniformly over all parameter entries.
    A coordinate is redrawn when any relu/min/max/clip branch decision differs
    between the base point and either side of the stencil, so kinks are never
    differenced across. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.

    If ``records`` is a list, one ``(param_index, index, analytic, numeric,
    rel_error)`` tuple is appended per checked coordinate.
    """
    params = _collect_params(model)
    sizes = np.array([p.data.size for p in params], dtype=np.int64)
    total = int(sizes.sum())
    if total == 0 or n_coords <= 0:
        return 0.0

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def evaluate():
        with no_grad(), record_kinks() as kinks:
            value = float(loss_fn().data)
        return value, kinks

    _, base_kinks = evaluate()
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for _ in range(n_coords):
        for _attempt in range(max_tries):
            flat = int(rng.integers(total))
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            local = np.unravel_index(flat - offsets[k], params[k].shape)
            p = params[k]
            orig = p.data[local]
            p.data[local] = orig + step
            plus, kp = evaluate()
            p.data[local] = orig - step
            minus, km = evaluate()
            p.data[local] = orig
            if _same_branches(base_kinks, kp) and _same_branches(base_kinks, km):
                break
        else:
            raise RuntimeError("could not find a coordinate away from kinks")
        numeric = (plus - minus) / (2 * step)
        analytic = float(grads[k][local])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        rel = abs(analytic - numeric) / denom
        if records is not None:
            records.append((k, tuple(int(i) for i in local), analytic, numeric, rel))
        worst = max(worst, rel)
    return worst


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
