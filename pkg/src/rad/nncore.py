"""Small float64 tensor library with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active on the current
thread; outside a tape every op is a plain numpy computation, which is what
evaluation code relies on.  All ops accept an optional leading batch shape.
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7

_state = threading.local()


class ShapeError(ValueError):
    pass


class LookupRangeError(IndexError):
    pass


class EmptyRetrievalError(ValueError):
    pass


class Tensor:
    """Dense float64 array that may take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar used by the model code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor.  ``grad`` always has the value's shape."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Tape:
    """Records differentiable ops executed on this thread while active.

    Execution order is a topological order of the graph, so ``backward``
    simply replays the record in reverse.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last ``backward`` target w.r.t. a recorded tensor."""
        if isinstance(t, Parameter):
            return t.grad
        return self._grads.get(id(t))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
        grads = self._grads
        grads.clear()
        grads[id(loss)] = np.ones_like(loss.data)
        for out, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is not None:
                fn(g)
        self.records = []


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _push_grad(t: Tensor, g: np.ndarray) -> None:
    """Accumulate ``g`` into ``t``'s gradient slot on the active tape."""
    if not t.requires_grad:
        return
    if isinstance(t, Parameter):
        t.grad += g
        return
    grads = _active_tape()._grads
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = np.array(g, dtype=np.float64, copy=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append((out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _push_grad(a, _unbroadcast(g, a.shape))
        _push_grad(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _push_grad(a, _unbroadcast(g, a.shape))
        _push_grad(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _push_grad(a, _unbroadcast(g * b.data, a.shape))
        _push_grad(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        _push_grad(x, 2.0 * x.data * g)

    return _result(x.data * x.data, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)

    def backward(g):
        _push_grad(x, g * s * (1.0 - s))

    return _result(s, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _push_grad(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


# ---------------------------------------------------------------- reductions / shape


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _push_grad(x, np.broadcast_to(g, x.shape).copy())

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _push_grad(x, np.broadcast_to(g / n, x.shape).copy())

    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
            _push_grad(p, piece)

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]

    def backward(g):
        for i, p in enumerate(parts):
            _push_grad(p, np.take(g, i, axis=axis))

    return _result(np.stack([p.data for p in parts], axis=axis), parts, backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        _push_grad(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


# ---------------------------------------------------------------- layers


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            _push_grad(a, g * bd)
            _push_grad(b, g * ad)
            return
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(-1, ad.shape[0]).sum(axis=0)
        if bd.ndim == 1:
            gb = gb.reshape(-1, bd.shape[0]).sum(axis=0)
        _push_grad(a, _unbroadcast(ga, ad.shape))
        _push_grad(b, _unbroadcast(gb, bd.shape))

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[..., n]`` and weight ``[m, n]``."""
    x = _as_tensor(x)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} does not fit weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not fit weight shape {weight.shape}")
    w, xd = weight.data, x.data
    out = xd @ w.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        _push_grad(x, g @ w)
        g2 = g.reshape(-1, w.shape[0])
        _push_grad(weight, g2.T @ xd.reshape(-1, w.shape[1]))
        if bias is not None:
            _push_grad(bias, g2.sum(axis=0))

    return _result(out, parents, backward)


def embedding_lookup(table: Tensor, index) -> Tensor:
    """Rows of ``table`` at integer ``index`` (any shape); output shape ``index.shape + (E,)``."""
    idx = np.asarray(index, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].flat[0]
        raise LookupRangeError(f"embedding index {int(bad)} out of range for table with {vocab} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _push_grad(table, full)

    return _result(table.data[idx], (table,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        _push_grad(x, p * (g - np.sum(g * p, axis=axis, keepdims=True)))

    return _result(p, (x,), backward)


def attention_pool(query, keys, W: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear softmax attention of ``query [..., E]`` over ``keys [..., K, E]``.

    Score of key k is ``keys[k] @ W @ query``; returns ``(weights [..., K], pooled [..., E])``.
    """
    query, keys = _as_tensor(query), _as_tensor(keys)
    if keys.shape[-2] == 0:
        raise EmptyRetrievalError("attention over an empty key set")
    e = query.shape[-1]
    if keys.shape[-1] != e or W.shape != (e, e):
        raise ShapeError(f"attention_pool: query {query.shape}, keys {keys.shape}, W {W.shape}")
    proj = matmul(W, reshape(query, query.shape + (1,)))          # [..., E, 1]
    scores = reshape(matmul(keys, proj), keys.shape[:-1])          # [..., K]
    weights = softmax(scores, axis=-1)
    pooled = reshape(matmul(reshape(weights, weights.shape[:-1] + (1,) + weights.shape[-1:]), keys),
                     query.shape)
    return weights, pooled


def fm_second_order(fields: Tensor, reduce: bool = True) -> Tensor:
    """Pairwise interaction ``sum_{i<j} <v_i, v_j>`` over fields ``[..., F, E]``.

    With ``reduce=False`` the per-dimension vector ``[..., E]`` is returned.
    """
    if fields.shape[-2] < 2:
        raise ValueError(f"factorization machine needs at least 2 fields, got {fields.shape[-2]}")
    s = sum_(fields, axis=-2)
    out = mul(0.5, sub(square(s), sum_(square(fields), axis=-2)))
    return sum_(out, axis=-1) if reduce else out


# ---------------------------------------------------------------- losses


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 labels ``y``."""
    p = _as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: prediction shape {p.shape} vs label shape {y.shape}")
    pc = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p.data >= PROB_EPS) & (p.data <= 1.0 - PROB_EPS)
    n = max(pc.size, 1)
    value = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    _check_finite(value, "bce_loss")

    def backward(g):
        _push_grad(p, g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n)

    return _result(np.asarray(value), (p,), backward)


def mse_loss(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shape {a.shape} vs shape {b.shape}")
    diff = a.data - b.data
    n = max(diff.size, 1)
    _check_finite(diff, "mse_loss")

    def backward(g):
        _push_grad(a, g * 2.0 * diff / n)
        _push_grad(b, -g * 2.0 * diff / n)

    return _result(np.asarray(np.mean(diff * diff)), (a, b), backward)


# ---------------------------------------------------------------- optimisation


class Adam:
    """Adam with bias correction.  ``step`` applies the update and zeroes grads."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.requires_grad:
                p.zero_grad()
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------- init / checks


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max abs difference between tape gradients and central differences.

    ``f`` is re-evaluated on the current values of ``inputs`` each call.
    """
    for t in inputs:
        t.requires_grad = True
        if isinstance(t, Parameter):
            t.zero_grad()
    with Tape() as tape:
        out = f()
        tape.backward(out)
    analytic = []
    for t in inputs:
        g = tape.grad_of(t)
        analytic.append(np.zeros_like(t.data) if g is None else np.array(g, copy=True))
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            worst = max(worst, abs((up - down) / (2 * h) - ga.reshape(-1)[i]))
        if isinstance(t, Parameter):
            t.zero_grad()
    return worst


# ---------------------------------------------------------------- checkpoints

WEIGHTS_MAGIC = b"RADW"
WEIGHTS_VERSION = 1


def save_parameters(params: Sequence[Parameter], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<BI", WEIGHTS_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_parameters(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out


def assign_parameters(params: Sequence[Parameter], values: dict[str, np.ndarray]) -> None:
    by_name = {p.name: p for p in params}
    missing = set(by_name) - set(values)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in by_name.items():
        if values[name].shape != p.shape:
            raise ShapeError(f"parameter {name}: checkpoint shape {values[name].shape} vs model {p.shape}")
        p.data[...] = values[name]
