"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op that touches a tensor with ``requires_grad`` records a
:class:`TapeNode` carrying a monotonically increasing sequence number, so
the nodes reachable from a loss, sorted by sequence, form an append-only,
topologically ordered tape. :func:`backward` replays that tape in reverse.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ContractError(Exception):
    """Raised when a caller violates an op's precondition."""


class ShapeError(ValueError):
    pass


_seq = itertools.count()
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class TapeNode:
    __slots__ = ("op", "inputs", "backward", "seq", "out_id")

    def __init__(self, op: str, inputs: tuple, backward: Callable, out_id: int):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_seq)
        self.out_id = out_id

    def __repr__(self):
        return f"TapeNode({self.op}, seq={self.seq})"


class Tensor:
    """A float64 array with an optional lazily allocated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> list[float]:
        """Row-major flat list of the values."""
        return self.data.ravel().tolist()

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._node = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = TapeNode(op, inputs, backward, id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; ``b`` may be a constant."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=DTYPE)

        def bw_const(g):
            return (_unbroadcast(g * c, a.shape),)

        return _record("mul_const", a.data * c, (a,), bw_const)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _record("relu", np.where(pos, x.data, 0.0), (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _record("tanh", y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", y, (x,), bw)


# --- reductions and shape ----------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _record("reshape", x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _record("transpose", x.data.transpose(axes), (x,), bw)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows ``table[idx]``; gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _record("take_rows", table.data[idx], (table,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _record("stack", np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes batch.

    ``b`` may be a plain matrix shared across the batch of ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    flat = b.ndim == 2 and a.ndim > 2

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if flat:
        # one 2-D GEMM instead of a stack of small ones
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _record("matmul", out, (a, b), bw)


# --- normalization and probabilities -----------------------------------------


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (broadcastable boolean, True = allowed) forces excluded entries
    to probability exactly 0. Every row must keep at least one entry.
    """
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    # one refinement pass: removes the rounding in mu (constant rows center to exactly 0)
    mu = mu + (x.data - mu).mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _record("layer_norm", out, (x, gamma, beta), bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row softmax."""
    v = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, v)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    lp = log_softmax_np(z)
    rows = np.arange(t.shape[0])
    loss = -lp[rows, t].mean()

    def bw(g):
        p = np.exp(lp)
        p[rows, t] -= 1.0
        return ((g / t.shape[0]) * p.reshape(logits.shape),)

    return _record("cross_entropy", np.asarray(loss), (logits,), bw)


# --- backward ----------------------------------------------------------------


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=DTYPE)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return

    nodes: dict[int, TapeNode] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.seq in nodes:
            continue
        nodes[node.seq] = node
        stack.extend(node.inputs)

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = pending.pop(node.out_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


# --- finite differences ------------------------------------------------------


def grad_check(f: Callable, x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f(x)`` must return a scalar
    tensor and be deterministic. The relative error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ContractError(f"step h={h} outside [1e-6, 1e-4]")
    xs = [x] if isinstance(x, Tensor) else list(x)

    with no_grad():
        y0 = f(x).item()
        y1 = f(x).item()
    if y0 != y1:
        raise ContractError("grad_check needs a deterministic function (disable mask sampling)")

    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        backward(f(x))
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    finally:
        for t, (rg, gr) in zip(xs, saved):
            t.requires_grad, t.grad = rg, gr

    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(gflat[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst


# --- rng ---------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix_mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream: ``out_i = mix(seed + i * golden)``.

    The xorshift-multiply finalizer is a pure function of the counter, so
    draws vectorize and are bit-identical on every platform. Floats take the
    top 53 bits of each 64-bit output.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def __repr__(self):
        return f"Rng(seed={self.seed}, state={self.state})"

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        with np.errstate(over="ignore"):
            ctr = np.uint64(self.state) + np.arange(1, count + 1, dtype=np.uint64) * _GOLDEN
        self.state = (self.state + count * int(_GOLDEN)) & _MASK64
        out = _splitmix_mix(ctr)
        return int(out[0]) if n is None else out

    def random(self, shape=()) -> np.ndarray:
        """Uniform floats in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.next_u64(n) >> np.uint64(11)
        return (u.astype(np.float64) * (1.0 / 9007199254740992.0)).reshape(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def bernoulli(self, prob_one: float, shape=()) -> np.ndarray:
        """Boolean draws equal to True with probability ``prob_one``."""
        return self.random(shape) < prob_one

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.floor(self.random(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def subset(self, n: int, k: int) -> tuple[int, ...]:
        """Uniform ``k``-subset of ``range(n)``, sorted."""
        return tuple(sorted(int(i) for i in self.permutation(n)[:k]))

    def spawn(self, key) -> "Rng":
        """Independent child stream derived from ``(seed, key)``."""
        digest = hashlib.blake2b(f"{self.seed}:{key}".encode(), digest_size=8).digest()
        mixed = _splitmix_mix(np.array([int.from_bytes(digest, "little")], dtype=np.uint64))
        return Rng(int(mixed[0]))


def derive_seed(master_seed: int, key) -> int:
    return Rng(master_seed).spawn(key).seed


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
