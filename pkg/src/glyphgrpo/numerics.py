"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the policy needs are provided. Every op checks that its
output is finite and raises :class:`NumericError` otherwise.

Usage::

    with GradTape() as tape:
        tape.watch(params)
        loss = f(params)
    grads = tape.gradient(loss, params)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(ArithmeticError):
    """A non-finite value appeared in a computation."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """Immutable-by-convention wrapper around a float64 ndarray."""

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Op:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive ops.

    Only ops with at least one watched (or derived-from-watched) input are
    recorded. ``gradient`` replays them in exact reverse order.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, tensors: Tensor | Iterable[Tensor]) -> None:
        if isinstance(tensors, Tensor):
            tensors = [tensors]
        for t in tensors:
            self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, name, out, inputs, backward) -> None:
        if any(id(x) in self._tracked for x in inputs):
            self.ops.append(_Op(name, out, inputs, backward))
            self._tracked[id(out)] = out

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """d(sum of target)/d(source) for every source; zeros for unused sources."""
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for op in reversed(self.ops):
            g = grads.get(id(op.out))
            if g is None:
                continue
            for x, gx in zip(op.inputs, op.backward(g)):
                if gx is None or id(x) not in self._tracked:
                    continue
                if id(x) in grads:
                    grads[id(x)] = grads[id(x)] + gx
                else:
                    grads[id(x)] = gx
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _emit(name: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from {name}")
    out = Tensor(value)
    for tape in _TAPES:
        tape._record(name, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from e
    return _emit("add", v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from e
    return _emit("sub", v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from e
    return _emit(
        "mul",
        v,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        v = np.exp(a.data)
    return _emit("exp", v, (a,), lambda g: (g * v,))


def expm1(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        v = np.expm1(a.data)
    return _emit("expm1", v, (a,), lambda g: (g * (v + 1.0),))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.data)
    return _emit("log", v, (a,), lambda g: (g / a.data,))


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = 1.0 / np.sqrt(a.data)
    return _emit("rsqrt", v, (a,), lambda g: (-0.5 * g * v * v * v,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    v = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit("gelu", v, (a,), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    v = np.where(pick_a, a.data, b.data)
    return _emit(
        "minimum",
        v,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    v = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(v), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        v = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {a.shape} -> {shape}") from e
    return _emit("reshape", v, (a,), lambda g: (g.reshape(a.shape),))


def take(a, idx, axis: int) -> Tensor:
    """``np.take(a, idx, axis)`` with a scatter-add backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    v = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _emit("take", v, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")
    if b.ndim == 2:
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        v = (a2 @ b.data).reshape(a.shape[:-1] + (m,))

        def backward2(g):
            g2 = g.reshape(-1, m)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _emit("matmul", v, (a, b), backward2)
    v = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", v, (a, b), backward)


# ---------------------------------------------------------------------------
# probabilities


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax received non-finite logits")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    v = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(v) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", v, (a,), backward)


softmax_logprobs = log_softmax


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    v = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _emit("embedding", v, (table,), backward)


def pick(a, ids) -> Tensor:
    """Select ``a[..., ids[...]]`` along the last axis."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise DimensionError(f"pick: ids {ids.shape} vs {a.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[-1]):
        raise IndexError("pick index out of range")
    v = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ids[..., None], g[..., None], axis=-1)
        return (ga,)

    return _emit("pick", v, (a,), backward)


def rope(x, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs of ``x[..., T, D]`` by position angles."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"rope needs an even head dim, got {d}")
    cos, sin = rope_angles(positions, d, base)
    v = _rotate(x.data, cos, sin)
    return _emit("rope", v, (x,), lambda g: (_rotate(g, cos, -sin),))


def rope_angles(positions, d: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=DTYPE)
    freqs = base ** (-np.arange(0, d, 2, dtype=DTYPE) / d)
    ang = pos[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


# ---------------------------------------------------------------------------
# losses


@dataclass
class MaskedLoss:
    loss: Tensor
    n_tokens: int
    empty_mask: bool = False


def cross_entropy_masked(logprobs, targets, mask) -> MaskedLoss:
    """Mean NLL of ``targets`` under ``logprobs[..., V]`` over positions where ``mask``.

    An all-false mask yields a zero loss with ``empty_mask`` set.
    """
    logprobs = as_tensor(logprobs)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise DimensionError(f"mask {mask.shape} vs targets {targets.shape}")
    vocab = logprobs.shape[-1]
    if np.any(mask & ((targets < 0) | (targets >= vocab))):
        raise IndexError("target id out of vocabulary")
    n = int(mask.sum())
    if n == 0:
        return MaskedLoss(mul(sum(logprobs), 0.0), 0, empty_mask=True)
    safe = np.where(mask, targets, 0)
    picked = pick(logprobs, safe)
    return MaskedLoss(mul(sum(mul(picked, mask.astype(DTYPE))), -1.0 / n), n)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    The relative error of a parameter is ``|g - n| / max(|g| + |n|, 1e-12)``
    taken in the 2-norm over its checked entries. ``max_entries`` caps the
    number of coordinates probed per parameter (sampled with ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with GradTape() as tape:
        tape.watch(params)
        out = f()
    analytic = tape.gradient(out, params)
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    n_checked = 0
    for k, (p, g) in enumerate(zip(params, analytic)):
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = rng.choice(p.size, size=max_entries, replace=False)
        original = p.data
        num = np.empty(len(flat_idx))
        for j, i in enumerate(flat_idx):
            bumped = original.copy().reshape(-1)
            bumped[i] += eps
            p.data = bumped.reshape(original.shape)
            fp = f().item()
            bumped[i] -= 2 * eps
            p.data = bumped.reshape(original.shape)
            fm = f().item()
            num[j] = (fp - fm) / (2 * eps)
        p.data = original
        ana = g.reshape(-1)[flat_idx]
        err = np.linalg.norm(ana - num) / max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12)
        per_param[p.name or f"param{k}"] = float(err)
        n_checked += len(flat_idx)
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(worst, worst <= tol, per_param, n_checked)


# ---------------------------------------------------------------------------
# optimisation and randomness


class Adam:
    """Adam without weight decay; updates parameter arrays by rebinding ``.data``."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.95), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, (p, g) in enumerate(zip(self.params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if lr == 0.0:
                continue
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=DTYPE)}
        for k in range(len(self.params)):
            out[f"m{k}"] = self.m[k]
            out[f"v{k}"] = self.v[k]
        return out


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for the sub-stream ``stream`` of a 64-bit run seed."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))
