"""Dense tensors with a reverse-mode tape, Adam, and a finite-difference checker.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`. When a
:class:`Tape` is active and any input requires a gradient, the op records a
backward rule on it. ``Tape.backward(loss)`` replays the rules in reverse.

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), labels)
    tape.backward(loss)
    w.grad  # dloss/dw
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    pass


class NumericGuardError(ArithmeticError):
    pass


class ConfigurationError(ValueError):
    pass


class Tensor:
    """A float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the named functions below are the primary surface
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered log of differentiable ops.

    Usable as a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    _local = threading.local()

    def __init__(self) -> None:
        self.records: list[_Record] = []

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    @classmethod
    def active(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, out, inputs, backward, op) -> None:
        self.records.append(_Record(out, tuple(inputs), backward, op))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        for rec in self.records:
            rec.out.grad = None
            for t in rec.inputs:
                t.grad = None
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g_out = rec.out.grad
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=inp.data.dtype).reshape(inp.shape)
                inp.grad = g if inp.grad is None else inp.grad + g


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = Tape.active()
    if needs and tape is not None:
        tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from e
    return _emit(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from e
    return _emit(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _emit(data, (a,), lambda g: (g * data,), "exp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def scale_rows(x: Tensor, r: Tensor) -> Tensor:
    """Multiply row ``i`` of a (batch, dim) tensor by ``r[i]``."""
    if x.data.ndim != 2 or r.data.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows needs (n, d) and (n,), got {x.shape} and {r.shape}")
    col = r.data[:, None]
    return _emit(
        x.data * col,
        (x, r),
        lambda g: (g * col, (g * x.data).sum(axis=1)),
        "scale_rows",
    )


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape),), "sum")


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(parts)
    sizes = [p.shape[axis] for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot concat shapes {[p.shape for p in parts]}") from e
    cuts = np.cumsum(sizes)[:-1]
    return _emit(data, parts, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, dim: int, dtype=np.float32) -> "BatchNormStats":
        return cls(np.zeros(dim, dtype=dtype), np.ones(dim, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, train: bool) -> Tensor:
    """Batch normalisation over axis 0.

    Train mode uses batch statistics and updates ``stats`` in place (running
    variance is the unbiased estimate); eval mode uses ``stats`` untouched.
    """
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm shapes: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    g_, b_ = gamma.data, beta.data
    if train:
        if n < 2:
            raise ConfigurationError("batchnorm in train mode needs batch size >= 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = stats.momentum
        stats.mean[...] = (1 - m) * stats.mean + m * mu
        stats.var[...] = (1 - m) * stats.var + m * var * (n / (n - 1))
    else:
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv_std
    out = xhat * g_ + b_

    def backward(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * g_
        if train:
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _emit(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------- similarity

def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D tensors; raises on a zero vector."""
    if u.data.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_similarity needs equal 1-D shapes, got {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u.data), np.linalg.norm(v.data)
    if nu == 0 or nv == 0:
        raise NumericGuardError("cosine similarity of a zero-norm vector")
    dot = float(u.data @ v.data)
    s = dot / (nu * nv)

    def backward(g):
        du = g * (v.data / (nu * nv) - s * u.data / nu**2)
        dv = g * (u.data / (nu * nv) - s * v.data / nv**2)
        return du, dv

    return _emit(np.asarray(s, dtype=u.dtype), (u, v), backward, "cosine")


def cosine_matrix(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise cosine similarities: ``out[i, j] = cos(x_i, y_j)``."""
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"cosine_matrix shape mismatch: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x.data, axis=1, keepdims=True)
    ny = np.linalg.norm(y.data, axis=1, keepdims=True)
    if np.any(nx == 0) or np.any(ny == 0):
        raise NumericGuardError("cosine similarity of a zero-norm row")
    xn, yn = x.data / nx, y.data / ny
    s = xn @ yn.T

    def backward(g):
        gxn = g @ yn
        gyn = g.T @ xn
        dx = (gxn - xn * (gxn * xn).sum(axis=1, keepdims=True)) / nx
        dy = (gyn - yn * (gyn * yn).sum(axis=1, keepdims=True)) / ny
        return dx, dy

    return _emit(s, (x, y), backward, "cosine_matrix")


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, labels]).mean()

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1
        return (g * p / n,)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_ce")


# ---------------------------------------------------------------- Adam

class OptimizerError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p.data)
            st.v[k] = np.zeros_like(p.data)
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters whose gradient is ``None`` are treated as having zero gradient.
    """
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {k!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    per_input: list[float]
    tolerance: float

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Iterable[np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*tensors)`` against central differences.

    Inputs are promoted to float64. The relative error of entry ``k`` is
    ``|a_k - n_k| / max(|a_k|, |n_k|, 1e-3 * G)`` where ``G`` is the largest
    numeric gradient magnitude across all inputs; the floor keeps entries that
    are analytically zero (e.g. a bias feeding batch norm) from dividing noise
    by noise.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f_at() -> float:
        return float(fn(*[Tensor(a) for a in arrays]).data)

    numeric = []
    for a in arrays:
        num = np.zeros_like(a)
        flat, nflat = a.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f_at()
            flat[i] = orig - step
            lo = f_at()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * step)
        numeric.append(num)

    scale = max([float(np.abs(n).max()) for n in numeric if n.size] + [1e-8])
    floor = 1e-3 * scale
    per_input = []
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            per_input.append(0.0)
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        per_input.append(float((np.abs(a - n) / denom).max()))
    worst = max(per_input, default=0.0)
    return GradCheckReport(bool(worst < tolerance), worst, per_input, tolerance)
