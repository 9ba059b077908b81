"""Float64 dense types, similarity kernels, and a reverse-mode tape.

Everything downstream (losses, projection heads, diagnostics) runs on the
primitives here. All math is double precision so analytic gradients can be
checked against central finite differences to tight tolerances.

The tape is an append-only Wengert list over numpy arrays: each node stores
the forward value, one vector-Jacobian closure per parent, and a replay
closure that recomputes the value from parent values bit-identically. Nodes
are pushed in topological order, so a single reverse sweep propagates
adjoints. A tape has a single writer; build one tape per training step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateVector,
    DimensionMismatch,
    EmptyInput,
    NonFiniteValue,
    NonScalarOutput,
)

NORM_EPS = 1e-12

# Pre-softmax fill for padded entries. Finite (no inf arithmetic), yet
# exp(MASKED - anything representable) underflows to exactly 0.0.
MASKED = -1e30

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def as_f64(values, name: str = "array") -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class Vector:
    """A finite float64 vector; NaN/Inf are rejected at construction."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_f64(self.data, "vector")
        if arr.ndim != 1:
            raise DimensionMismatch(f"vector must be 1-d, got shape {arr.shape}")
        if arr.size == 0:
            raise EmptyInput("vector must be non-empty")
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return int(self.data.shape[0])

    def __len__(self) -> int:
        return self.dim


@dataclass(frozen=True)
class Matrix:
    """A finite float64 matrix stored row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(as_f64(self.data, "matrix"))
        if arr.ndim != 2:
            raise DimensionMismatch(f"matrix must be 2-d, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise EmptyInput("matrix must have positive dimensions")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, rows: int, cols: int, values) -> "Matrix":
        flat = as_f64(values, "matrix")
        if flat.ndim != 1 or flat.size != rows * cols:
            raise DimensionMismatch(
                f"expected {rows * cols} values for a {rows}x{cols} matrix, got {flat.size}"
            )
        return cls(flat.reshape(rows, cols))

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])


def _vector_like(x, name: str) -> np.ndarray:
    if isinstance(x, Vector):
        return x.data
    arr = as_f64(x, name)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-d, got shape {arr.shape}")
    return arr


def cosine_sim(a, b, strict: bool = True) -> float:
    """Cosine similarity of two equal-dimension vectors, clamped to [-1, 1].

    With ``strict=True`` (the default) a norm below 1e-12 raises
    :class:`DegenerateVector`; lenient mode returns 0.0 instead. Silent
    zeros would otherwise corrupt contrastive denominators downstream.
    """
    va = _vector_like(a, "a")
    vb = _vector_like(b, "b")
    if va.shape != vb.shape:
        raise DimensionMismatch(f"cosine_sim: dims {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na < NORM_EPS or nb < NORM_EPS:
        if strict:
            raise DegenerateVector(f"cosine_sim: norm below {NORM_EPS:g}")
        return 0.0
    c = float(np.dot(va, vb) / (na * nb))
    return max(-1.0, min(1.0, c))


def log_sum_exp(xs) -> float:
    """Stable log(sum(exp(xs))); never overflows for |x| <= 700."""
    arr = np.asarray(xs, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("log_sum_exp of an empty collection")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("log_sum_exp input contains NaN or Inf")
    m = float(np.max(arr))
    return m + math.log(float(np.sum(np.exp(arr - m))))


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

Vjp = Callable[[np.ndarray], np.ndarray]


class Tape:
    """Append-only record of array operations, differentiable in reverse."""

    def __init__(self) -> None:
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._values: list[np.ndarray] = []
        self._vjps: list[tuple[Vjp, ...]] = []
        self._replays: list[Callable[..., np.ndarray] | None] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _push(self, op, parents, value, vjps, replay) -> "Var":
        self._ops.append(op)
        self._parents.append(parents)
        self._values.append(value)
        self._vjps.append(vjps)
        self._replays.append(replay)
        return Var(self, len(self._ops) - 1)

    def leaf(self, value) -> "Var":
        """Record an input node; gradients are reported per leaf."""
        arr = np.array(as_f64(value, "leaf"), copy=True)
        return self._push("leaf", (), arr, (), None)

    def constant(self, value) -> "Var":
        """Like leaf but flagged as non-input; still gets a gradient slot."""
        arr = np.array(np.asarray(value, dtype=np.float64), copy=True)
        return self._push("const", (), arr, (), None)

    def value(self, var: "Var") -> np.ndarray:
        return self._values[var.index]

    def is_leaf(self, index: int) -> bool:
        return self._ops[index] == "leaf"

    def replay_matches(self) -> bool:
        """Recompute every node from its parents; True iff bit-identical."""
        recomputed: list[np.ndarray] = []
        for i, op in enumerate(self._ops):
            if op in ("leaf", "const"):
                recomputed.append(self._values[i])
                continue
            replay = self._replays[i]
            assert replay is not None
            args = [recomputed[p] for p in self._parents[i]]
            recomputed.append(replay(*args))
        for got, want in zip(recomputed, self._values):
            if got.shape != want.shape or got.tobytes() != want.tobytes():
                return False
        return True


@dataclass(frozen=True)
class Var:
    """Handle to one tape node."""

    tape: Tape
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        if isinstance(other, Var):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Var):
            return add(self, -other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(-self, float(other))

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("divide by a scalar constant only")
        return scale(self, 1.0 / float(other))


def _same_tape(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _require_shape(v: Var, ndim: int, op: str) -> np.ndarray:
    arr = v.value
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{op}: expected {ndim}-d operand, got shape {arr.shape}")
    return arr


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    va, vb = a.value, b.value
    if va.shape != vb.shape:
        raise DimensionMismatch(f"add: shapes {va.shape} vs {vb.shape}")
    return tape._push(
        "add", (a.index, b.index), va + vb,
        (lambda g: g, lambda g: g),
        lambda x, y: x + y,
    )


def add_const(a: Var, c) -> Var:
    """Add a constant array or scalar (no gradient through the constant)."""
    carr = np.asarray(c, dtype=np.float64)
    va = a.value
    if np.broadcast_shapes(va.shape, carr.shape) != va.shape:
        raise DimensionMismatch(f"add_const: constant {carr.shape} does not fit {va.shape}")
    return a.tape._push(
        "add_const", (a.index,), va + carr,
        (lambda g: g,),
        lambda x: x + carr,
    )


def mul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    va, vb = a.value, b.value
    if va.shape != vb.shape:
        raise DimensionMismatch(f"mul: shapes {va.shape} vs {vb.shape}")
    return tape._push(
        "mul", (a.index, b.index), va * vb,
        (lambda g, vb=vb: g * vb, lambda g, va=va: g * va),
        lambda x, y: x * y,
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape._push(
        "scale", (a.index,), a.value * c,
        (lambda g: g * c,),
        lambda x: x * c,
    )


def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    va = _require_shape(a, 2, "matmul")
    vb = _require_shape(b, 2, "matmul")
    if va.shape[1] != vb.shape[0]:
        raise DimensionMismatch(f"matmul: inner dims {va.shape} vs {vb.shape}")
    return tape._push(
        "matmul", (a.index, b.index), va @ vb,
        (lambda g, vb=vb: g @ vb.T, lambda g, va=va: va.T @ g),
        lambda x, y: x @ y,
    )


def transpose(a: Var) -> Var:
    va = _require_shape(a, 2, "transpose")
    return a.tape._push(
        "transpose", (a.index,), np.ascontiguousarray(va.T),
        (lambda g: np.ascontiguousarray(g.T),),
        lambda x: np.ascontiguousarray(x.T),
    )


def sum_all(a: Var) -> Var:
    va = a.value
    return a.tape._push(
        "sum_all", (a.index,), np.asarray(va.sum()),
        (lambda g, shape=va.shape: np.full(shape, float(g)),),
        lambda x: np.asarray(x.sum()),
    )


def sum_rows(a: Var) -> Var:
    """Row sums of a 2-d array: (B, K) -> (B,)."""
    va = _require_shape(a, 2, "sum_rows")
    return a.tape._push(
        "sum_rows", (a.index,), va.sum(axis=1),
        (lambda g, k=va.shape[1]: np.repeat(g[:, None], k, axis=1),),
        lambda x: x.sum(axis=1),
    )


def add_rowvec(a: Var, v: Var) -> Var:
    """Add a length-C vector to every row of a (B, C) matrix."""
    tape = _same_tape(a, v)
    va = _require_shape(a, 2, "add_rowvec")
    vv = _require_shape(v, 1, "add_rowvec")
    if va.shape[1] != vv.shape[0]:
        raise DimensionMismatch(f"add_rowvec: {va.shape} vs {vv.shape}")
    return tape._push(
        "add_rowvec", (a.index, v.index), va + vv[None, :],
        (lambda g: g, lambda g: g.sum(axis=0)),
        lambda x, y: x + y[None, :],
    )


def select_cols(a: Var, idx) -> Var:
    """Pick a[i, idx[i]] for every row i; idx is a constant int array."""
    va = _require_shape(a, 2, "select_cols")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (va.shape[0],):
        raise DimensionMismatch(f"select_cols: index shape {idx.shape} for {va.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= va.shape[1]):
        raise DimensionMismatch("select_cols: index out of range")
    rows = np.arange(va.shape[0])

    def vjp(g, shape=va.shape, rows=rows, idx=idx):
        out = np.zeros(shape)
        out[rows, idx] = g
        return out

    return a.tape._push(
        "select_cols", (a.index,), va[rows, idx], (vjp,),
        lambda x, rows=rows, idx=idx: x[rows, idx],
    )


def stack_cols(vs: Sequence[Var]) -> Var:
    """Stack equal-length 1-d vars into columns: k vars of (B,) -> (B, k)."""
    if not vs:
        raise EmptyInput("stack_cols of nothing")
    tape = _same_tape(*vs)
    vals = [_require_shape(v, 1, "stack_cols") for v in vs]
    n = vals[0].shape[0]
    if any(v.shape[0] != n for v in vals):
        raise DimensionMismatch("stack_cols: unequal lengths")
    vjps = tuple((lambda g, k=k: g[:, k]) for k in range(len(vs)))
    return tape._push(
        "stack_cols", tuple(v.index for v in vs), np.stack(vals, axis=1), vjps,
        lambda *xs: np.stack(xs, axis=1),
    )


def stack_scalars(vs: Sequence[Var]) -> Var:
    """Collect k scalar vars into a (k,) vector."""
    if not vs:
        raise EmptyInput("stack_scalars of nothing")
    tape = _same_tape(*vs)
    vals = [_require_shape(v, 0, "stack_scalars") for v in vs]
    vjps = tuple((lambda g, k=k: np.asarray(g[k])) for k in range(len(vs)))
    return tape._push(
        "stack_scalars", tuple(v.index for v in vs), np.stack(vals), vjps,
        lambda *xs: np.stack(xs),
    )


def diag(a: Var) -> Var:
    """Main diagonal of a square matrix: (B, B) -> (B,)."""
    va = _require_shape(a, 2, "diag")
    if va.shape[0] != va.shape[1]:
        raise DimensionMismatch(f"diag needs a square matrix, got {va.shape}")
    n = va.shape[0]

    def vjp(g, n=n):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return out

    return a.tape._push(
        "diag", (a.index,), np.ascontiguousarray(np.diagonal(va)), (vjp,),
        lambda x: np.ascontiguousarray(np.diagonal(x)),
    )


def concat_cols(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    va = _require_shape(a, 2, "concat_cols")
    vb = _require_shape(b, 2, "concat_cols")
    if va.shape[0] != vb.shape[0]:
        raise DimensionMismatch(f"concat_cols: {va.shape} vs {vb.shape}")
    k1 = va.shape[1]
    return tape._push(
        "concat_cols", (a.index, b.index), np.concatenate([va, vb], axis=1),
        (lambda g, k1=k1: g[:, :k1], lambda g, k1=k1: g[:, k1:]),
        lambda x, y: np.concatenate([x, y], axis=1),
    )


def log(a: Var) -> Var:
    va = a.value
    if np.any(va <= 0.0):
        raise NonFiniteValue("log of a non-positive value")
    return a.tape._push(
        "log", (a.index,), np.log(va),
        (lambda g, va=va: g / va,),
        lambda x: np.log(x),
    )


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._push(
        "exp", (a.index,), out,
        (lambda g, out=out: g * out,),
        lambda x: np.exp(x),
    )


def _lse(arr: np.ndarray, axis=None) -> np.ndarray:
    if axis is None:
        m = np.max(arr)
        return np.asarray(np.log(np.sum(np.exp(arr - m))) + m)
    m = np.max(arr, axis=axis, keepdims=True)
    return np.log(np.sum(np.exp(arr - m), axis=axis)) + np.squeeze(m, axis=axis)


def logsumexp_rows(a: Var) -> Var:
    """Stable per-row log-sum-exp: (B, K) -> (B,).

    Entries filled with MASKED contribute exactly zero weight; a row must
    contain at least one genuine (non-masked) entry.
    """
    va = _require_shape(a, 2, "logsumexp_rows")
    if va.shape[1] == 0:
        raise EmptyInput("logsumexp_rows over zero columns")
    out = _lse(va, axis=1)

    def vjp(g, va=va, out=out):
        return g[:, None] * np.exp(va - out[:, None])

    return a.tape._push(
        "logsumexp_rows", (a.index,), out, (vjp,),
        lambda x: _lse(x, axis=1),
    )


def logsumexp_all(a: Var) -> Var:
    va = a.value
    if va.size == 0:
        raise EmptyInput("logsumexp_all of an empty array")
    out = _lse(va)

    def vjp(g, va=va, out=out):
        return float(g) * np.exp(va - out)

    return a.tape._push(
        "logsumexp_all", (a.index,), out, (vjp,),
        lambda x: _lse(x),
    )


def l2_normalize_rows(a: Var) -> Var:
    """Scale every row of a (B, d) matrix to unit L2 norm."""
    va = _require_shape(a, 2, "l2_normalize_rows")
    norms = np.linalg.norm(va, axis=1)
    if np.any(norms < NORM_EPS):
        raise DegenerateVector("l2_normalize_rows: a row has (near-)zero norm")
    out = va / norms[:, None]

    def vjp(g, out=out, norms=norms):
        return (g - out * np.sum(g * out, axis=1, keepdims=True)) / norms[:, None]

    def replay(x):
        return x / np.linalg.norm(x, axis=1)[:, None]

    return a.tape._push("l2_normalize_rows", (a.index,), out, (vjp,), replay)


def gelu(a: Var) -> Var:
    """Smooth GELU (tanh form) with its exact analytic derivative."""
    va = a.value
    inner = _GELU_K * (va + _GELU_C * va ** 3)
    t = np.tanh(inner)
    out = 0.5 * va * (1.0 + t)

    def vjp(g, va=va, t=t):
        d_inner = _GELU_K * (1.0 + 3.0 * _GELU_C * va ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * va * (1.0 - t ** 2) * d_inner)

    def replay(x):
        ti = np.tanh(_GELU_K * (x + _GELU_C * x ** 3))
        return 0.5 * x * (1.0 + ti)

    return a.tape._push("gelu", (a.index,), out, (vjp,), replay)


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar output node.

    Returns a gradient for every leaf in the tape, keyed by node index.
    Leaves that do not influence the output get an exact-zero gradient.
    """
    if output.tape is not tape:
        raise ValueError("output node belongs to a different tape")
    if tape._values[output.index].shape != ():
        raise NonScalarOutput(
            f"backward needs a scalar output, got shape {tape._values[output.index].shape}"
        )
    adjoints: list[np.ndarray | None] = [None] * (output.index + 1)
    adjoints[output.index] = np.ones(())
    for i in range(output.index, -1, -1):
        g = adjoints[i]
        if g is None:
            continue
        for p, vjp in zip(tape._parents[i], tape._vjps[i]):
            contrib = vjp(g)
            adjoints[p] = contrib if adjoints[p] is None else adjoints[p] + contrib
    grads: dict[int, np.ndarray] = {}
    for i in range(len(tape)):
        if tape._ops[i] != "leaf":
            continue
        if i <= output.index and adjoints[i] is not None:
            grads[i] = np.asarray(adjoints[i], dtype=np.float64)
        else:
            grads[i] = np.zeros_like(tape._values[i])
    return grads


def gradients(tape: Tape, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a scalar output with respect to selected leaves."""
    table = backward(tape, output)
    out = []
    for v in wrt:
        if not tape.is_leaf(v.index):
            raise ValueError(f"node {v.index} is not a leaf")
        out.append(table[v.index])
    return out


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def central_difference(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, per element."""
    x = np.array(np.asarray(x, dtype=np.float64), copy=True)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
        it.iternext()
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Worst-case |a - n| / max(|a|, |n|, floor) over all elements.

    The floor keeps finite-difference roundoff on near-zero components from
    registering as a large relative discrepancy.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionMismatch(f"gradient shapes {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
