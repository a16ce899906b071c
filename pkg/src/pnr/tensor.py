"""Dense float64 matrices, SPD solves, the PNRM file format and a reverse-mode tape.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The tape
records operations on :class:`Node` handles (define-by-run) and is rebuilt for
every training step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, SingularMatrixError

PNRM_MAGIC = b"PNRM"
PNRM_VERSION = 1
_PNRM_HEADER = struct.Struct("<4sIII")

UNARY_OPS = ("tanh", "sigmoid", "relu", "abs", "softplus", "log")
BINARY_OPS = ("add", "sub", "mul")


def as_matrix(x, name="matrix"):
    """Coerce ``x`` to a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} contains NaN or Inf")
    return a


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _sigmoid(x):
    # split by sign so that exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_UNARY_FORWARD = {
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "relu": lambda x: np.maximum(x, 0.0),
    "abs": np.abs,
    "softplus": _softplus,
    "log": np.log,
}


def map_elementwise(op, a, b=None, c=None):
    """Apply an elementwise operation.

    ``op`` is one of ``add``, ``sub``, ``mul`` (binary), ``scale`` (needs the
    scalar ``c``) or one of the unary names in :data:`UNARY_OPS`.
    """
    a = np.asarray(a, dtype=np.float64)
    if op in BINARY_OPS:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        b = np.asarray(b, dtype=np.float64)
        _require_same_shape(a, b, op)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op == "scale":
        if c is None:
            raise ContractError("scale needs a scalar factor")
        return float(c) * a
    try:
        return _UNARY_FORWARD[op](a)
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# Cholesky


def cholesky_factor(A):
    """Lower Cholesky factor of the symmetrized ``A``; supports stacks ``(..., n, n)``.

    Raises :class:`SingularMatrixError` carrying the 0-based pivot index when a
    pivot is non-positive or at round-off level (``10 n eps`` times the largest
    diagonal entry), i.e. when the matrix is numerically rank deficient.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"cholesky: matrix must be square, got {A.shape}")
    S = 0.5 * (A + np.swapaxes(A, -1, -2))
    n = S.shape[-1]
    L = np.zeros_like(S)
    floor = 10 * n * np.finfo(np.float64).eps * np.max(np.abs(np.diagonal(S, axis1=-2, axis2=-1)), axis=-1)
    for j in range(n):
        row = L[..., j, :j]
        pivot = S[..., j, j] - np.sum(row * row, axis=-1)
        bad = ~(pivot > floor)
        if np.any(bad):
            raise SingularMatrixError(
                f"non-positive pivot at index {j} during Cholesky factorization", pivot=j
            )
        ljj = np.sqrt(pivot)
        L[..., j, j] = ljj
        if j + 1 < n:
            below = S[..., j + 1 :, j] - np.einsum("...ik,...k->...i", L[..., j + 1 :, :j], row)
            L[..., j + 1 :, j] = below / ljj[..., None]
    return L


def cholesky_substitute(L, B):
    """Solve ``L Lᵀ X = B`` given the lower factor ``L``; stacks allowed."""
    n = L.shape[-1]
    Y = np.array(B, dtype=np.float64, copy=True)
    for i in range(n):
        if i:
            Y[..., i, :] -= np.einsum("...k,...km->...m", L[..., i, :i], Y[..., :i, :])
        Y[..., i, :] /= L[..., i, i][..., None]
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            Y[..., i, :] -= np.einsum("...k,...km->...m", L[..., i + 1 :, i], Y[..., i + 1 :, :])
        Y[..., i, :] /= L[..., i, i][..., None]
    return Y


def cholesky_solve_spd(A, B):
    """Solve ``A X = B`` for symmetric positive definite ``A``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"cholesky_solve_spd: A must be square, got {A.shape}")
    if A.shape[0] != B.shape[0]:
        raise DimensionError(f"cholesky_solve_spd: A {A.shape} and B {B.shape} disagree")
    return cholesky_substitute(cholesky_factor(A), B)


# ---------------------------------------------------------------------------
# PNRM binary format


def encode_matrix(m):
    m = as_matrix(m)
    rows, cols = m.shape
    return _PNRM_HEADER.pack(PNRM_MAGIC, PNRM_VERSION, rows, cols) + m.astype("<f8").tobytes(order="C")


def decode_matrix(buf, offset=0):
    """Decode one PNRM matrix from ``buf`` at ``offset``; return (matrix, next offset)."""
    if len(buf) - offset < _PNRM_HEADER.size:
        raise FormatError("truncated PNRM header")
    magic, version, rows, cols = _PNRM_HEADER.unpack_from(buf, offset)
    if magic != PNRM_MAGIC:
        raise FormatError(f"bad PNRM magic {magic!r}")
    if version != PNRM_VERSION:
        raise FormatError(f"unsupported PNRM version {version}")
    start = offset + _PNRM_HEADER.size
    end = start + 8 * rows * cols
    if len(buf) < end:
        raise FormatError("truncated PNRM payload")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start)
    return data.reshape(rows, cols).astype(np.float64), end


def save_matrix(path, m):
    with open(path, "wb") as fh:
        fh.write(encode_matrix(m))


def load_matrix(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    m, end = decode_matrix(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after PNRM matrix")
    return m


# ---------------------------------------------------------------------------
# Reverse-mode tape

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray]]


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    value: np.ndarray
    tape: "Tape" = field(repr=False)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Record:
    kind: str
    inputs: tuple
    value: np.ndarray
    rule: BackwardRule | None
    requires_grad: bool


class Tape:
    """Define-by-run record of matrix operations."""

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self):
        return len(self._records)

    def _push(self, kind, value, inputs=(), rule=None, requires_grad=None):
        for node in inputs:
            if node.tape is not self:
                raise ContractError("node belongs to a different tape")
        if requires_grad is None:
            requires_grad = any(self._records[n.id].requires_grad for n in inputs)
        value = np.asarray(value, dtype=np.float64)
        self._records.append(_Record(kind, tuple(n.id for n in inputs), value, rule, requires_grad))
        return Node(len(self._records) - 1, value, self)

    def requires_grad(self, node):
        return self._records[node.id].requires_grad

    def value(self, node_id):
        return self._records[node_id].value

    def kind(self, node_id):
        return self._records[node_id].kind

    # leaves -------------------------------------------------------------

    def leaf(self, value):
        """A differentiable input."""
        return self._push("leaf", as_matrix(value), requires_grad=True)

    def const(self, value):
        """A constant input; no gradient flows to it (reported as zeros)."""
        return self._push("const", as_matrix(value), requires_grad=False)

    def detach(self, node):
        return self._push("const", node.value, requires_grad=False)

    # linear algebra -----------------------------------------------------

    def matmul(self, a, b):
        av, bv = a.value, b.value
        need_a, need_b = self.requires_grad(a), self.requires_grad(b)
        return self._push(
            "matmul",
            matmul(av, bv),
            (a, b),
            lambda g: (g @ bv.T if need_a else None, av.T @ g if need_b else None),
        )

    def elementwise(self, op, a, b=None, c=None):
        av = a.value
        if op in BINARY_OPS:
            if b is None:
                raise ContractError(f"{op} needs two operands")
            bv = b.value
            out = map_elementwise(op, av, bv)
            if op == "add":
                rule = lambda g: (g, g)
            elif op == "sub":
                rule = lambda g: (g, -g)
            else:
                rule = lambda g: (g * bv, g * av)
            return self._push(op, out, (a, b), rule)
        out = map_elementwise(op, av, c=c)
        if op == "scale":
            k = float(c)
            rule = lambda g: (k * g,)
        elif op == "tanh":
            rule = lambda g: (g * (1.0 - out * out),)
        elif op == "sigmoid":
            rule = lambda g: (g * out * (1.0 - out),)
        elif op == "relu":
            rule = lambda g: (g * (av > 0.0),)
        elif op == "abs":
            rule = lambda g: (g * np.sign(av),)
        elif op == "softplus":
            rule = lambda g: (g * _sigmoid(av),)
        elif op == "log":
            rule = lambda g: (g / av,)
        else:  # pragma: no cover - map_elementwise already rejected it
            raise ContractError(f"unknown elementwise op {op!r}")
        return self._push(op, out, (a,), rule)

    def add(self, a, b):
        return self.elementwise("add", a, b)

    def sub(self, a, b):
        return self.elementwise("sub", a, b)

    def mul(self, a, b):
        return self.elementwise("mul", a, b)

    def scale(self, a, c):
        return self.elementwise("scale", a, c=c)

    def tanh(self, a):
        return self.elementwise("tanh", a)

    def sigmoid(self, a):
        return self.elementwise("sigmoid", a)

    def relu(self, a):
        return self.elementwise("relu", a)

    def abs(self, a):
        return self.elementwise("abs", a)

    def softplus(self, a):
        return self.elementwise("softplus", a)

    def add_row(self, a, bias):
        """Add a 1×k row vector to every row of ``a`` (bias term)."""
        av, bv = a.value, bias.value
        if bv.shape != (1, av.shape[1]):
            raise DimensionError(f"add_row: bias {bv.shape} does not fit {av.shape}")
        return self._push("add_row", av + bv, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))

    # reductions and reshaping -------------------------------------------

    def sum(self, a):
        av = a.value
        return self._push("sum", np.array([[av.sum()]]), (a,), lambda g: (np.full(av.shape, g[0, 0]),))

    def mean(self, a):
        av = a.value
        k = 1.0 / av.size
        return self._push("mean", np.array([[av.mean()]]), (a,), lambda g: (np.full(av.shape, g[0, 0] * k),))

    def reshape(self, a, rows, cols):
        shape = a.value.shape
        if rows * cols != a.value.size:
            raise DimensionError(f"reshape: cannot view {shape} as ({rows}, {cols})")
        return self._push("reshape", a.value.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))

    def vstack(self, parts):
        values = [p.value for p in parts]
        if len({v.shape[1] for v in values}) != 1:
            raise DimensionError(f"vstack: column counts differ {[v.shape for v in values]}")
        cuts = np.cumsum([v.shape[0] for v in values])[:-1]
        return self._push("vstack", np.vstack(values), tuple(parts), lambda g: tuple(np.split(g, cuts, axis=0)))

    def hstack(self, parts):
        values = [p.value for p in parts]
        if len({v.shape[0] for v in values}) != 1:
            raise DimensionError(f"hstack: row counts differ {[v.shape for v in values]}")
        cuts = np.cumsum([v.shape[1] for v in values])[:-1]
        return self._push("hstack", np.hstack(values), tuple(parts), lambda g: tuple(np.split(g, cuts, axis=1)))

    # extension point ----------------------------------------------------

    def custom(self, value, inputs, backward_rule, kind="custom"):
        """Record an operation whose vector-Jacobian product is supplied by the caller.

        ``backward_rule(upstream)`` must return one gradient per input, each
        shaped like that input's value; this is checked during :meth:`backward`.
        """
        return self._push(kind, as_matrix(value, kind), tuple(inputs), backward_rule)

    # reverse pass -------------------------------------------------------

    def backward(self, loss):
        """Gradients of the scalar ``loss`` node w.r.t. every recorded node.

        Returns a dict ``node id -> gradient``; nodes not upstream of the loss,
        and constants, receive zeros.  A backward rule may return ``None`` for
        an input that does not require a gradient.
        """
        if loss.tape is not self:
            raise ContractError("loss node belongs to a different tape")
        if loss.value.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
        for nid in range(loss.id, -1, -1):
            rec = self._records[nid]
            g = grads.get(nid)
            if g is None or rec.rule is None or not rec.requires_grad:
                continue
            parts = rec.rule(g)
            if len(parts) != len(rec.inputs):
                raise ContractError(
                    f"{rec.kind} node {nid}: backward returned {len(parts)} gradients for {len(rec.inputs)} inputs"
                )
            for src, part in zip(rec.inputs, parts):
                if not self._records[src].requires_grad:
                    continue
                if part is None:
                    raise ContractError(f"{rec.kind} node {nid}: missing gradient for input node {src}")
                part = np.asarray(part, dtype=np.float64)
                expected = self._records[src].value.shape
                if part.shape != expected:
                    raise ContractError(
                        f"{rec.kind} node {nid}: gradient shape {part.shape} for input of shape {expected}"
                    )
                if src in grads:
                    grads[src] = grads[src] + part
                else:
                    grads[src] = part
        return {
            i: grads[i] if i in grads else np.zeros_like(rec.value) for i, rec in enumerate(self._records)
        }


def backward(tape, loss):
    return tape.backward(loss)
