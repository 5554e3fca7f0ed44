"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded onto the :class:`GradGraph` that is active in the
current context (``with GradGraph() as g: ...``).  Outside a graph the ops
are plain numpy computations and nothing is recorded, which is what the
evaluation and generation paths use.

Only the primitives the transformer and the adapter need are provided.
There is no general broadcasting: the single exception is the row-wise
bias add.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, NumericError

_active_graph: contextvars.ContextVar["GradGraph | None"] = contextvars.ContextVar(
    "tiedlora_active_graph", default=None
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """A dense float64 array that may take part in a gradient graph.

    ``data`` is read-only; optimizers install new arrays with :meth:`assign`.
    ``grad`` accumulates with ``+=`` semantics across backward passes until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        t.data = _frozen(arr)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def assign(self, arr: np.ndarray) -> None:
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to tensor of shape {self.data.shape}")
        self.data = _frozen(arr)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradGraph:
    """Ordered tape of recorded primitive operations.

    Nodes are appended as ops execute, so the list is already in topological
    order.  Use as a context manager to make it the active recording target.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "GradGraph":
        self._tokens.append(_active_graph.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> bool:
        """Re-run every node's forward from its recorded inputs.

        Returns True when all outputs are reproduced bit for bit.  Only
        meaningful before any leaf has been reassigned by an optimizer.
        """
        for node in self.nodes:
            out = node.forward(*(t.data for t in node.inputs))
            ref = node.output.data
            if out.shape != ref.shape or np.ascontiguousarray(out).tobytes() != np.ascontiguousarray(ref).tobytes():
                return False
        return True


def _record(op: str, inputs: Sequence[Tensor], forward, backward, out=None) -> Tensor:
    if out is None:
        out = forward(*(t.data for t in inputs))
    graph = _active_graph.get()
    track = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(np.asarray(out), track)
    if track:
        graph.nodes.append(Node(op, tuple(inputs), result, forward, backward))
    return result


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    Accepts m×k @ k×n, m×k @ k (matrix-vector), and stacks of matrices whose
    leading (batch) dimensions are identical.
    """
    sa, sb = a.shape, b.shape
    ok = a.ndim >= 2 and b.ndim >= 1 and sa[-1] == sb[0 if b.ndim == 1 else -2]
    if ok and b.ndim == 1:
        ok = a.ndim == 2
    elif ok:
        ok = sa[:-2] == sb[:-2]
    if not ok:
        raise DimensionError(f"matmul shape mismatch: {sa} @ {sb}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        if B.ndim == 1:
            ga = np.outer(g, B) if need_a else None
            return ga, (A.T @ g if need_b else None)
        ga = g @ np.swapaxes(B, -1, -2) if need_a else None
        return ga, (np.swapaxes(A, -1, -2) @ g if need_b else None)

    return _record("matmul", (a, b), np.matmul, backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got {a.shape}")
    swap = lambda x: np.swapaxes(x, -1, -2)
    return _record("transpose", (a,), swap, lambda g: (swap(g),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    src = a.shape
    return _record("reshape", (a,), lambda x: x.reshape(shape), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _record(
        "permute", (a,), lambda x: np.transpose(x, axes), lambda g: (np.transpose(g, inverse),)
    )


def select(a: Tensor, index: int) -> Tensor:
    """Take slice ``a[index]`` along the leading axis."""
    if not 0 <= index < a.shape[0]:
        raise DimensionError(f"index {index} out of range for leading axis of {a.shape}")
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _record("select", (a,), lambda x: x[index], backward)


def scale_rows(s: Tensor, m: Tensor) -> Tensor:
    """``diag(s) @ m`` without building the diagonal matrix."""
    if s.ndim != 1 or m.ndim not in (1, 2) or s.shape[0] != m.shape[0]:
        raise DimensionError(f"scale_rows length mismatch: {s.shape} vs {m.shape}")
    S, M = s.data, m.data
    if M.ndim == 1:
        return _record("scale_rows", (s, m), np.multiply, lambda g: (g * M, g * S))
    return _record(
        "scale_rows",
        (s, m),
        lambda x, y: x[:, None] * y,
        lambda g: ((g * M).sum(axis=1), S[:, None] * g),
    )


_ELEMENTWISE = ("add", "sub", "mul", "bias")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise ``add``, ``sub``, ``mul``, or ``bias`` (add a vector to every row)."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}; expected one of {_ELEMENTWISE}")
    if op == "bias":
        if b.ndim != 1 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
            raise DimensionError(f"bias of shape {b.shape} not broadcastable onto {a.shape}")
        lead = tuple(range(a.ndim - 1))
        return _record("bias", (a, b), np.add, lambda g: (g, g.sum(axis=lead)))
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return _record("add", (a, b), np.add, lambda g: (g, g))
    if op == "sub":
        return _record("sub", (a, b), np.subtract, lambda g: (g, -g))
    A, B = a.data, b.data
    return _record("mul", (a, b), np.multiply, lambda g: (g * B, g * A))


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("bias", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (not differentiated)."""
    c = float(c)
    return _record("scale", (a,), lambda x: x * c, lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    return _record("sum", (a,), lambda x: np.asarray(x.sum()), lambda g: (np.broadcast_to(g, src).copy(),))


def mean(a: Tensor) -> Tensor:
    src, n = a.shape, a.size
    return _record(
        "mean", (a,), lambda x: np.asarray(x.mean()), lambda g: (np.full(src, float(g) / n),)
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which keeps gradient checks clean)."""

    def inner(x):
        return np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))

    def forward(x):
        return 0.5 * x * (1.0 + inner(x))

    X = a.data
    t = inner(X)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * dt),)

    return _record("gelu", (a,), forward, backward, out=0.5 * X * (1.0 + t))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} do not match features {d}")

    def stats(X):
        mu = X.mean(axis=-1, keepdims=True)
        xc = X - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return xc * rstd, rstd

    def forward(X, G, Bb):
        return stats(X)[0] * G + Bb

    G = gain.data
    xhat, rstd = stats(x.data)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * G
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (x, gain, bias), forward, backward, out=xhat * G + bias.data)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of ``(..., T, T)`` with future positions masked out."""
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"causal_softmax needs square trailing dims, got {scores.shape}")
    T = scores.shape[-1]
    future = np.triu(np.ones((T, T), dtype=bool), k=1)

    def forward(S):
        S = np.where(future, -np.inf, S)
        S = S - S.max(axis=-1, keepdims=True)
        e = np.exp(S)
        return e / e.sum(axis=-1, keepdims=True)

    P = forward(scores.data)

    def backward(g):
        return (P * (g - (g * P).sum(axis=-1, keepdims=True)),)

    return _record("causal_softmax", (scores,), forward, backward, out=P)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer index array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"index out of range for embedding table with {table.shape[0]} rows")
    src = table.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _record("embedding", (table,), lambda t: t[ids], backward)


def softmax_ce(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean cross-entropy over unmasked rows of a ``batch × V`` logit matrix."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_ce expects batch×V logits, got {logits.shape}")
    n, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (n,) or mask.shape != (n,):
        raise DimensionError(f"targets {targets.shape} / mask {mask.shape} do not match batch {n}")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("every position is masked; cross-entropy is undefined")
    live = targets[mask]
    if live.min() < 0 or live.max() >= V:
        raise DimensionError(f"target id out of range [0, {V})")
    safe_targets = np.where(mask, targets, 0)
    rows = np.arange(n)

    def forward(Z):
        shifted = Z - Z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        nll = lse - shifted[rows, safe_targets]
        return np.asarray(nll[mask].sum() / count)

    Z = logits.data

    def backward(g):
        shifted = Z - Z.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, safe_targets] -= 1.0
        p *= (mask / count)[:, None]
        return (p * float(g),)

    return _record("softmax_ce", (logits,), forward, backward)


# ---------------------------------------------------------------------------
# differentiation


def backward(graph: GradGraph, loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every requires_grad leaf."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in graph.nodes}
    if id(loss) not in produced:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones(()))
            return
        raise ContractError("loss was not produced by this graph")
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], p: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` w.r.t. every element of ``p``.

    ``p`` is perturbed in place (via :meth:`Tensor.assign`) and always
    restored, even if ``f`` raises.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    original = p.data
    work = original.astype(np.float64, copy=True).reshape(-1)
    grad = np.empty(work.size)

    def evaluate() -> float:
        p.data = _frozen(work.reshape(original.shape).copy())
        out = f(p)
        val = float(out.data) if isinstance(out, Tensor) else float(out)
        if not math.isfinite(val):
            raise NumericError(f"non-finite function value {val} during finite differencing")
        return val

    try:
        for i in range(work.size):
            x0 = work[i]
            work[i] = x0 + eps
            hi = evaluate()
            work[i] = x0 - eps
            lo = evaluate()
            work[i] = x0
            grad[i] = (hi - lo) / (2.0 * eps)
    finally:
        p.data = original
    return Tensor._wrap(grad.reshape(original.shape), False)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Worst elementwise gap between two arrays, scaled by their largest magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), floor)
    return float(np.abs(a - b).max(initial=0.0)) / denom
