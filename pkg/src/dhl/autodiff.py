"""Rank-2 float64 tensors with a define-by-run reverse-mode tape.

Every value is a 2-D ``numpy.ndarray`` (vectors are ``1 x n``, scalars
``1 x 1``). A :class:`Tape` records operations whose inputs live on it;
operations on untracked tensors are evaluated eagerly and record nothing,
which is what the finite-difference oracle relies on.

Broadcasting is limited to the rank-2 cases numpy resolves without new
axes: ``(1, n)`` rows, ``(m, 1)`` columns and ``(1, 1)`` scalars.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from dhl.errors import NonScalarRootError, NumericOverflowError, ShapeError

LOG_CLAMP = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], backward: BackwardFn | None):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only operation log for one forward pass.

    Node ids are indices into ``nodes`` and are therefore topologically
    ordered. ``gradients`` maps node id to an array of the node's shape and
    is filled by :func:`backward`.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> "Tensor":
        t = Tensor(value)
        t.tape = self
        t.node_id = self._append(_Node("leaf", (), None))
        return t

    def leaves(self, arrays: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {name: self.leaf(arr) for name, arr in arrays.items()}

    def grad(self, tensor: "Tensor") -> np.ndarray:
        """Gradient of the last backward root w.r.t. ``tensor`` (zeros if unreached)."""
        if tensor.tape is not self:
            raise ValueError("tensor is not recorded on this tape")
        g = self.gradients.get(tensor.node_id)
        return np.zeros_like(tensor.data) if g is None else g

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


class Tensor:
    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, value):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(value) -> Tensor:
    return Tensor(value)


def _tape_of(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs are recorded on different tapes")
            tape = t.tape
    return tape


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericOverflowError(f"{op} produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.tape = None
    result.node_id = None
    tape = _tape_of(inputs)
    if tape is not None:
        ids = tuple(-1 if t.tape is None else t.node_id for t in inputs)
        result.tape = tape
        result.node_id = tape._append(_Node(op, ids, backward))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    x, y = a.data, b.data
    return _emit("mul", (a, b), x * y,
                 lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    x, y = a.data, b.data
    return _emit("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))


# --------------------------------------------------------------- activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        y = np.tanh(x.data)
        return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))
    raise ValueError(f"unknown activation {kind!r}")


def tanh(x: Tensor) -> Tensor:
    return apply_activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return apply_activation(x, "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (x,), y, back)


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Row-mean of ``-sum_j target_j * log(max(probs_j, 1e-12))`` as a 1x1 tensor."""
    target = _lift(target)
    if probs.shape != target.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs target {target.shape}")
    p, t = probs.data, target.data
    n = p.shape[0]
    clamped = np.maximum(p, LOG_CLAMP)
    logp = np.log(clamped)
    value = -(t * logp).sum() / n

    def back(g):
        s = g[0, 0] / n
        dp = np.where(p > LOG_CLAMP, -t / clamped, 0.0) * s
        return dp, -logp * s

    return _emit("cross_entropy", (probs, target), np.array([[value]]), back)


def lstm_cell(x: Tensor, state: Tensor, w_all: Tensor, b_all: Tensor) -> Tensor:
    """One fused LSTM step.

    ``state`` is ``[h | c]`` (``batch x 2H``), ``w_all`` is ``(d + H) x 4H``
    with gate blocks ordered input, forget, cell, output, and ``b_all`` is
    ``1 x 4H``. Returns the new ``[h | c]``.
    """
    hidden = state.cols // 2
    if w_all.shape != (x.cols + hidden, 4 * hidden) or b_all.shape != (1, 4 * hidden):
        raise ShapeError(
            f"lstm_cell: weights {w_all.shape}/{b_all.shape} do not fit input {x.shape}, "
            f"state {state.shape}")
    if state.rows != x.rows:
        raise ShapeError(f"lstm_cell: batch mismatch {x.shape} vs {state.shape}")
    h_prev, c_prev = state.data[:, :hidden], state.data[:, hidden:]
    zin = np.concatenate([x.data, h_prev], axis=1)
    z = zin @ w_all.data + b_all.data
    i = _sigmoid(z[:, :hidden])
    f = _sigmoid(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = _sigmoid(z[:, 3 * hidden:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    w = w_all.data
    d = x.cols

    def back(grad):
        dh, dc = grad[:, :hidden], grad[:, hidden:]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        dzin = dz @ w.T
        dstate = np.concatenate([dzin[:, d:], dc * f], axis=1)
        return dzin[:, :d], dstate, zin.T @ dz, dz.sum(axis=0, keepdims=True)

    return _emit("lstm_cell", (x, state, w_all, b_all), np.concatenate([h, c], axis=1), back)


# ----------------------------------------------------------------- reshaping


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        out = np.array([[x.data.sum()]])
    elif axis in (0, 1):
        out = x.data.sum(axis=axis, keepdims=True)
    else:
        raise ValueError(f"axis must be None, 0 or 1, got {axis}")
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def transpose(x: Tensor) -> Tensor:
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as ({rows}, {cols})")
    shape = x.shape
    return _emit("reshape", (x,), x.data.reshape(rows, cols),
                 lambda g: (g.reshape(shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", tuple(tensors), out,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", (x,), x.data[:, start:stop].copy(), back)


def tile_rows(x: Tensor, times: int) -> Tensor:
    rows = x.rows
    return _emit("tile_rows", (x,), np.tile(x.data, (times, 1)),
                 lambda g: (g.reshape(times, rows, -1).sum(axis=0),))


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: row ``ids[k]`` of ``table`` becomes output row ``k``."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise IndexError(f"gather_rows: ids outside [0, {table.rows})")
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", (table,), table.data[idx], back)


# ------------------------------------------------------------------ backward


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns node id -> gradient.

    Gradients of nodes reached more than once are summed. The mapping is
    also stored on ``root.tape.gradients``.
    """
    if root.shape != (1, 1):
        raise NonScalarRootError(f"backward needs a 1x1 root, got {root.shape}")
    tape = root.tape
    if tape is None:
        raise ValueError("root is not recorded on a tape")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones((1, 1))}
    nodes = tape.nodes
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.backward is None:
            continue
        for src, dg in zip(node.inputs, node.backward(g)):
            if src < 0 or dg is None:
                continue
            prev = grads.get(src)
            grads[src] = dg if prev is None else prev + dg
    tape.gradients = grads
    return grads


def finite_diff_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of ``f`` w.r.t. every coordinate of ``params``.

    ``f`` receives a dict of plain arrays; it should build untracked tensors
    so nothing is recorded.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out: dict[str, np.ndarray] = {}
    for name, arr in work.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all shared entries.

    The floor keeps coordinates whose true gradient is ~0 from turning
    finite-difference round-off into huge relative errors.
    """
    worst = 0.0
    for k in a:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float((np.abs(x - y) / denom).max()))
    return worst
