"""Dense tensors with reverse-mode automatic differentiation on a recorded tape.

The op set is exactly what the forecaster's math needs: matmul, explicit
elementwise arithmetic, the gated activations, row-stochastic softmax,
fused norm/rotation/attention kernels with analytic adjoints, and the
gather/scatter primitives used for sparse expert dispatch.

Shape discipline is strict: elementwise ops accept equal shapes, a
trailing-dimension vector, or a scalar — nothing else. Anything fancier
(per-row scaling, column slicing) is its own named op. Every op checks its
output for NaN/Inf and raises NumericError, so non-finite values are never
silently stored.

Default precision is float32; pass dtype=np.float64 at tensor creation for
gradient-checking headroom. Mixing precisions in one expression is an error.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf from finite inputs, or was fed NaN/Inf."""


class Tensor:
    """N-dimensional array of float32/float64 values, optionally carrying a gradient.

    `data` is a row-major numpy array; `grad`, once backward() has run, is an
    array of the same shape. Tensors created while a Graph is active and
    derived from a requires_grad input participate in backpropagation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other if isinstance(other, Tensor) else constant(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(value, dtype=DEFAULT_DTYPE) -> Tensor:
    """A tensor that never requires grad (targets, masks, literals)."""
    return Tensor(value, dtype=dtype, requires_grad=False)


# --- the tape ----------------------------------------------------------------

_STACK = threading.local()


def _graph_stack() -> list:
    if not hasattr(_STACK, "graphs"):
        _STACK.graphs = []
    return _STACK.graphs


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Execution-ordered tape of recorded ops.

    Replaying the recorded adjoints in reverse execution order yields the
    gradient of a scalar loss for every requires_grad leaf. One graph per
    forward pass; backward() consumes and drops the tape.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self, "graph contexts must nest"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple, vjp) -> None:
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self._nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for out, inputs, vjp in reversed(self._nodes):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for tin, g_in in zip(inputs, vjp(g_out)):
                if g_in is None or not tin.requires_grad:
                    continue
                key = id(tin)
                held = grads.get(key)
                grads[key] = g_in if held is None else held + g_in
                if key not in produced:
                    leaves[key] = tin
        for key, tensor in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.reshape(tensor.data.shape)
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        self._nodes.clear()


def backward(loss: Tensor, graph: Graph) -> None:
    graph.backward(loss)


def _finish(op: str, out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Finite-check the result and record the op if a tape is active."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced non-finite values")
    graph = _active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, track)
    if track:
        graph._record(out, inputs, vjp)
    return out


def _as_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.dtype != like.data.dtype:
            raise TypeError(f"mixed precisions: {like.data.dtype} vs {x.data.dtype}")
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.data.dtype), False)


def _broadcast_kind(a_shape: tuple, b_shape: tuple) -> str:
    if a_shape == b_shape:
        return "same"
    if b_shape in ((), (1,)):
        return "scalar"
    if len(a_shape) >= 1 and b_shape == a_shape[-1:]:
        return "trailing"
    raise ShapeError(f"no elementwise rule for shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return g.sum().reshape(shape)
    axes = tuple(range(g.ndim - 1))
    return g.sum(axis=axes).reshape(shape)


# --- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b; b may be equal-shaped, a trailing vector, or a scalar."""
    b = _as_operand(b, a)
    kind = _broadcast_kind(a.shape, b.shape)

    def vjp(g):
        return g, _reduce_to(g, kind, b.shape)

    return _finish("add", a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b under the same shape rules as add."""
    b = _as_operand(b, a)
    kind = _broadcast_kind(a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g * b_data, _reduce_to(g * a_data, kind, b_data.shape)

    return _finish("mul", a_data * b_data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product [m×k] @ [k×n] -> [m×n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    b = _as_operand(b, a)
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return _finish("matmul", a_data @ b_data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def vjp(g):
        return (g.T.copy(),)

    return _finish("transpose", a.data.T.copy(), (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.data.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _finish("reshape", a.data.reshape(shape), (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.data.shape
    dtype = a.data.dtype

    def vjp(g):
        return (np.full(shape, g.reshape(()), dtype=dtype),)

    return _finish("sum", a.data.sum().reshape(()), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.data.size)


# --- activations ---------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _finish("sigmoid", s, (x,), vjp)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x) (the gate activation used throughout the model)."""
    s = _sigmoid(x.data)
    x_data = x.data

    def vjp(g):
        return (g * (s + x_data * s * (1.0 - s)),)

    return _finish("silu", x_data * s, (x,), vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last dimension, with max-subtraction."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax over an empty dimension")
    if not np.all(np.isfinite(np.nan_to_num(x.data, nan=np.nan, posinf=np.nan, neginf=0.0))):
        # -inf entries are legal (masking); NaN/+inf are not.
        raise NumericError("softmax input contains NaN or +inf")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _finish("softmax", y, (x,), vjp)


def huber(pred: Tensor, target, delta: float) -> Tensor:
    """Elementwise robust loss: quadratic within |r| <= delta, linear beyond."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    target = _as_operand(target, pred)
    r = pred.data - target.data
    small = np.abs(r) <= delta
    out = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    dr = np.where(small, r, delta * np.sign(r))

    def vjp(g):
        return g * dr, -(g * dr)

    return _finish("huber", out, (pred, target), vjp)


# --- fused model kernels -------------------------------------------------------


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row x / sqrt(mean(x^2) + eps), scaled elementwise by weight."""
    if x.shape[-1] != weight.shape[0] or weight.data.ndim != 1:
        raise ShapeError(f"rmsnorm weight {weight.shape} does not match rows of {x.shape}")
    weight = _as_operand(weight, x)
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    x_data, w_data = x.data, weight.data
    y = x_data * inv * w_data

    def vjp(g):
        gw_x = g * w_data
        dot = (gw_x * x_data).sum(axis=-1, keepdims=True)
        gx = inv * gw_x - (inv ** 3 / d) * x_data * dot
        gw = (g * x_data * inv).reshape(-1, d).sum(axis=0)
        return gx, gw

    return _finish("rmsnorm", y, (x, weight), vjp)


def _rope_tables(positions: np.ndarray, half: int, base: float, dtype) -> tuple:
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / (2 * half))
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate adjacent feature pairs of x[T, heads, d_head] by position-dependent angles.

    Pair i of each head vector turns by positions[t] * base^(-2i/d_head); the
    adjoint is the inverse rotation, so gradients are exact isometries too.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"rope expects [T, heads, d_head], got {x.shape}")
    t, _, d_head = x.shape
    if d_head % 2 != 0:
        raise ShapeError(f"rope needs an even head dim, got {d_head}")
    if len(positions) != t:
        raise ShapeError("positions must have one entry per token")
    cos, sin = _rope_tables(np.asarray(positions), d_head // 2, base, x.data.dtype)
    cos = cos[:, None, :]
    sin = sin[:, None, :]

    def rotate(arr, c, s):
        a, b = arr[..., 0::2], arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = a * c - b * s
        out[..., 1::2] = a * s + b * c
        return out

    def vjp(g):
        return (rotate(g, cos, -sin),)

    return _finish("rope", rotate(x.data, cos, sin), (x,), vjp)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray) -> Tensor:
    """Scaled dot-product attention over [T, heads, d_head] with an additive mask.

    bias is a constant [T, T] array of 0 / -inf; -inf entries are unreachable
    (the causal/packing mask always admits the diagonal).
    """
    if q.data.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention expects matching [T, heads, d_head], got {q.shape}, {k.shape}, {v.shape}")
    t, _, d_head = q.shape
    if bias.shape != (t, t):
        raise ShapeError(f"attention mask must be [T, T], got {bias.shape}")
    bias = bias.astype(q.data.dtype, copy=False)
    scale = float(1.0 / np.sqrt(d_head))
    scores = np.einsum("ihd,jhd->ihj", q.data, k.data) * scale + bias[:, None, :]
    w = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = w / w.sum(axis=-1, keepdims=True)
    out = np.einsum("ihj,jhd->ihd", w, v.data)
    q_data, k_data, v_data = q.data, k.data, v.data

    def vjp(g):
        gw = np.einsum("ihd,jhd->ihj", g, v_data)
        gs = w * (gw - (w * gw).sum(axis=-1, keepdims=True))
        gq = scale * np.einsum("ihj,jhd->ihd", gs, k_data)
        gk = scale * np.einsum("ihj,ihd->jhd", gs, q_data)
        gv = np.einsum("ihj,ihd->jhd", w, g)
        return gq, gk, gv

    return _finish("attention", out, (q, k, v), vjp)


# --- gather / scatter ----------------------------------------------------------


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of x (leading axis); adjoint scatter-adds back."""
    rows = np.asarray(rows, dtype=np.intp)
    in_shape = x.data.shape

    def vjp(g):
        acc = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(acc, rows, g)
        return (acc,)

    return _finish("gather_rows", x.data[rows], (x,), vjp)


def scatter_rows(x: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Place rows of x at the given indices of a zero [num_rows, ...] tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    if len(rows) != x.data.shape[0]:
        raise ShapeError("one target row index per input row")
    out = np.zeros((num_rows,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(out, rows, x.data)

    def vjp(g):
        return (g[rows],)

    return _finish("scatter_rows", out, (x,), vjp)


def gather_entries(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """x[rows[i], cols[i]] as a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    in_shape = x.data.shape

    def vjp(g):
        acc = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(acc, (rows, cols), g)
        return (acc,)

    return _finish("gather_entries", x.data[rows, cols], (x,), vjp)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of x[T, D] by s[i]."""
    if s.data.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"row_scale needs s[T] matching x{x.shape}, got {s.shape}")
    s = _as_operand(s, x)
    x_data, s_data = x.data, s.data

    def vjp(g):
        return g * s_data[:, None], (g * x_data).sum(axis=1)

    return _finish("row_scale", x_data * s_data[:, None], (x, s), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"column range [{start}, {stop}) out of bounds for {x.shape}")
    in_shape = x.data.shape

    def vjp(g):
        acc = np.zeros(in_shape, dtype=g.dtype)
        acc[:, start:stop] = g
        return (acc,)

    return _finish("slice_cols", x.data[:, start:stop].copy(), (x,), vjp)


def concat_rows(parts: list) -> Tensor:
    """Concatenate tensors along the leading axis."""
    if not parts:
        raise ShapeError("concat_rows of nothing")
    sizes = [p.data.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return _finish("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)
