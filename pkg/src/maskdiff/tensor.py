"""Dense float tensors with reverse-mode automatic differentiation.

A `Graph` is an append-only tape: every operation records its inputs, its
eagerly computed output, and a backward rule. `Graph.backward` walks the
tape in reverse and returns gradients for every grad-enabled node that
influences the loss.

Tensors default to float32. Ops preserve dtype, so the same code can run
in float64 for gradient checking. Full reductions accumulate in float64
regardless of dtype.

There is no implicit broadcasting beyond tensor-scalar; shape mismatches
raise immediately, naming the op and the offending shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "NonFiniteError",
    "matmul",
    "conv2d",
    "bias_add",
    "channel_add",
    "upsample2x",
    "avgpool2x2",
    "silu",
    "relu",
    "sigmoid",
    "group_norm",
    "concat",
    "permute",
    "take_rows",
    "softmax_cross_entropy",
    "vec_norm",
    "l2_normalize_rows",
    "sqrt",
    "finite_diff_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """A value that must be finite (loss, gradient, leaf data) is not."""


class Tensor:
    """A node in an autodiff graph: an eager numpy value plus provenance."""

    __slots__ = ("graph", "nid", "data", "requires_grad", "grad")

    def __init__(self, graph: "Graph", nid: int, data: np.ndarray, requires_grad: bool):
        self.graph = graph
        self.nid = nid
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(nid={self.nid}, shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; scalars route to the tensor-scalar ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return self.graph.record("add", [self, other])
        return self.graph.record("addc", [self], c=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self.graph.record("sub", [self, other])
        return self.graph.record("addc", [self], c=-float(other))

    def __rsub__(self, other):
        return self.graph.record("addc", [self.graph.record("mulc", [self], c=-1.0)], c=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return self.graph.record("mul", [self, other])
        return self.graph.record("mulc", [self], c=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self.graph.record("div", [self, other])
        return self.graph.record("mulc", [self], c=1.0 / float(other))

    def __neg__(self):
        return self.graph.record("mulc", [self], c=-1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.record("reshape", [self], shape=tuple(shape))

    def sum(self, axes=None) -> "Tensor":
        return self.graph.record("sum", [self], axes=_norm_axes(axes, self.data.ndim))

    def mean(self, axes=None) -> "Tensor":
        return self.graph.record("mean", [self], axes=_norm_axes(axes, self.data.ndim))

    def clamp(self, lo: float, hi: float) -> "Tensor":
        return self.graph.record("clamp", [self], lo=float(lo), hi=float(hi))

    def slice(self, bounds: Sequence[tuple[int, int] | None]) -> "Tensor":
        """Contiguous sub-block; bounds is one (start, stop) or None per axis."""
        return self.graph.record("slice", [self], bounds=tuple(bounds))


class _Record:
    __slots__ = ("op", "input_ids", "output_id", "backward_rule", "requires_grad")

    def __init__(self, op, input_ids, output_id, backward_rule, requires_grad):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad


def _norm_axes(axes, ndim: int):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


class Graph:
    """Append-only operation tape over eagerly evaluated tensors."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def node(self, nid: int) -> Tensor:
        return self._nodes[nid]

    def tensor(self, data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
        """Register a leaf. Data must be finite; dtype float32/float64."""
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf tensor contains NaN/Inf")
        t = Tensor(self, len(self._nodes), arr, requires_grad)
        self._nodes.append(t)
        return t

    def record(self, op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        """Apply `op_kind` to `inputs`, append the result, and return it."""
        impl = _OPS.get(op_kind)
        if impl is None:
            raise ValueError(f"unknown op tag {op_kind!r}")
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{op_kind}: input tensor belongs to a different graph")
        arrays = [t.data for t in inputs]
        out_data, backward_rule = impl(arrays, attrs)
        requires = any(t.requires_grad for t in inputs)
        out = Tensor(self, len(self._nodes), out_data, requires)
        self._nodes.append(out)
        self._records.append(
            _Record(op_kind, tuple(t.nid for t in inputs), out.nid, backward_rule, requires)
        )
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse-mode sweep from a scalar loss.

        Returns {node id -> gradient} for every grad-enabled node that
        influences the loss, and mirrors the gradients onto `Tensor.grad`.
        """
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            if not rec.requires_grad or rec.output_id not in grads:
                continue
            gy = grads[rec.output_id]
            gxs = rec.backward_rule(gy)
            for nid, gx in zip(rec.input_ids, gxs):
                if gx is None or not self._nodes[nid].requires_grad:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + gx
                else:
                    grads[nid] = gx
        if not loss.requires_grad:
            grads.pop(loss.nid, None)
        for nid, g in grads.items():
            self._nodes[nid].grad = g
        return grads


# ---------------------------------------------------------------------------
# op registry: impl(arrays, attrs) -> (out_array, backward_rule)
# backward_rule(gy) -> per-input gradients (None where not differentiable)
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable] = {}


def _op(name: str):
    def deco(fn):
        _OPS[name] = fn
        return fn

    return deco


def _want(cond: bool, op: str, msg: str):
    if not cond:
        raise ValueError(f"{op}: {msg}")


def _same_shape(op: str, a: np.ndarray, b: np.ndarray):
    _want(a.shape == b.shape, op, f"shape mismatch {a.shape} vs {b.shape}")


@_op("add")
def _add(arrays, attrs):
    a, b = arrays
    _same_shape("add", a, b)
    return a + b, lambda gy: (gy, gy)


@_op("sub")
def _sub(arrays, attrs):
    a, b = arrays
    _same_shape("sub", a, b)
    return a - b, lambda gy: (gy, -gy)


@_op("mul")
def _mul(arrays, attrs):
    a, b = arrays
    _same_shape("mul", a, b)
    return a * b, lambda gy: (gy * b, gy * a)


@_op("div")
def _div(arrays, attrs):
    a, b = arrays
    _same_shape("div", a, b)
    return a / b, lambda gy: (gy / b, -gy * a / (b * b))


@_op("addc")
def _addc(arrays, attrs):
    (a,) = arrays
    c = a.dtype.type(attrs["c"])
    return a + c, lambda gy: (gy,)


@_op("mulc")
def _mulc(arrays, attrs):
    (a,) = arrays
    c = a.dtype.type(attrs["c"])
    return a * c, lambda gy: (gy * c,)


@_op("matmul")
def _matmul(arrays, attrs):
    a, b = arrays
    _want(a.ndim == 2 and b.ndim == 2, "matmul", f"needs 2-d operands, got {a.shape} @ {b.shape}")
    _want(a.shape[1] == b.shape[0], "matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    return a @ b, lambda gy: (gy @ b.T, a.T @ gy)


@_op("sqrt")
def _sqrt(arrays, attrs):
    (a,) = arrays
    _want(bool(np.all(a >= 0)), "sqrt", "negative input")
    out = np.sqrt(a)

    def back(gy):
        denom = np.maximum(out, a.dtype.type(1e-12))
        return (gy / (2.0 * denom),)

    return out, back


@_op("silu")
def _silu(arrays, attrs):
    (a,) = arrays
    sig = 1.0 / (1.0 + np.exp(-a))
    out = (a * sig).astype(a.dtype)

    def back(gy):
        return ((gy * (sig * (1.0 + a * (1.0 - sig)))).astype(a.dtype),)

    return out, back


@_op("sigmoid")
def _sigmoid(arrays, attrs):
    (a,) = arrays
    out = (1.0 / (1.0 + np.exp(-a))).astype(a.dtype)
    return out, lambda gy: ((gy * out * (1.0 - out)).astype(a.dtype),)


@_op("relu")
def _relu(arrays, attrs):
    (a,) = arrays
    mask = a > 0
    return np.where(mask, a, a.dtype.type(0)), lambda gy: (np.where(mask, gy, gy.dtype.type(0)),)


@_op("clamp")
def _clamp(arrays, attrs):
    (a,) = arrays
    lo, hi = attrs["lo"], attrs["hi"]
    out = np.clip(a, lo, hi)
    inside = (a > lo) & (a < hi)
    return out, lambda gy: (np.where(inside, gy, gy.dtype.type(0)),)


@_op("reshape")
def _reshape(arrays, attrs):
    (a,) = arrays
    shape = attrs["shape"]
    out = a.reshape(shape)
    return out, lambda gy: (gy.reshape(a.shape),)


@_op("permute")
def _permute(arrays, attrs):
    (a,) = arrays
    axes = attrs["axes"]
    _want(len(axes) == a.ndim, "permute", f"axes {axes} rank mismatch for {a.shape}")
    inv = tuple(np.argsort(axes))
    return np.ascontiguousarray(a.transpose(axes)), lambda gy: (gy.transpose(inv),)


@_op("concat")
def _concat(arrays, attrs):
    axis = attrs["axis"]
    ref = arrays[0]
    for x in arrays[1:]:
        _want(
            x.ndim == ref.ndim
            and all(x.shape[i] == ref.shape[i] for i in range(ref.ndim) if i != axis),
            "concat",
            f"incompatible shapes {[a.shape for a in arrays]} on axis {axis}",
        )
    sizes = [x.shape[axis] for x in arrays]
    out = np.concatenate(arrays, axis=axis)

    def back(gy):
        outs, ofs = [], 0
        for s in sizes:
            idx = [slice(None)] * gy.ndim
            idx[axis] = slice(ofs, ofs + s)
            outs.append(gy[tuple(idx)])
            ofs += s
        return tuple(outs)

    return out, back


@_op("slice")
def _slice(arrays, attrs):
    (a,) = arrays
    bounds = attrs["bounds"]
    _want(len(bounds) == a.ndim, "slice", f"bounds rank {len(bounds)} vs tensor rank {a.ndim}")
    idx = tuple(slice(None) if b is None else slice(b[0], b[1]) for b in bounds)
    out = np.ascontiguousarray(a[idx])

    def back(gy):
        gx = np.zeros_like(a)
        gx[idx] = gy
        return (gx,)

    return out, back


@_op("take_rows")
def _take_rows(arrays, attrs):
    (a,) = arrays
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    out = np.ascontiguousarray(a[idx])

    def back(gy):
        gx = np.zeros_like(a)
        np.add.at(gx, idx, gy)
        return (gx,)

    return out, back


@_op("sum")
def _sum(arrays, attrs):
    (a,) = arrays
    axes = attrs.get("axes")
    out = np.sum(a, axis=axes, dtype=np.float64).astype(a.dtype)

    def back(gy):
        return (_expand_reduced(gy, a.shape, axes),)

    return out, back


@_op("mean")
def _mean(arrays, attrs):
    (a,) = arrays
    axes = attrs.get("axes")
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = (np.sum(a, axis=axes, dtype=np.float64) / count).astype(a.dtype)

    def back(gy):
        return (_expand_reduced(gy, a.shape, axes) / a.dtype.type(count),)

    return out, back


def _expand_reduced(gy: np.ndarray, shape: tuple[int, ...], axes) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(gy, shape).copy() if gy.ndim == 0 else np.full(shape, gy, dtype=gy.dtype)
    keep = list(shape)
    for ax in axes:
        keep[ax] = 1
    return np.broadcast_to(gy.reshape(keep), shape).copy()


@_op("bias_add")
def _bias_add(arrays, attrs):
    x, b = arrays
    _want(b.ndim == 1 and x.ndim >= 2 and x.shape[1] == b.shape[0], "bias_add",
          f"bias {b.shape} does not match channel axis of {x.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    out = x + b.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

    def back(gy):
        return (gy, np.sum(gy, axis=reduce_axes, dtype=np.float64).astype(b.dtype))

    return out, back


@_op("channel_add")
def _channel_add(arrays, attrs):
    x, v = arrays
    _want(x.ndim == 4 and v.ndim == 2 and x.shape[:2] == v.shape, "channel_add",
          f"per-sample channel vector {v.shape} does not match {x.shape}")
    out = x + v[:, :, None, None]
    return out, lambda gy: (gy, np.sum(gy, axis=(2, 3), dtype=np.float64).astype(v.dtype))


@_op("upsample2x")
def _upsample2x(arrays, attrs):
    (x,) = arrays
    _want(x.ndim == 4, "upsample2x", f"needs NCHW, got {x.shape}")
    out = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def back(gy):
        n, c, h, w = x.shape
        return (gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return out, back


@_op("avgpool2x2")
def _avgpool2x2(arrays, attrs):
    (x,) = arrays
    _want(x.ndim == 4, "avgpool2x2", f"needs NCHW, got {x.shape}")
    n, c, h, w = x.shape
    _want(h % 2 == 0 and w % 2 == 0, "avgpool2x2", f"spatial dims must be even, got {x.shape}")
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)).astype(x.dtype)

    def back(gy):
        g = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3)
        return ((g * x.dtype.type(0.25)),)

    return out, back


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(x: np.ndarray, k: int, pad: int, stride: int):
    """Layout [N, C*k*k, Ho*Wo]: contiguous for batched GEMM, built from
    k*k block copies instead of a strided gather."""
    n, c, h, w = x.shape
    xp = _pad_hw(x, pad)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    col = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            col[:, :, ki, kj] = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
    return col.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(gcol: np.ndarray, x_shape, k: int, pad: int, stride: int, ho: int, wo: int):
    n, c, h, w = x_shape
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcol.dtype)
    g6 = gcol.reshape(n, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += g6[:, :, ki, kj]
    if pad:
        gxp = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])
    return gxp


@_op("conv2d")
def _conv2d(arrays, attrs):
    x, w = arrays
    pad = int(attrs.get("pad", 0))
    stride = int(attrs.get("stride", 1))
    _want(x.ndim == 4 and w.ndim == 4, "conv2d", f"needs NCHW x and OIKK w, got {x.shape}, {w.shape}")
    _want(x.shape[1] == w.shape[1], "conv2d", f"in-channel mismatch {x.shape} vs {w.shape}")
    _want(w.shape[2] == w.shape[3], "conv2d", f"kernel must be square, got {w.shape}")
    _want(x.shape[2] + 2 * pad >= w.shape[2] and x.shape[3] + 2 * pad >= w.shape[2], "conv2d",
          f"kernel {w.shape} larger than padded input {x.shape}")
    n = x.shape[0]
    co, ci, k, _ = w.shape
    col, ho, wo = _im2col(x, k, pad, stride)
    wmat = w.reshape(co, ci * k * k)
    out = np.matmul(wmat, col).reshape(n, co, ho, wo)

    def back(gy):
        gy3 = gy.reshape(n, co, ho * wo)
        gw = np.matmul(gy3, col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcol = np.matmul(wmat.T, gy3)
        gx = _col2im(gcol, x.shape, k, pad, stride, ho, wo)
        return (gx, gw.astype(w.dtype, copy=False))

    return out, back


@_op("group_norm")
def _group_norm(arrays, attrs):
    x, gamma, beta = arrays
    groups = int(attrs["groups"])
    eps = float(attrs.get("eps", 1e-5))
    _want(x.ndim == 4, "group_norm", f"needs NCHW, got {x.shape}")
    n, c, h, w = x.shape
    _want(c % groups == 0, "group_norm", f"{groups} groups do not divide {c} channels")
    _want(gamma.shape == (c,) and beta.shape == (c,), "group_norm",
          f"affine params {gamma.shape}/{beta.shape} must be ({c},)")
    # numpy's pairwise float32 summation is accurate enough for per-group
    # statistics; float64 passes here double the memory traffic
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    diff = xg - mu
    var = np.mean(diff * diff, axis=2, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (diff * inv).reshape(x.shape)
    out = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)

    def back(gy):
        dgamma = np.sum(gy * xhat, axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
        dbeta = np.sum(gy, axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype)
        dxhat = (gy * gamma.reshape(1, c, 1, 1)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = np.mean(dxhat * xh, axis=2, keepdims=True)
        dx = ((dxhat - m1 - xh * m2) * inv).reshape(x.shape)
        return (dx, dgamma, dbeta)

    return out, back


@_op("softmax_xent")
def _softmax_xent(arrays, attrs):
    (logits,) = arrays
    targets = np.asarray(attrs["targets"], dtype=np.int64)
    _want(logits.ndim == 2, "softmax_xent", f"needs 2-d logits, got {logits.shape}")
    _want(targets.shape == (logits.shape[0],), "softmax_xent",
          f"targets {targets.shape} must match rows of {logits.shape}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    loss = (np.log(ez.sum(axis=1)) - z[rows, targets]).astype(logits.dtype)

    def back(gy):
        g = sm.copy()
        g[rows, targets] -= 1.0
        return ((g * gy[:, None]).astype(logits.dtype),)

    return loss, back


@_op("vec_norm")
def _vec_norm(arrays, attrs):
    (a,) = arrays
    out = np.asarray(np.sqrt(np.sum(a.astype(np.float64) ** 2)), dtype=a.dtype)

    def back(gy):
        denom = max(float(out), 1e-12)
        return ((gy * a / a.dtype.type(denom)).astype(a.dtype),)

    return out, back


@_op("l2_normalize_rows")
def _l2_normalize_rows(arrays, attrs):
    (a,) = arrays
    eps = float(attrs.get("eps", 1e-12))
    _want(a.ndim == 2, "l2_normalize_rows", f"needs 2-d input, got {a.shape}")
    norms = np.sqrt(np.sum(a.astype(np.float64) ** 2, axis=1, keepdims=True) + eps).astype(a.dtype)
    out = a / norms

    def back(gy):
        dot = np.sum(gy * out, axis=1, keepdims=True, dtype=np.float64).astype(a.dtype)
        return ((gy - out * dot) / norms,)

    return out, back


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.record("matmul", [a, b])


def conv2d(x: Tensor, w: Tensor, pad: int = 0, stride: int = 1) -> Tensor:
    return x.graph.record("conv2d", [x, w], pad=pad, stride=stride)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return x.graph.record("bias_add", [x, b])


def channel_add(x: Tensor, v: Tensor) -> Tensor:
    return x.graph.record("channel_add", [x, v])


def upsample2x(x: Tensor) -> Tensor:
    return x.graph.record("upsample2x", [x])


def avgpool2x2(x: Tensor) -> Tensor:
    return x.graph.record("avgpool2x2", [x])


def silu(x: Tensor) -> Tensor:
    return x.graph.record("silu", [x])


def relu(x: Tensor) -> Tensor:
    return x.graph.record("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return x.graph.record("sigmoid", [x])


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    return x.graph.record("group_norm", [x, gamma, beta], groups=groups, eps=eps)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    return ts[0].graph.record("concat", ts, axis=axis)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return x.graph.record("permute", [x], axes=tuple(axes))


def take_rows(x: Tensor, indices) -> Tensor:
    return x.graph.record("take_rows", [x], indices=np.asarray(indices, dtype=np.int64))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy of softmax(logits) against integer targets."""
    return logits.graph.record("softmax_xent", [logits], targets=targets)


def vec_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    return x.graph.record("vec_norm", [x])


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x.graph.record("l2_normalize_rows", [x], eps=eps)


def sqrt(x: Tensor) -> Tensor:
    return x.graph.record("sqrt", [x])


def finite_diff_check(f: Callable[[Tensor], Tensor], point: np.ndarray, eps: float) -> float:
    """Max relative error between autodiff and central differences.

    `f` must build a scalar from a single leaf tensor and be deterministic.
    Evaluation runs in float64 so the difference quotient is trustworthy.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pt = np.asarray(point, dtype=np.float64)

    def value_at(arr: np.ndarray) -> float:
        g = Graph()
        out = f(g.tensor(arr, dtype=np.float64))
        if out.data.size != 1:
            raise ValueError(f"finite_diff_check needs a scalar-valued f, got {out.data.shape}")
        v = float(out.data)
        if not np.isfinite(v):
            raise NonFiniteError("non-finite value during finite-difference evaluation")
        return v

    g = Graph()
    x = g.tensor(pt, requires_grad=True, dtype=np.float64)
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued f, got {out.data.shape}")
    g.backward(out)
    auto = np.zeros_like(pt) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    if not np.all(np.isfinite(auto)):
        raise NonFiniteError("non-finite autodiff gradient")

    flat = pt.ravel()
    worst = 0.0
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = value_at(pt)
        flat[i] = saved - eps
        fm = value_at(pt)
        flat[i] = saved
        fd = (fp - fm) / (2.0 * eps)
        rel = abs(auto.ravel()[i] - fd) / max(1e-8, abs(fd))
        worst = max(worst, rel)
    return worst
