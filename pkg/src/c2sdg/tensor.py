"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is recorded on the fly: every operation returns a
Tensor that remembers its input tensors and a vector-Jacobian closure.
``backward`` walks the graph in reverse topological order and accumulates
gradients for the ``requires_grad`` leaves. The graph is rebuilt on every
forward pass and freed once the backward sweep drops its references.

The op set is exactly what the segmentation pipeline needs; ``forward_op``
exposes it behind a single validating dispatcher. Convolutions go through
im2col + matmul so the heavy lifting lands in BLAS; everything stays
float64 and bitwise deterministic for a fixed machine and inputs.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen passes)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "name", "_inputs", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._inputs = ()
        self._vjp = None

    @classmethod
    def _wrap(cls, data: np.ndarray, inputs=(), vjp=None) -> "Tensor":
        # Internal fast path for op outputs: no finite scan, grad tracking
        # implied by the presence of a vjp closure.
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = vjp is not None
        t.name = None
        t._inputs = inputs if vjp is not None else ()
        t._vjp = vjp
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A graph-free leaf view of the same values."""
        return Tensor._wrap(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def from_op(data: np.ndarray, inputs, vjp) -> Tensor:
    """Extension point: build a differentiable op output from raw pieces.

    ``vjp(g)`` must return one gradient (or None) per entry of ``inputs``.
    Used by higher-level modules for composites that are not part of the
    public op kinds (e.g. row selection from the channel prompt).
    """
    if _track(*inputs):
        return Tensor._wrap(data, tuple(inputs), vjp)
    return Tensor._wrap(data)


def _track(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# op kernels
# ---------------------------------------------------------------------------

def _gemm_acc(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """c += a @ b (the temporary from matmul is small: one offset's output)."""
    c += a @ b


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Gather k x k patches of a padded NCHW array into (N, C*k*k, ho*wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, n: int, c: int, k: int, s: int,
            hp: int, wp: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add the im2col adjoint back onto the padded input layout."""
    dc = dcols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dc[:, :, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), square kernel, zero padding.

    Output spatial dims follow floor((H + 2*pad - k) / stride) + 1.

    Stride-1 convolutions run in a pixels-major layout where each kernel
    offset contributes one GEMM over a contiguous row slice, which avoids
    materializing the k*k-inflated patch matrix; strided convolutions fall
    back to im2col.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ValueError(f"conv2d kernel must be (Cout, Cin, k, k), got {w.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_w, k, _ = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel expects {cin_w}")
    if b is not None and b.data.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ValueError(f"conv2d kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if stride == 1:
        return _conv2d_flat(x, w, b, pad)
    return _conv2d_im2col(x, w, b, stride, pad)


def _conv2d_flat(x: Tensor, w: Tensor, b: Tensor | None, pad: int) -> Tensor:
    """Stride-1 convolution as k*k offset GEMMs on a pixels-major flat view.

    The padded input is rearranged to (N*Hp*Wp, Cin); the output at flat
    position p is sum_ij xf[p + i*Wp + j] @ W_ij^T, so every offset maps to
    one GEMM over a contiguous row slice. Positions whose patch wraps across
    a row or sample boundary are computed but discarded by the final crop;
    in the backward pass they carry zero gradient and stay inert.
    """
    n, cin, h, wd = x.data.shape
    cout, _, k, _ = w.data.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xf = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(-1, cin)
    total = xf.shape[0]
    span = total - (k - 1) * wp - (k - 1)
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))    # (k, k, Cin, Cout)
    of = np.zeros((total, cout))
    acc = of[:span]
    for i in range(k):
        for j in range(k):
            s = i * wp + j
            _gemm_acc(acc, xf[s : s + span], wt[i, j])
    out = np.ascontiguousarray(
        of.reshape(n, hp, wp, cout)[:, :ho, :wo, :].transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data[None, :, None, None]

    inputs = (x, w) if b is None else (x, w, b)
    if not _track(*inputs):
        return Tensor._wrap(out)

    def vjp(g):
        gf = np.zeros((n, hp, wp, cout))
        gf[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        gf = gf.reshape(total, cout)
        gm = gf[:span]
        dx = dw = db = None
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    s = i * wp + j
                    dw[:, :, i, j] = (xf[s : s + span].T @ gm).T
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxf = np.zeros((total, cin))
            for i in range(k):
                for j in range(k):
                    s = i * wp + j
                    _gemm_acc(dxf[s : s + span], gm, wt[i, j].T)
            dxp = dxf.reshape(n, hp, wp, cin)
            dx = np.ascontiguousarray(
                dxp[:, pad : pad + h, pad : pad + wd, :].transpose(0, 3, 1, 2))
        return (dx, dw) if b is None else (dx, dw, db)

    return Tensor._wrap(out, inputs, vjp)


def _conv2d_im2col(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int) -> Tensor:
    """General strided convolution through an explicit im2col matrix."""
    n, cin, h, wd = x.data.shape
    cout, _, k, _ = w.data.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)                      # (N, CKK, L)
    wm = w.data.reshape(cout, -1)
    out = np.matmul(wm, cols)                                  # (N, Cout, L)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    inputs = (x, w) if b is None else (x, w, b)
    if not _track(*inputs):
        return Tensor._wrap(out)

    hp, wp = xp.shape[2], xp.shape[3]

    def vjp(g):
        g2 = g.reshape(n, cout, ho * wo)
        dx = dw = db = None
        if w.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if b is not None and b.requires_grad:
            db = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2)
            dxp = _col2im(dcols, n, cin, k, stride, hp, wp, ho, wo)
            dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        return (dx, dw) if b is None else (dx, dw, db)

    return Tensor._wrap(out, inputs, vjp)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Odd spatial dims are rejected."""
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = (x.data.reshape(n, c, ho, 2, wo, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, ho, wo, 4))
    out = win.max(axis=-1)
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        idx = win.argmax(axis=-1)  # first maximum wins on ties
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (dwin.reshape(n, c, ho, wo, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (dx,)

    return Tensor._wrap(out, (x,), vjp)


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial max per channel: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_max_pool input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    out = flat.max(axis=-1)
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        idx = flat.argmax(axis=-1)
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        return (dflat.reshape(n, c, h, w),)

    return Tensor._wrap(out, (x,), vjp)


def upsample_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 spatial upsampling."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample_nearest input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._wrap(out, (x,), vjp)


@dataclass
class BatchNormState:
    """Running statistics of a batch-norm layer (buffers, not parameters)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                 training: bool) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with biased batch statistics and folds them into
    the running buffers (new = (1 - momentum) * old + momentum * batch).
    Eval mode is a pure affine map of the input; the buffers are not touched.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm2d input must be NCHW, got shape {x.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batch_norm2d affine params must have shape ({c},)")
    bc = (None, slice(None), None, None)  # broadcast (C,) over NCHW

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean[bc]) * inv[bc]
        out = gamma.data[bc] * xhat + beta.data[bc]
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
        if not _track(x, gamma, beta):
            return Tensor._wrap(out)

        def vjp(g):
            cnt = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * gamma.data[bc]
                t1 = cnt * dxhat
                t2 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                t3 = xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv[bc] / cnt) * (t1 - t2 - t3)
            return (dx, dgamma, dbeta)

        return Tensor._wrap(out, (x, gamma, beta), vjp)

    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean[bc]) * inv[bc]
    out = gamma.data[bc] * xhat + beta.data[bc]
    if not _track(x, gamma, beta):
        return Tensor._wrap(out)

    def vjp_eval(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = g * (gamma.data * inv)[bc] if x.requires_grad else None
        return (dx, dgamma, dbeta)

    return Tensor._wrap(out, (x, gamma, beta), vjp_eval)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return Tensor._wrap(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._wrap(out, (x,), vjp)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: (N, F) @ (O, F)^T + (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError("fully_connected expects x (N, F) and w (O, F)")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"fully_connected feature mismatch: {x.shape} vs {w.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"fully_connected bias must have shape ({w.data.shape[0]},)")
    out = x.data @ w.data.T + b.data
    if not _track(x, w, b):
        return Tensor._wrap(out)

    def vjp(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if b.requires_grad else None
        return (dx, dw, db)

    return Tensor._wrap(out, (x, w, b), vjp)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data
    if not _track(a, b):
        return Tensor._wrap(out)

    def vjp(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return Tensor._wrap(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        return (g * c,)

    return Tensor._wrap(out, (x,), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """a - b, composed from the public op kinds."""
    return elementwise_add(a, scale(b, -1.0))


def elementwise_mul_channel_broadcast(x: Tensor, m: Tensor) -> Tensor:
    """Scale each channel of an NCHW tensor by a length-C vector."""
    if x.data.ndim != 4:
        raise ValueError(f"channel broadcast needs an NCHW tensor, got shape {x.shape}")
    c = x.data.shape[1]
    if m.data.shape != (c,):
        raise ValueError(f"channel mask must have shape ({c},), got {m.shape}")
    mb = m.data[None, :, None, None]
    out = x.data * mb
    if not _track(x, m):
        return Tensor._wrap(out)

    def vjp(g):
        dx = g * mb if x.requires_grad else None
        dm = (g * x.data).sum(axis=(0, 2, 3)) if m.requires_grad else None
        return (dx, dm)

    return Tensor._wrap(out, (x, m), vjp)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two inputs")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ValueError(f"concat_channels incompatible shapes {base} and {s}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    if not _track(*tensors):
        return Tensor._wrap(out)

    widths = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=1)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return Tensor._wrap(out, tuple(tensors), vjp)


def abs_sum(x: Tensor) -> Tensor:
    """Sum of absolute values, reduced to a scalar."""
    out = np.asarray(np.abs(x.data).sum())
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        return (g * np.sign(x.data),)

    return Tensor._wrap(out, (x,), vjp)


_BCE_CLAMP = 1e-7


def bce(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy with the prediction clamped away from {0, 1}.

    ``target`` must be exactly 0/1-valued. The subgradient is zero wherever
    the clamp is active.
    """
    if pred.data.shape != target.data.shape:
        raise ValueError(f"bce shape mismatch: {pred.shape} vs {target.shape}")
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce target must be binary (0/1)")
    p = np.clip(pred.data, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    lp = np.log(p)
    l1p = np.log1p(-p)
    out = np.asarray(-(t * lp + (1.0 - t) * l1p).mean())
    if not _track(pred, target):
        return Tensor._wrap(out)

    def vjp(g):
        n = p.size
        dpred = dtarget = None
        if pred.requires_grad:
            inside = (pred.data > _BCE_CLAMP) & (pred.data < 1.0 - _BCE_CLAMP)
            dpred = g * np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) / n
        if target.requires_grad:
            dtarget = g * (l1p - lp) / n
        return (dpred, dtarget)

    return Tensor._wrap(out, (pred, target), vjp)


def softmax_over_axis(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not _track(x):
        return Tensor._wrap(out)

    def vjp(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return Tensor._wrap(out, (x,), vjp)


_OP_TABLE = {
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "global_max_pool": global_max_pool,
    "upsample_nearest": upsample_nearest,
    "batch_norm2d": batch_norm2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "fully_connected": fully_connected,
    "elementwise_add": elementwise_add,
    "elementwise_mul_channel_broadcast": elementwise_mul_channel_broadcast,
    "concat_channels": concat_channels,
    "abs_sum": abs_sum,
    "bce": bce,
    "softmax_over_axis": softmax_over_axis,
    "scale": scale,
}


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Validating dispatcher over the fixed op set.

    ``inputs`` is a sequence of Tensors, ``attrs`` the keyword arguments of
    the op. Inputs are checked for finiteness here; the direct op functions
    skip that scan on the hot path.
    """
    fn = _OP_TABLE.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind {kind!r}")
    tensors = tuple(inputs)
    for t in tensors:
        if not isinstance(t, Tensor):
            raise ValueError(f"forward_op inputs must be Tensors, got {type(t).__name__}")
        _check_finite(t.data, f"{kind} input")
    return fn(*tensors, **(attrs or {}))


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            stack.append((inp, False))
    return order  # every input precedes its consumers


def backward(loss: Tensor, params=None, check_finite: bool = True) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map {leaf Tensor: gradient array} covering every requires_grad
    leaf reachable from ``loss``. When ``params`` (an iterable of Tensors) is
    given, unreachable entries are filled with zeros so the key set equals
    the requested parameters.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for inp, gi in zip(node._inputs, node._vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        elif node.requires_grad:
            result[node] = g
    if check_finite:
        for t, g in result.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {t.name or 'tensor'}")
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_update(param: Tensor, grad: np.ndarray, buf: np.ndarray, lr: float,
               momentum: float = 0.99) -> Tensor:
    """Classic heavy-ball step, in place: buf = m*buf + g; p -= lr*buf."""
    if grad.shape != param.data.shape or buf.shape != param.data.shape:
        raise ValueError(
            f"sgd_update shape mismatch: param {param.data.shape}, "
            f"grad {grad.shape}, buffer {buf.shape}")
    buf *= momentum
    buf += grad
    param.data -= lr * buf
    return param


@dataclass
class SGD:
    """SGD with heavy-ball momentum over a fixed parameter set."""

    params: list[Tensor]
    lr: float
    momentum: float = 0.99
    _buffers: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = list(self.params)
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        for p in self.params:
            self._buffers[id(p)] = np.zeros_like(p.data)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            sgd_update(p, g, self._buffers[id(p)], self.lr, self.momentum)
