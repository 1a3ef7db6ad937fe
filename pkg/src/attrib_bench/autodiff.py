"""Dense f64 tensors with reverse-mode automatic differentiation on an explicit tape.

The op vocabulary is exactly what a small convolutional classifier needs:
conv2d, relu, 2x2 max pooling, inference-mode batchnorm, spatial pooling,
indexing, and a fused softmax cross-entropy. Every op has a raw kernel
(numpy in / numpy out, used by fast non-differentiated paths) and a taped
wrapper that records the node for the backward pass.

Conventions:
  - all data is float64, C-contiguous, channel-first: (C,H,W) or (N,C,H,W)
  - conv2d is cross-correlation (no kernel flip), as in every CNN framework
  - relu has gradient 0 at exactly 0; maxpool ties break to the first
    element of the window in row-major order
"""

from __future__ import annotations

import numpy as np

from . import _fast
from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_param_grads",
    "relu_forward",
    "maxpool2_forward",
    "batchnorm_forward",
    "finite_or_raise",
]


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def finite_or_raise(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# raw kernels
# ---------------------------------------------------------------------------

def _split_batch(x: np.ndarray):
    """View x as (N,C,H,W); remember whether a batch axis was added."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected 3-D or 4-D tensor, got shape {x.shape}")


_SMALL_CONV = 1024  # output positions below this use the transpose-copy patch path


def _im2colT(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of a padded (N,C,Hp,Wp) input, laid out (C*k*k, N*ho*wo).

    For large outputs the matrix is built row by row from strided slice
    copies (each write is one regular strided copy, far faster than
    transposing a sliding_window_view); tiny outputs take the
    sliding_window_view route where per-slice Python overhead dominates.
    """
    n, c = xp.shape[0], xp.shape[1]
    if n * ho * wo < _SMALL_CONV:
        v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[
            :, :, ::stride, ::stride
        ]
        cols = v.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
        return np.ascontiguousarray(cols)
    cols = np.empty((c * k * k, n * ho * wo))
    idx = 0
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                cols[idx] = xp[
                    :, ci, i : i + stride * ho : stride, j : j + stride * wo : stride
                ].reshape(-1)
                idx += 1
    return cols


def conv2d_forward(x, w, b, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate (N,C,H,W) or (C,H,W) input with (O,C,k,k) weights.

    Output spatial dims: floor((H + 2*padding - k)/stride) + 1.
    """
    xb, squeeze = _split_batch(x)
    n, c, h, wdt = xb.shape
    o, cw, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    k = kh
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but weights expect {cw}")
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > wdt + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{wdt + 2 * padding}"
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    if k == 1 and stride == 1 and padding == 0:
        yt = w.reshape(o, c) @ xb.transpose(1, 0, 2, 3).reshape(c, -1)
        yt += b[:, None]
        y = np.ascontiguousarray(yt.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
        return y[0] if squeeze else y
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    if n > 1 and ho * wo >= _SMALL_CONV:
        # one sample at a time: keeps the patch matrix cache-resident,
        # which beats a single huge GEMM on this workload
        y = np.empty((n, o, ho, wo))
        wf = w.reshape(o, -1)
        for i in range(n):
            cols = _im2colT(xp[i : i + 1], k, stride, ho, wo)
            yi = wf @ cols
            yi += b[:, None]
            y[i] = yi.reshape(o, ho, wo)
        return y
    cols = _im2colT(xp, k, stride, ho, wo)
    yt = w.reshape(o, -1) @ cols
    yt += b[:, None]
    y = np.ascontiguousarray(yt.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    return y[0] if squeeze else y


def conv2d_input_grad(gy, w, x_shape, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input."""
    gyb, squeeze = _split_batch(gy)
    n, o, ho, wo = gyb.shape
    _, c, k, _ = w.shape
    h, wdt = x_shape[-2], x_shape[-1]
    if k == 1 and stride == 1 and padding == 0:
        gyt = np.ascontiguousarray(gyb.transpose(1, 0, 2, 3)).reshape(o, -1)
        gx = (w.reshape(o, c).T @ gyt).reshape(c, n, h, wdt).transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(gx)
        return gx[0] if squeeze else gx
    if stride == 1 and k - 1 - padding >= 0 and c > 4:
        # transposed-conv identity: correlate gy with flipped, channel-swapped
        # weights; reuses the tuned forward kernel instead of a scatter-add
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = conv2d_forward(gyb, wt, np.zeros(c), 1, k - 1 - padding)
        return gx[0] if squeeze else gx
    if n * ho * wo >= _SMALL_CONV:
        # few input channels: one GEMM into patch space, then a compiled
        # scatter-add (the transposed-conv GEMM would be badly shaped here)
        wt2 = np.ascontiguousarray(w.reshape(o, -1).T)
        gx = np.empty((n, c, h, wdt))
        for i in range(n):
            gcols = wt2 @ gyb[i].reshape(o, -1)
            gxp = np.zeros((c, h + 2 * padding, wdt + 2 * padding))
            _fast.col2im_add(gcols, k, stride, gxp)
            gx[i] = gxp[:, padding : padding + h, padding : padding + wdt]
        return gx[0] if squeeze else gx

    wt = w.reshape(o, -1).T

    def one(gy_i, gxp_i):
        gcols = wt @ gy_i.reshape(o, -1)
        g = gcols.reshape(c, k, k, ho, wo)
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    gxp_i[ci, i : i + stride * ho : stride, j : j + stride * wo : stride] += g[
                        ci, i, j
                    ]

    gxp = np.zeros((n, c, h + 2 * padding, wdt + 2 * padding))
    for i in range(n):
        one(gyb[i], gxp[i])
    gx = gxp[:, :, padding : padding + h, padding : padding + wdt]
    gx = np.ascontiguousarray(gx)
    return gx[0] if squeeze else gx


def conv2d_param_grads(x, gy, k: int, stride: int = 1, padding: int = 0):
    """Gradients of conv2d w.r.t. weights and bias."""
    xb, _ = _split_batch(x)
    gyb, _ = _split_batch(gy)
    n, c = xb.shape[0], xb.shape[1]
    o, ho, wo = gyb.shape[1], gyb.shape[2], gyb.shape[3]
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    gb = gyb.sum(axis=(0, 2, 3))
    if n > 1 and ho * wo >= _SMALL_CONV:
        gw_flat = np.zeros((o, c * k * k))
        for i in range(n):
            cols = _im2colT(xp[i : i + 1], k, stride, ho, wo)
            gw_flat += gyb[i].reshape(o, -1) @ cols.T
        return gw_flat.reshape(o, c, k, k), gb
    cols = _im2colT(xp, k, stride, ho, wo)
    gyt = np.ascontiguousarray(gyb.transpose(1, 0, 2, 3)).reshape(o, -1)
    gw = (gyt @ cols.T).reshape(o, c, k, k)
    return gw, gb


def relu_forward(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def maxpool2_forward(x, with_argmax: bool = False):
    """2x2 max pooling with stride 2 over the trailing two axes.

    With with_argmax=True also returns the window-local argmax in the fixed
    row-major window order (0,0),(0,1),(1,0),(1,1); the first maximum wins
    ties, which pins the tie-break.
    """
    h, wdt = x.shape[-2], x.shape[-1]
    if h % 2 or wdt % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{wdt}")
    lead = x.shape[:-2]
    flat = np.ascontiguousarray(x).reshape((-1, h, wdt))
    if not with_argmax:
        return _fast.pool_max(flat).reshape(lead + (h // 2, wdt // 2))
    out, am = _fast.pool_max_argmax(flat)
    return out.reshape(lead + (h // 2, wdt // 2)), am.reshape(lead + (h // 2, wdt // 2))


def maxpool2_backward(gy, am, x_shape) -> np.ndarray:
    """Scatter pooled gradients back to their argmax positions."""
    h2, w2 = gy.shape[-2], gy.shape[-1]
    flat = _fast.pool_scatter(
        np.ascontiguousarray(gy).reshape((-1, h2, w2)), am.reshape((-1, h2, w2))
    )
    return flat.reshape(x_shape)


def _channel_shape(x: np.ndarray):
    # broadcasting shape for per-channel vectors against (...,C,H,W)
    return (-1, 1, 1)


def batchnorm_forward(x, mean, var, gamma, beta, eps: float) -> np.ndarray:
    """Inference-mode normalization with fixed per-channel statistics."""
    if np.any(var < 0):
        raise ShapeError("batchnorm: variance must be non-negative")
    cs = _channel_shape(x)
    scale = gamma / np.sqrt(var + eps)
    return (x - mean.reshape(cs)) * scale.reshape(cs) + beta.reshape(cs)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tensor:
    """Shape-carrying f64 array recorded on a tape (tid indexes the tape)."""

    __slots__ = ("data", "tid")

    def __init__(self, data: np.ndarray, tid: int):
        self.data = data
        self.tid = tid

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tid={self.tid})"


class Tape:
    """Eager op recorder for one forward computation.

    Single-threaded; values are stored once per tensor id and treated as
    immutable after recording. backward() may be called repeatedly (plain or
    guided) and returns bit-identical results each time.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._nodes: list[tuple] = []  # (op, input_tids, out_tid, ctx)

    # -- recording ---------------------------------------------------------

    def leaf(self, data) -> Tensor:
        arr = as_f64(data)
        self._values.append(arr)
        return Tensor(arr, len(self._values) - 1)

    def _record(self, op: str, inputs: tuple, out: np.ndarray, ctx=None) -> Tensor:
        self._values.append(out)
        tid = len(self._values) - 1
        self._nodes.append((op, inputs, tid, ctx))
        return Tensor(out, tid)

    def value(self, t: Tensor) -> np.ndarray:
        return self._values[t.tid]

    # -- ops ----------------------------------------------------------------

    def conv2d(self, x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        y = conv2d_forward(x.data, w.data, b.data, stride, padding)
        return self._record(
            "conv2d", (x.tid, w.tid, b.tid), y, (stride, padding, x.data.shape, w.data.shape[-1])
        )

    def relu(self, x: Tensor) -> Tensor:
        return self._record("relu", (x.tid,), relu_forward(x.data))

    def maxpool2(self, x: Tensor) -> Tensor:
        y, am = maxpool2_forward(x.data, with_argmax=True)
        return self._record("maxpool2", (x.tid,), y, (am, x.data.shape))

    def batchnorm(self, x: Tensor, mean, var, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
        mean = as_f64(mean)
        var = as_f64(var)
        y = batchnorm_forward(x.data, mean, var, gamma.data, beta.data, eps)
        scale = gamma.data / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(-1, 1, 1)) / np.sqrt(var + eps).reshape(-1, 1, 1)
        return self._record(
            "batchnorm", (x.tid, gamma.tid, beta.tid), y, (scale, xhat)
        )

    def spatial_mean(self, x: Tensor) -> Tensor:
        return self._record("spatial_mean", (x.tid,), x.data.mean(axis=(-2, -1)), (x.data.shape,))

    def masked_spatial_mean(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Mean over the spatial positions where mask (H,W bool) is set."""
        if mask.shape != x.data.shape[-2:]:
            raise ShapeError(f"mask shape {mask.shape} != spatial dims {x.data.shape[-2:]}")
        count = int(mask.sum())
        if count == 0:
            raise ShapeError("masked_spatial_mean: empty mask")
        y = x.data[..., mask].mean(axis=-1)
        return self._record("masked_spatial_mean", (x.tid,), y, (mask, count, x.data.shape))

    def crop(self, x: Tensor, box) -> Tensor:
        """Spatial crop; box = (r0, r1, c0, c1) over the trailing two axes."""
        r0, r1, c0, c1 = box
        y = np.ascontiguousarray(x.data[..., r0:r1, c0:c1])
        return self._record("crop", (x.tid,), y, (box, x.data.shape))

    def index(self, x: Tensor, key) -> Tensor:
        y = np.asarray(x.data[key])
        return self._record("index", (x.tid,), y, (key, x.data.shape))

    def add(self, x: Tensor, y: Tensor) -> Tensor:
        if x.data.shape != y.data.shape:
            raise ShapeError(f"add: shape mismatch {x.data.shape} vs {y.data.shape}")
        return self._record("add", (x.tid, y.tid), x.data + y.data)

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self._record("scale", (x.tid,), x.data * c, (float(c),))

    def sum_all(self, x: Tensor) -> Tensor:
        return self._record("sum_all", (x.tid,), np.asarray(x.data.sum()), (x.data.shape,))

    def softmax_cross_entropy(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        """Mean cross-entropy of (N,K) logits against integer labels."""
        z = logits.data
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        sez = ez.sum(axis=1, keepdims=True)
        logp = z - zmax - np.log(sez)
        n = z.shape[0]
        loss = -logp[np.arange(n), labels].mean()
        probs = ez / sez
        return self._record("xent", (logits.tid,), np.asarray(loss), (probs, labels))

    # -- reverse sweep -------------------------------------------------------

    def backward(self, out: Tensor, wrt, guided: bool = False):
        """Reverse-mode gradients of scalar `out` w.r.t. the tensors in `wrt`.

        Returns (grads, unreachable): grads maps tid -> array for every
        requested tensor (zeros when out does not depend on it), and
        unreachable lists those tids. guided=True additionally zeroes relu
        gradients where the upstream gradient is negative.

        Work is pruned to nodes that lie on a path from a wrt tensor to the
        output, so e.g. weight gradients are never computed when only input
        gradients are requested.
        """
        if self._values[out.tid].size != 1:
            raise ShapeError(f"backward: output must be scalar, has shape {self._values[out.tid].shape}")
        wrt_tids = [t.tid for t in wrt]

        # tensors the output depends on
        reach_out = {out.tid}
        for op, inputs, tid, ctx in reversed(self._nodes):
            if tid in reach_out:
                reach_out.update(inputs)
        # tensors that depend on some wrt tensor (or are one)
        live = set(wrt_tids)
        for op, inputs, tid, ctx in self._nodes:
            if any(i in live for i in inputs):
                live.add(tid)

        grads: dict[int, np.ndarray] = {out.tid: np.ones_like(self._values[out.tid])}
        for op, inputs, tid, ctx in reversed(self._nodes):
            g = grads.pop(tid, None)
            if g is None or tid not in reach_out or tid not in live:
                continue
            self._backprop_node(op, inputs, g, ctx, grads, live, guided)

        result = {}
        unreachable = set()
        for t in wrt:
            if t.tid in grads:
                result[t.tid] = grads[t.tid]
            else:
                result[t.tid] = np.zeros_like(self._values[t.tid])
                if t.tid not in reach_out:
                    unreachable.add(t.tid)
        return result, unreachable

    def _accum(self, grads, tid, g, live):
        if tid not in live:
            return
        if tid in grads:
            grads[tid] = grads[tid] + g
        else:
            grads[tid] = g

    def _backprop_node(self, op, inputs, g, ctx, grads, live, guided):
        if op == "conv2d":
            xt, wt, bt = inputs
            stride, padding, x_shape, k = ctx
            if xt in live:
                self._accum(grads, xt, conv2d_input_grad(g, self._values[wt], x_shape, stride, padding), live)
            if wt in live or bt in live:
                gw, gb = conv2d_param_grads(self._values[xt], g, k, stride, padding)
                self._accum(grads, wt, gw, live)
                self._accum(grads, bt, gb, live)
        elif op == "relu":
            (xt,) = inputs
            x = self._values[xt]
            gx = _fast.relu_backward(
                np.ascontiguousarray(g).reshape(-1), x.reshape(-1), guided
            ).reshape(x.shape)
            self._accum(grads, xt, gx, live)
        elif op == "maxpool2":
            (xt,) = inputs
            am, x_shape = ctx
            self._accum(grads, xt, maxpool2_backward(g, am, x_shape), live)
        elif op == "batchnorm":
            xt, gt, bt = inputs
            scale, xhat = ctx
            red = (0, -2, -1) if g.ndim == 4 else (-2, -1)
            if xt in live:
                self._accum(grads, xt, g * scale.reshape(-1, 1, 1), live)
            if gt in live:
                self._accum(grads, gt, (g * xhat).sum(axis=red), live)
            if bt in live:
                self._accum(grads, bt, g.sum(axis=red), live)
        elif op == "spatial_mean":
            (xt,) = inputs
            (x_shape,) = ctx
            h, wdt = x_shape[-2], x_shape[-1]
            gx = np.broadcast_to(g[..., None, None] / (h * wdt), x_shape)
            self._accum(grads, xt, np.ascontiguousarray(gx), live)
        elif op == "masked_spatial_mean":
            (xt,) = inputs
            mask, count, x_shape = ctx
            gx = np.zeros(x_shape)
            gx[..., mask] = (g / count)[..., None]
            self._accum(grads, xt, gx, live)
        elif op == "crop":
            (xt,) = inputs
            (r0, r1, c0, c1), x_shape = ctx
            gx = np.zeros(x_shape)
            gx[..., r0:r1, c0:c1] = g
            self._accum(grads, xt, gx, live)
        elif op == "index":
            (xt,) = inputs
            key, x_shape = ctx
            gx = np.zeros(x_shape)
            gx[key] = g
            self._accum(grads, xt, gx, live)
        elif op == "add":
            xt, yt = inputs
            self._accum(grads, xt, g, live)
            self._accum(grads, yt, g, live)
        elif op == "scale":
            (xt,) = inputs
            self._accum(grads, xt, g * ctx[0], live)
        elif op == "sum_all":
            (xt,) = inputs
            (x_shape,) = ctx
            self._accum(grads, xt, np.full(x_shape, float(g)), live)
        elif op == "xent":
            (xt,) = inputs
            probs, labels = ctx
            n = probs.shape[0]
            gx = probs.copy()
            gx[np.arange(n), labels] -= 1.0
            gx *= float(g) / n
            self._accum(grads, xt, gx, live)
        else:  # pragma: no cover
            raise AssertionError(f"unknown op {op}")
