"""Small fully-convolutional classifier: build, train, split, filter, persist.

Architecture (plain variant): three conv3x3 -> relu -> maxpool2 blocks with
widths 16/32/64, then a 1x1 conv head producing 10 class maps. The batchnorm
variant inserts an inference-mode batchnorm after each block conv; its
statistics are frozen exponential moving averages collected during training.

The backbone contains only spatially covariant layers, so the same weights
accept both single images (S x S) and grids (2S x 2S). Class scores are
obtained by pooling the head's point-wise class maps; which positions get
pooled is decided by the caller (global pooling for training and plain
classification).

Split points name the layer index where the network is cut into
f_pre (layers before the index) and f_explain (layers from the index on):
"input" is 0 (f_pre is the identity), "mid" is the start of the third block,
"final" is the head (f_explain is the 1x1 classifier alone).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    batchnorm_forward,
    conv2d_forward,
    finite_or_raise,
    maxpool2_forward,
    relu_forward,
)
from .errors import ConfigError, FormatError, NumericError

NUM_CLASSES = 10
SPLIT_NAMES = ("input", "mid", "final")

_MAGIC = b"ATBN1"
_FILE_VERSION = 1
_KIND_CODES = {"conv": 0, "relu": 1, "maxpool": 2, "batchnorm": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class Conv:
    kind = "conv"

    def __init__(self, w, b, stride=1, padding=1):
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        self.stride = stride
        self.padding = padding

    def raw(self, x):
        return conv2d_forward(x, self.w, self.b, self.stride, self.padding)

    def taped(self, x: Tensor, tape: Tape) -> Tensor:
        return tape.conv2d(x, tape.leaf(self.w), tape.leaf(self.b), self.stride, self.padding)

    def geometry(self):
        return (self.w.shape[-1], self.stride, self.padding)


class ReLU:
    kind = "relu"

    def raw(self, x):
        return relu_forward(x)

    def taped(self, x, tape):
        return tape.relu(x)

    def geometry(self):
        return (1, 1, 0)


class MaxPool2:
    kind = "maxpool"

    def raw(self, x):
        return maxpool2_forward(x)

    def taped(self, x, tape):
        return tape.maxpool2(x)

    def geometry(self):
        return (2, 2, 0)


class BatchNorm:
    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.eps = eps

    def raw(self, x):
        return batchnorm_forward(x, self.mean, self.var, self.gamma, self.beta, self.eps)

    def taped(self, x, tape):
        return tape.batchnorm(x, self.mean, self.var, tape.leaf(self.gamma), tape.leaf(self.beta), self.eps)

    def geometry(self):
        return (1, 1, 0)


@dataclass
class ModelGraph:
    layers: list
    split_points: dict
    variant: str
    meta: dict = field(default_factory=dict)

    def split_index(self, name: str) -> int:
        if name not in self.split_points:
            raise ConfigError(f"unknown split point {name!r}; expected one of {SPLIT_NAMES}")
        return self.split_points[name]


def _rng(seed, *key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def build(variant: str = "plain", seed: int = 0) -> ModelGraph:
    """Initialize the classifier; `variant` is "plain" or "batchnorm"."""
    if variant not in ("plain", "batchnorm"):
        raise ConfigError(f"unknown model variant {variant!r}")
    rng = _rng(seed, 1)
    widths = [(3, 16), (16, 32), (32, 64)]
    layers = []
    for cin, cout in widths:
        w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
        layers.append(Conv(w, np.zeros(cout)))
        if variant == "batchnorm":
            layers.append(BatchNorm(cout))
        layers.append(ReLU())
        layers.append(MaxPool2())
    wh = rng.normal(0.0, np.sqrt(2.0 / 64), size=(NUM_CLASSES, 64, 1, 1))
    layers.append(Conv(wh, np.zeros(NUM_CLASSES), padding=0))
    block = 4 if variant == "batchnorm" else 3
    split_points = {"input": 0, "mid": 2 * block, "final": 3 * block}
    return ModelGraph(layers, split_points, variant)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def run_layers(layers, x, tape: Tape | None = None):
    """Apply layers in order; x is an ndarray (raw) or a Tensor (taped)."""
    if tape is None:
        fresh = False  # whether x is an intermediate this pass owns
        for layer in layers:
            if layer.kind == "relu" and fresh:
                np.maximum(x, 0.0, out=x)
            else:
                x = layer.raw(x)
            fresh = True
        return x
    for layer in layers:
        x = layer.taped(x, tape)
    return x


def collect_activations(layers, x) -> list:
    """Raw forward keeping every intermediate: result[i] is the input to
    layers[i]; result[len(layers)] is the final output."""
    acts = [x]
    for layer in layers:
        x = layer.raw(x)
        acts.append(x)
    return acts


def class_logits(model: ModelGraph, x) -> np.ndarray:
    """Globally pooled class scores for (C,H,W) or (N,C,H,W) input."""
    maps = run_layers(model.layers, x)
    return maps.mean(axis=(-2, -1))


def predict_proba(model: ModelGraph, x) -> np.ndarray:
    z = class_logits(model, x)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def split(model: ModelGraph, layer: str):
    """Virtual split into (f_pre, f_explain) with f_explain(f_pre(x)) == full forward."""
    idx = model.split_index(layer)
    pre_layers = model.layers[:idx]
    post_layers = model.layers[idx:]

    def f_pre(x):
        return run_layers(pre_layers, x)

    def f_explain(a, tape: Tape | None = None):
        return run_layers(post_layers, a, tape)

    return f_pre, f_explain


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _trainable_params(model: ModelGraph):
    params = []
    for layer in model.layers:
        if layer.kind == "conv":
            params.append((layer, "w"))
            params.append((layer, "b"))
        elif layer.kind == "batchnorm":
            params.append((layer, "gamma"))
            params.append((layer, "beta"))
    return params


def train(
    model: ModelGraph,
    pixels: np.ndarray,
    labels: np.ndarray,
    epochs: int = 30,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
    bn_momentum: float = 0.1,
) -> dict:
    """Mini-batch SGD with momentum on cross-entropy over pooled class maps.

    Batchnorm layers normalize each batch with its own statistics (treated
    as constants in the backward pass) and accumulate running averages that
    become the frozen inference statistics. Deterministic for a fixed seed.
    """
    if len(pixels) == 0:
        raise ConfigError("train: empty dataset")
    params = _trainable_params(model)
    velocity = [np.zeros_like(getattr(layer, name)) for layer, name in params]
    n = len(pixels)
    history = []
    for epoch in range(epochs):
        order = _rng(seed, 2, epoch).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = pixels[idx]
            yb = labels[idx]
            tape = Tape()
            t = tape.leaf(xb)
            leaves = {}
            for layer in model.layers:
                if layer.kind == "batchnorm":
                    mu = t.data.mean(axis=(0, 2, 3))
                    var = t.data.var(axis=(0, 2, 3))
                    layer.mean = (1 - bn_momentum) * layer.mean + bn_momentum * mu
                    layer.var = (1 - bn_momentum) * layer.var + bn_momentum * var
                    g, b = tape.leaf(layer.gamma), tape.leaf(layer.beta)
                    leaves[id(layer)] = (g, b)
                    t = tape.batchnorm(t, mu, var, g, b, layer.eps)
                elif layer.kind == "conv":
                    w, b = tape.leaf(layer.w), tape.leaf(layer.b)
                    leaves[id(layer)] = (w, b)
                    t = tape.conv2d(t, w, b, layer.stride, layer.padding)
                else:
                    t = layer.taped(t, tape)
            pooled = tape.spatial_mean(t)
            loss = tape.softmax_cross_entropy(pooled, yb)
            if not np.isfinite(loss.data):
                raise NumericError(f"training diverged: loss={float(loss.data)} at epoch {epoch}")
            epoch_loss += float(loss.data) * len(idx)

            wrt = []
            for layer, name in params:
                pair = leaves[id(layer)]
                wrt.append(pair[0] if name in ("w", "gamma") else pair[1])
            grads, _ = tape.backward(loss, wrt)
            for vi, ((layer, name), t_leaf) in enumerate(zip(params, wrt)):
                g = grads[t_leaf.tid]
                velocity[vi] = momentum * velocity[vi] - lr * g
                setattr(layer, name, getattr(layer, name) + velocity[vi])
        history.append(epoch_loss / n)
    model.meta.update({"train_seed": seed, "epochs": epochs, "lr": lr, "final_loss": history[-1]})
    return {"loss": history}


def accuracy(model: ModelGraph, pixels, labels, batch_size: int = 64) -> float:
    hits = 0
    for start in range(0, len(pixels), batch_size):
        z = class_logits(model, pixels[start : start + batch_size])
        hits += int((z.argmax(axis=-1) == labels[start : start + batch_size]).sum())
    return hits / len(pixels)


def filter_confident(model: ModelGraph, pixels, labels, threshold: float, min_per_class: int = 25, batch_size: int = 64):
    """Indices whose true-class softmax probability is >= threshold.

    Returns (indices, warning): warning is a message naming classes with
    fewer than min_per_class confident images (grid sampling may starve),
    or None.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"confidence threshold must be in (0,1), got {threshold}")
    keep = []
    for start in range(0, len(pixels), batch_size):
        probs = predict_proba(model, pixels[start : start + batch_size])
        sel = probs[np.arange(len(probs)), labels[start : start + batch_size]] >= threshold
        keep.extend(start + i for i in np.flatnonzero(sel))
    keep = np.asarray(keep, dtype=np.int64)
    counts = np.bincount(labels[keep], minlength=NUM_CLASSES) if len(keep) else np.zeros(NUM_CLASSES, int)
    starved = [c for c in range(NUM_CLASSES) if counts[c] < min_per_class]
    warning = None
    if starved:
        warning = "confident pool below {} images for classes: {}".format(
            min_per_class, ", ".join(map(str, starved))
        )
    return keep, warning


# ---------------------------------------------------------------------------
# receptive-field geometry
# ---------------------------------------------------------------------------


def output_geometry(layers):
    """(jump, offset, rf) of the stack's output grid in input pixel units.

    Output position p sits at input coordinate offset + p * jump (pixel
    centers); rf is the receptive-field side length in input pixels.
    """
    jump, offset, rf = 1.0, 0.0, 1.0
    for layer in layers:
        k, s, p = layer.geometry()
        offset += ((k - 1) / 2.0 - p) * jump
        rf += (k - 1) * jump
        jump *= s
    return jump, offset, rf


# ---------------------------------------------------------------------------
# local re-evaluation after a windowed input change (occlusion fast path)
# ---------------------------------------------------------------------------


def _gather_region(full: np.ndarray, patch, box, lo_r, hi_r, lo_c, hi_c):
    """Values of an activation on [lo_r,hi_r) x [lo_c,hi_c), reading `patch`
    inside `box` and `full` elsewhere; out-of-image area is zero (padding)."""
    c = full.shape[0]
    out = np.zeros((c, hi_r - lo_r, hi_c - lo_c))
    h, w = full.shape[-2], full.shape[-1]
    r0, r1 = max(lo_r, 0), min(hi_r, h)
    c0, c1 = max(lo_c, 0), min(hi_c, w)
    out[:, r0 - lo_r : r1 - lo_r, c0 - lo_c : c1 - lo_c] = full[:, r0:r1, c0:c1]
    if patch is not None:
        br0, br1, bc0, bc1 = box
        pr0, pr1 = max(br0, lo_r), min(br1, hi_r)
        pc0, pc1 = max(bc0, lo_c), min(bc1, hi_c)
        if pr0 < pr1 and pc0 < pc1:
            out[:, pr0 - lo_r : pr1 - lo_r, pc0 - lo_c : pc1 - lo_c] = patch[
                :, pr0 - br0 : pr1 - br0, pc0 - bc0 : pc1 - bc0
            ]
    return out


def region_forward(layers, acts, patch: np.ndarray, box):
    """Propagate a spatially-local change through the stack.

    acts: per-layer reference activations from collect_activations().
    patch/box: replacement values on box = (r0, r1, c0, c1) of acts[0].
    Returns (patch, box) describing how the final output differs from
    acts[-1]; everything outside the returned box is unchanged.

    Intended for sliding-window occlusion where recomputing the full
    forward for every window would dominate the runtime; produces the same
    values as a full forward up to f64 rounding.
    """
    r0, r1, c0, c1 = box
    for li, layer in enumerate(layers):
        full = acts[li]
        h, w = full.shape[-2], full.shape[-1]
        if layer.kind == "conv":
            k, s, p = layer.geometry()
            # output rows whose window [o*s-p, o*s-p+k) intersects [r0, r1)
            ho = (h + 2 * p - k) // s + 1
            wo = (w + 2 * p - k) // s + 1
            or0 = max(0, -((-(r0 + p - k + 1)) // s))  # ceil((r0+p-k+1)/s)
            or1 = min(ho, (r1 - 1 + p) // s + 1)
            oc0 = max(0, -((-(c0 + p - k + 1)) // s))
            oc1 = min(wo, (c1 - 1 + p) // s + 1)
            if or0 >= or1 or oc0 >= oc1:
                return None, None
            inp = _gather_region(
                full, patch, box, or0 * s - p, (or1 - 1) * s - p + k, oc0 * s - p, (oc1 - 1) * s - p + k
            )
            patch = conv2d_forward(inp, layer.w, layer.b, s, 0)
            box = (or0, or1, oc0, oc1)
        elif layer.kind == "maxpool":
            or0, or1 = r0 // 2, (r1 + 1) // 2
            oc0, oc1 = c0 // 2, (c1 + 1) // 2
            inp = _gather_region(full, patch, box, or0 * 2, or1 * 2, oc0 * 2, oc1 * 2)
            patch = maxpool2_forward(inp)
            box = (or0, or1, oc0, oc1)
        elif layer.kind == "relu":
            patch = relu_forward(patch)
        else:  # batchnorm
            patch = layer.raw(patch)
        r0, r1, c0, c1 = box
    return patch, box


# ---------------------------------------------------------------------------
# checkpoint format: magic ATBN1, layer table, little-endian f64 buffers
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelGraph, path) -> None:
    meta = model.meta
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IBI", _FILE_VERSION, 1 if model.variant == "batchnorm" else 0, len(model.layers)))
        for layer in model.layers:
            f.write(struct.pack("<B", _KIND_CODES[layer.kind]))
            if layer.kind == "conv":
                o, c, k, _ = layer.w.shape
                f.write(struct.pack("<IIIII", o, c, k, layer.stride, layer.padding))
                f.write(layer.w.astype("<f8").tobytes())
                f.write(layer.b.astype("<f8").tobytes())
            elif layer.kind == "batchnorm":
                f.write(struct.pack("<Id", layer.mean.shape[0], layer.eps))
                for buf in (layer.mean, layer.var, layer.gamma, layer.beta):
                    f.write(buf.astype("<f8").tobytes())
        f.write(
            struct.pack(
                "<QIddd",
                int(meta.get("train_seed", 0)),
                int(meta.get("epochs", 0)),
                float(meta.get("lr", 0.0)),
                float(meta.get("train_acc", 0.0)),
                float(meta.get("eval_acc", 0.0)),
            )
        )


def load_checkpoint(path) -> ModelGraph:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 5 or raw[:5] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    off = 5
    try:
        file_ver, variant_code, n_layers = struct.unpack_from("<IBI", raw, off)
        off += struct.calcsize("<IBI")
        if file_ver != _FILE_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {file_ver}")
        layers = []
        for _ in range(n_layers):
            (kind_code,) = struct.unpack_from("<B", raw, off)
            off += 1
            kind = _KIND_NAMES.get(kind_code)
            if kind is None:
                raise FormatError(f"{path}: unknown layer kind code {kind_code}")
            if kind == "conv":
                o, c, k, stride, padding = struct.unpack_from("<IIIII", raw, off)
                off += struct.calcsize("<IIIII")
                w = np.frombuffer(raw, dtype="<f8", count=o * c * k * k, offset=off).reshape(o, c, k, k)
                off += 8 * o * c * k * k
                b = np.frombuffer(raw, dtype="<f8", count=o, offset=off)
                off += 8 * o
                layers.append(Conv(w.copy(), b.copy(), stride, padding))
            elif kind == "batchnorm":
                ch, eps = struct.unpack_from("<Id", raw, off)
                off += struct.calcsize("<Id")
                bn = BatchNorm(ch, eps)
                for name in ("mean", "var", "gamma", "beta"):
                    setattr(bn, name, np.frombuffer(raw, dtype="<f8", count=ch, offset=off).copy())
                    off += 8 * ch
                layers.append(bn)
            elif kind == "relu":
                layers.append(ReLU())
            else:
                layers.append(MaxPool2())
        seed, epochs, lr, train_acc, eval_acc = struct.unpack_from("<QIddd", raw, off)
        off += struct.calcsize("<QIddd")
    except struct.error as e:
        raise FormatError(f"{path}: truncated checkpoint ({e})") from None

    variant = "batchnorm" if variant_code else "plain"
    block = 4 if variant == "batchnorm" else 3
    split_points = {"input": 0, "mid": 2 * block, "final": 3 * block}
    meta = {"train_seed": seed, "epochs": epochs, "lr": lr, "train_acc": train_acc, "eval_acc": eval_acc}
    return ModelGraph(layers, split_points, variant, meta)
