"""The eleven attribution methods, each parameterized by a split layer.

Every method explains one pooled target logit of a GridEval (setting,
target cell, target class) with respect to the explained input at the split
layer, and returns a map at that layer's spatial resolution.

Families:
  backprop     gradient, ixg, intgrad, guided_bp - reductions of
               d(target)/d(activation), channel-summed with sign preserved
  activation   gradcam, gradcam_pp, ablation_cam, score_cam, layer_cam -
               weighted combinations of the split layer's channel maps
  perturbation occlusion (sliding-window fill), rise (random masks)

Smoothing (s_ixg / s_intgrad) convolves an existing signed map with a
Gaussian kernel of size K, sigma = K/4, before any upsampling or clamping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tape, finite_or_raise
from .errors import ConfigError, ShapeError
from .grids import GridEval
from .imaging import bilinear_upsample, gaussian_smooth
from .model import region_forward

BACKPROP_METHODS = ("gradient", "ixg", "intgrad", "guided_bp")
CAM_METHODS = ("gradcam", "gradcam_pp", "ablation_cam", "score_cam", "layer_cam")
PERTURBATION_METHODS = ("occlusion", "rise")
METHODS = BACKPROP_METHODS + CAM_METHODS + PERTURBATION_METHODS
SMOOTHED_VARIANTS = {"ixg": "s_ixg", "intgrad": "s_intgrad"}


@dataclass
class MethodParams:
    """Hyperparameters shared across the evaluation cube."""

    intgrad_steps: int = 50
    occl_input: tuple = (8, 4)  # kernel, stride at the input split
    occl_feature: tuple = (5, 2)  # kernel, stride at mid/final splits
    occl_fill: float = 0.0
    rise_masks: int = 64
    rise_lattice: int = 7
    rise_keep: float = 0.5

    def occlusion_for(self, layer: str):
        return self.occl_input if layer == "input" else self.occl_feature


@dataclass
class AttributionMap:
    values: np.ndarray  # (h, w) at the split layer's resolution, signed
    method: str
    layer: str
    setting: str
    target_cell: int
    target_class: int
    sample_id: int
    flag: str | None = None


def _finish(ev: GridEval, values, method, layer, flag=None) -> AttributionMap:
    finite_or_raise(values, f"{method} attribution map")
    return AttributionMap(
        values, method, layer, ev.setting, ev.target_cell, ev.target_class, ev.grid.sample_id, flag
    )


# ---------------------------------------------------------------------------
# backpropagation-based
# ---------------------------------------------------------------------------


def attribute_backprop(ev: GridEval, method: str, layer: str, params: MethodParams) -> AttributionMap:
    if method not in BACKPROP_METHODS:
        raise ConfigError(f"unknown backprop method {method!r}")
    a = ev.split_act(layer)
    if method == "gradient":
        values = ev.shared_gradient(layer).sum(axis=0)
    elif method == "ixg":
        values = (a * ev.shared_gradient(layer)).sum(axis=0)
    elif method == "guided_bp":
        values = ev.shared_gradient(layer, guided=True).sum(axis=0)
    else:  # intgrad, zero baseline, right-endpoint Riemann mean of path gradients
        values = (a * _intgrad_mean_gradient(ev, layer, params.intgrad_steps)).sum(axis=0)
    return _finish(ev, values, method, layer)


def _intgrad_mean_gradient(ev: GridEval, layer: str, steps: int, chunk: int = 0) -> np.ndarray:
    a = ev.split_act(layer)
    if not chunk:
        # keep per-chunk activations cache-sized: ~4 MB of f64 per conv map
        chunk = max(1, min(32, 32768 // (a.shape[-2] * a.shape[-1])))
    acc = np.zeros_like(a)
    ts = (np.arange(1, steps + 1)) / steps
    for start in range(0, steps, chunk):
        part = ts[start : start + chunk]
        batch = part[:, None, None, None] * a[None]
        tape = Tape()
        leaf = tape.leaf(batch)
        total, _ = ev.score_taped(tape, leaf, layer)
        grads, _ = tape.backward(total, [leaf])
        acc += grads[leaf.tid].sum(axis=0)
    return acc / steps


# ---------------------------------------------------------------------------
# activation-based
# ---------------------------------------------------------------------------


def attribute_cam(ev: GridEval, method: str, layer: str, params: MethodParams) -> AttributionMap:
    if method not in CAM_METHODS:
        raise ConfigError(f"unknown activation method {method!r}")
    a = ev.split_act(layer)
    flag = None
    if method == "gradcam":
        g = ev.shared_gradient(layer)
        alpha = g.mean(axis=(-2, -1))
        values = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    elif method == "layer_cam":
        g = ev.shared_gradient(layer)
        values = np.maximum((np.maximum(g, 0.0) * a).sum(axis=0), 0.0)
    elif method == "gradcam_pp":
        g = ev.shared_gradient(layer)
        g2 = g * g
        g3 = g2 * g
        den = 2.0 * g2 + a.sum(axis=(-2, -1))[:, None, None] * g3
        alpha_p = np.divide(g2, den, out=np.zeros_like(g2), where=den != 0)
        weights = (alpha_p * np.maximum(g, 0.0)).sum(axis=(-2, -1))
        values = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    elif method == "ablation_cam":
        y0 = ev.target_score(layer)
        c = a.shape[0]
        batch = np.repeat(a[None], c, axis=0)
        batch[np.arange(c), np.arange(c)] = 0.0
        drops = y0 - ev.score_raw(layer, batch)
        if y0 != 0.0:
            weights = drops / y0
        else:
            weights = drops
            flag = "ablation-unnormalized"
        values = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    else:  # score_cam
        amin = a.min(axis=(-2, -1), keepdims=True)
        amax = a.max(axis=(-2, -1), keepdims=True)
        rng_ = amax - amin
        masks = np.divide(a - amin, rng_, out=np.zeros_like(a), where=rng_ != 0)
        masked = a[None] * masks[:, None]
        scores = ev.score_raw(layer, masked)
        e = np.exp(scores - scores.max())
        alpha = e / e.sum()
        values = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    return _finish(ev, values, method, layer, flag)


# ---------------------------------------------------------------------------
# perturbation-based
# ---------------------------------------------------------------------------


def _pool_delta(ev: GridEval, layer: str, head_ref, dpatch, dbox) -> float:
    """Change of the pooled target logit given a local head-map change."""
    cls = ev.target_class
    r0, r1, c0, c1 = dbox
    new = dpatch[cls]
    old = head_ref[cls, r0:r1, c0:c1]
    if ev.setting == "dipart":
        m = ev._pool_mask[r0:r1, c0:c1]
        return float(((new - old) * m).sum() / ev._pool_mask.sum())
    n_pos = head_ref.shape[-2] * head_ref.shape[-1]
    return float((new.sum() - old.sum()) / n_pos)


def occlusion_windows(hw, k: int, s: int):
    h, w = hw
    return [(r, c) for r in range(0, h - k + 1, s) for c in range(0, w - k + 1, s)]


def attribute_occlusion(
    ev: GridEval,
    layer: str,
    k: int,
    s: int,
    fill: float = 0.0,
    windows=None,
) -> AttributionMap:
    """Slide a k x k window (stride s) over the explained input, replace its
    content with `fill`, and accumulate the drop of the target logit over
    each window's footprint, averaged by per-position cover counts.

    `windows` overrides the default full window set (used e.g. to restrict
    the evaluation to windows interior to one grid cell). Each window is
    re-evaluated locally through the explain stack rather than by a full
    forward pass; results match a full re-evaluation to f64 rounding.
    """
    a = ev.split_act(layer)
    c, h, w = a.shape
    if k > h or k > w:
        raise ShapeError(f"occlusion: kernel {k} exceeds input {h}x{w}")
    if not (k >= s >= 1):
        raise ConfigError(f"occlusion: need kernel >= stride >= 1, got {k}, {s}")
    if windows is None:
        windows = occlusion_windows((h, w), k, s)
    sub_layers = ev.explain_layers(layer)
    acts = ev.ref_acts(layer)
    head_ref = acts[-1]
    qbox = ev.quadrant_box(layer) if ev.setting == "difull" else None

    delta = np.zeros((h, w))
    cover = np.zeros((h, w))
    for r, col in windows:
        cover[r : r + k, col : col + k] += 1.0
        box = (r, r + k, col, col + k)
        if qbox is not None:
            ir0, ir1 = max(r, qbox[0]), min(r + k, qbox[1])
            ic0, ic1 = max(col, qbox[2]), min(col + k, qbox[3])
            if ir0 >= ir1 or ic0 >= ic1:
                continue  # window does not touch the target cell: no effect
            box = (ir0 - qbox[0], ir1 - qbox[0], ic0 - qbox[2], ic1 - qbox[2])
        patch = np.full((c, box[1] - box[0], box[3] - box[2]), fill)
        dpatch, dbox = region_forward(sub_layers, acts, patch, box)
        if dpatch is None:
            continue
        drop = -_pool_delta(ev, layer, head_ref, dpatch, dbox)
        if drop != 0.0:
            delta[r : r + k, col : col + k] += drop
    values = np.divide(delta, cover, out=np.zeros_like(delta), where=cover > 0)
    return _finish(ev, values, "occlusion", layer)


def rise_masks(hw, count: int, lattice: int, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Binary lattice masks, bilinearly upsampled with a random sub-cell shift."""
    h, w = hw
    cell_h = -(-h // lattice)
    cell_w = -(-w // lattice)
    up_h, up_w = (lattice + 1) * cell_h, (lattice + 1) * cell_w
    masks = np.empty((count, h, w))
    for i in range(count):
        g = (rng.random((lattice, lattice)) < keep_prob).astype(np.float64)
        up = bilinear_upsample(g, (up_h, up_w))
        dr = int(rng.integers(0, cell_h))
        dc = int(rng.integers(0, cell_w))
        masks[i] = up[dr : dr + h, dc : dc + w]
    return masks


def attribute_rise(
    ev: GridEval,
    layer: str,
    count: int,
    lattice: int = 7,
    keep_prob: float = 0.5,
    seed: int = 0,
    chunk: int = 0,
) -> AttributionMap:
    """Importance as the mask-weighted mean of target scores over `count`
    random multiplicative masks; a pure function of the seed."""
    if count < 1:
        raise ConfigError(f"rise: mask count must be >= 1, got {count}")
    a = ev.split_act(layer)
    if not chunk:
        chunk = max(1, min(64, 32768 // (a.shape[-2] * a.shape[-1])))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(4,))))
    masks = rise_masks(a.shape[-2:], count, lattice, keep_prob, rng)
    scores = np.empty(count)
    for start in range(0, count, chunk):
        part = masks[start : start + chunk]
        scores[start : start + len(part)] = ev.score_raw(layer, a[None] * part[:, None])
    values = np.tensordot(scores, masks, axes=1) / (count * keep_prob)
    return _finish(ev, values, "rise", layer)


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def smooth_map(amap: AttributionMap, k: int) -> AttributionMap:
    """Gaussian smoothing of the signed map (sigma = K/4); applied before
    upsampling and before any positive-clamping."""
    values = gaussian_smooth(amap.values, k)
    name = SMOOTHED_VARIANTS.get(amap.method, f"s_{amap.method}")
    return replace(amap, values=values, method=name)


def to_image_space(values: np.ndarray, target_hw) -> np.ndarray:
    """Bilinear upsampling of a signed map to grid resolution; maps already
    at grid resolution pass through unchanged."""
    if tuple(values.shape[-2:]) == tuple(target_hw):
        return values.copy()
    return bilinear_upsample(values, target_hw)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def compute_attribution(
    ev: GridEval, method: str, layer: str, params: MethodParams, rise_seed: int = 0
) -> AttributionMap:
    if method in BACKPROP_METHODS:
        return attribute_backprop(ev, method, layer, params)
    if method in CAM_METHODS:
        return attribute_cam(ev, method, layer, params)
    if method == "occlusion":
        k, s = params.occlusion_for(layer)
        return attribute_occlusion(ev, layer, k, s, params.occl_fill)
    if method == "rise":
        return attribute_rise(
            ev, layer, params.rise_masks, params.rise_lattice, params.rise_keep, rise_seed
        )
    raise ConfigError(f"unknown attribution method {method!r}")
