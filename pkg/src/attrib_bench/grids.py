"""2x2 evaluation grids and the three setting-specific forward definitions.

A grid stacks four images from a confident pool. The three settings differ
in how class scores are pooled and in what may influence them:

  gridpg  - one backbone pass over the grid, head applied point-wise, one
            globally averaged logit per class; any cell may influence any
            logit. Grids use four distinct classes.
  difull  - each cell is passed through the backbone alone and gets its own
            head, pooled over that cell only; cross-cell influence is
            impossible by construction. Grids repeat the top-left class in
            the bottom-right cell.
  dipart  - one backbone pass like gridpg, but each cell's logits pool only
            the head positions whose receptive-field center lies above that
            cell; cross-cell influence is limited to receptive-field
            overlap. Same grid composition as difull.

For attribution at a split layer, difull activations are the per-cell
backbone outputs re-tiled into one full-grid map, so activation-based
methods see the same map geometry in every setting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .dataset import Dataset
from .errors import ConfigError
from .model import ModelGraph, collect_activations, output_geometry, run_layers

SETTINGS = ("gridpg", "difull", "dipart")
GRID_N = 2  # 2x2 grids; the machinery below is generic in the cell side only


@dataclass
class GridSample:
    pixels: np.ndarray  # (3, 2S, 2S)
    cell_labels: tuple  # 4 class ids, row-major (TL, TR, BL, BR)
    source_ids: tuple  # dataset sample ids of the constituent images
    setting: str
    sample_id: int
    seed: int

    @property
    def side(self) -> int:
        return self.pixels.shape[-1] // GRID_N

    def cell_boxes(self):
        """Pixel rectangles (r0, r1, c0, c1) per cell, row-major."""
        s = self.side
        return [
            (r * s, (r + 1) * s, c * s, (c + 1) * s)
            for r in range(GRID_N)
            for c in range(GRID_N)
        ]


@dataclass
class CellLogits:
    logits: np.ndarray  # (4, 10)
    positions: list  # bool mask over head positions contributing to each cell


def assemble_grid(images, labels, setting, sample_id=0, source_ids=None, seed=0) -> GridSample:
    """Compose four (3,S,S) images row-major into one GridSample."""
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    if len(images) != 4 or len(labels) != 4:
        raise ConfigError("assemble_grid needs exactly four images and labels")
    s = images[0].shape[-1]
    grid = np.zeros((images[0].shape[0], GRID_N * s, GRID_N * s))
    for i, img in enumerate(images):
        r, c = divmod(i, GRID_N)
        grid[:, r * s : (r + 1) * s, c * s : (c + 1) * s] = img
    if source_ids is None:
        source_ids = tuple(range(4))
    return GridSample(grid, tuple(int(x) for x in labels), tuple(source_ids), setting, sample_id, seed)


def _grid_rng(seed, index) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(3, index))
    return np.random.Generator(np.random.PCG64(ss))


def build_grids(ds: Dataset, confident_ids, setting: str, count: int, seed: int) -> list:
    """Sample `count` grids from the confident pool, deterministically.

    gridpg grids use four distinct classes; difull/dipart grids repeat the
    top-left class in the bottom-right cell (distinct images) and use two
    further distinct classes. Sampling within a grid is without replacement.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    confident_ids = np.asarray(confident_ids)
    pool = {}
    for sid in confident_ids:
        pool.setdefault(int(ds.labels[sid]), []).append(int(sid))
    classes = sorted(pool)
    if len(classes) < 4:
        raise ConfigError(f"confident pool covers only {len(classes)} classes; grids need 4")
    repeat = setting in ("difull", "dipart")
    grids = []
    for i in range(count):
        rng = _grid_rng(seed, i)
        if repeat:
            chosen = rng.choice(classes, size=3, replace=False)
            c0 = int(chosen[0])
            if len(pool[c0]) < 2:
                raise ConfigError(f"confident pool starving: class {c0} has fewer than 2 images")
            tl_br = rng.choice(pool[c0], size=2, replace=False)
            others = [int(rng.choice(pool[int(c)])) for c in chosen[1:]]
            ids = (int(tl_br[0]), others[0], others[1], int(tl_br[1]))
            labels = (c0, int(chosen[1]), int(chosen[2]), c0)
        else:
            chosen = rng.choice(classes, size=4, replace=False)
            ids = tuple(int(rng.choice(pool[int(c)])) for c in chosen)
            labels = tuple(int(c) for c in chosen)
        images = [ds.pixels[sid] for sid in ids]
        grids.append(assemble_grid(images, labels, setting, sample_id=i, source_ids=ids, seed=seed))
    return grids


# ---------------------------------------------------------------------------
# receptive-field center assignment
# ---------------------------------------------------------------------------


def rf_center_map(model: ModelGraph, input_hw, cell_side: int) -> np.ndarray:
    """Cell index for every head position of an input_hw input.

    The center of each position's receptive field is computed from the
    cumulative stride/offset arithmetic of the layer stack; centers exactly
    on a cell border go to the lesser cell index.
    """
    jump, offset, _ = output_geometry(model.layers)
    h, w = input_hw
    ho = _out_positions(model, h)
    wo = _out_positions(model, w)
    rows = offset + jump * np.arange(ho)
    cols = offset + jump * np.arange(wo)

    def cell_of(centers):
        # border between cell m-1 and m lies at m*cell_side - 0.5 in center coords
        idx = np.ceil((centers + 0.5) / cell_side).astype(int) - 1
        return np.clip(idx, 0, None)

    return cell_of(rows)[:, None] * GRID_N + cell_of(cols)[None, :]


def _out_positions(model: ModelGraph, extent: int) -> int:
    for layer in model.layers:
        k, s, p = layer.geometry()
        extent = (extent + 2 * p - k) // s + 1
    return extent


# ---------------------------------------------------------------------------
# setting-specific forwards
# ---------------------------------------------------------------------------


def forward_gridpg(model: ModelGraph, grid: GridSample) -> np.ndarray:
    """Globally pooled class logits of the full grid."""
    maps = run_layers(model.layers, grid.pixels)
    return maps.mean(axis=(-2, -1))


def forward_difull(model: ModelGraph, grid: GridSample) -> CellLogits:
    """Per-cell logits from four disconnected backbone+head passes."""
    s = grid.side
    logits = np.empty((4, maps_channels(model)))
    masks = []
    ho = _out_positions(model, GRID_N * s)
    half = ho // GRID_N
    for i, (r0, r1, c0, c1) in enumerate(grid.cell_boxes()):
        cell_maps = run_layers(model.layers, grid.pixels[:, r0:r1, c0:c1])
        logits[i] = cell_maps.mean(axis=(-2, -1))
        m = np.zeros((ho, ho), dtype=bool)
        rr, cc = divmod(i, GRID_N)
        m[rr * half : (rr + 1) * half, cc * half : (cc + 1) * half] = True
        masks.append(m)
    return CellLogits(logits, masks)


def forward_dipart(model: ModelGraph, grid: GridSample) -> CellLogits:
    """Single backbone pass; cell logits pool head positions by RF center."""
    maps = run_layers(model.layers, grid.pixels)
    cell_map = rf_center_map(model, grid.pixels.shape[-2:], grid.side)
    logits = np.empty((4, maps.shape[0]))
    masks = []
    for i in range(4):
        m = cell_map == i
        logits[i] = maps[:, m].mean(axis=-1)
        masks.append(m)
    return CellLogits(logits, masks)


def maps_channels(model: ModelGraph) -> int:
    return model.layers[-1].w.shape[0]


def retile_cells(cell_arrays) -> np.ndarray:
    """Place four per-cell activations (C,h,w) at their grid quadrants."""
    c, h, w = cell_arrays[0].shape
    out = np.zeros((c, GRID_N * h, GRID_N * w))
    for i, arr in enumerate(cell_arrays):
        r, cc = divmod(i, GRID_N)
        out[:, r * h : (r + 1) * h, cc * w : (cc + 1) * w] = arr
    return out


# ---------------------------------------------------------------------------
# attribution-facing evaluation state
# ---------------------------------------------------------------------------


class GridEval:
    """Caches per-(model, grid) state shared by attribution methods.

    Exposes the explained input at each split layer (re-tiled per-cell
    activations for difull), scalar target scoring for raw and taped
    passes, and reference activations of the explain stack for the
    occlusion fast path. The target is one (cell, class) pair; scoring
    pools raw logits as dictated by the grid's setting.
    """

    def __init__(self, model: ModelGraph, grid: GridSample, target_cell: int = 0):
        self.model = model
        self.grid = grid
        self.setting = grid.setting
        self.target_cell = target_cell
        self.target_class = grid.cell_labels[target_cell]
        self._split_acts = {}
        self._cell_acts = {}
        self._ref_acts = {}
        self._shared = {}
        self._tapes = {}
        self._pool_mask = None
        if self.setting == "dipart":
            self._pool_mask = (
                rf_center_map(model, grid.pixels.shape[-2:], grid.side) == target_cell
            )

    # -- activations ---------------------------------------------------------

    def split_act(self, layer: str) -> np.ndarray:
        """Explained input at a split layer (full-grid resolution)."""
        if layer not in self._split_acts:
            idx = self.model.split_index(layer)
            if self.setting == "difull":
                cells = [self._cell_activations(i)[self._cell_layer_offset(idx)] for i in range(4)]
                self._split_acts[layer] = retile_cells(cells) if idx > 0 else self.grid.pixels
            else:
                self._split_acts[layer] = run_layers(self.model.layers[:idx], self.grid.pixels)
        return self._split_acts[layer]

    def _cell_layer_offset(self, idx: int) -> int:
        return idx  # cell activation lists are indexed like the full layer stack

    def _cell_activations(self, cell: int) -> list:
        if cell not in self._cell_acts:
            r0, r1, c0, c1 = self.grid.cell_boxes()[cell]
            self._cell_acts[cell] = collect_activations(
                self.model.layers, self.grid.pixels[:, r0:r1, c0:c1]
            )
        return self._cell_acts[cell]

    def explain_layers(self, layer: str) -> list:
        return self.model.layers[self.model.split_index(layer) :]

    def quadrant_box(self, layer: str):
        """Target cell's box in split-layer coordinates (difull cropping)."""
        a = self.split_act(layer)
        h, w = a.shape[-2], a.shape[-1]
        r, c = divmod(self.target_cell, GRID_N)
        hh, ww = h // GRID_N, w // GRID_N
        return (r * hh, (r + 1) * hh, c * ww, (c + 1) * ww)

    def ref_acts(self, layer: str) -> list:
        """Activations of the explain stack on the reference input.

        For difull these are the target cell's own activations (the stack is
        applied to the cropped quadrant)."""
        if layer not in self._ref_acts:
            if self.setting == "difull":
                idx = self.model.split_index(layer)
                self._ref_acts[layer] = self._cell_activations(self.target_cell)[idx:]
            else:
                self._ref_acts[layer] = collect_activations(
                    self.explain_layers(layer), self.split_act(layer)
                )
        return self._ref_acts[layer]

    # -- scalar target scoring ------------------------------------------------

    def pool_positions_count(self, head_hw) -> int:
        if self.setting == "gridpg":
            return head_hw[0] * head_hw[1]
        if self.setting == "dipart":
            return int(self._pool_mask.sum())
        return head_hw[0] * head_hw[1]  # difull: all positions of the cell's own map

    def score_raw(self, layer: str, a: np.ndarray):
        """Pooled target logit(s); a is (C,h,w) or a (B,C,h,w) batch."""
        if self.setting == "difull":
            r0, r1, c0, c1 = self.quadrant_box(layer)
            a = a[..., r0:r1, c0:c1]
        maps = run_layers(self.explain_layers(layer), a)
        sel = maps[..., self.target_class, :, :]
        if self.setting == "dipart":
            return sel[..., self._pool_mask].mean(axis=-1)
        return sel.mean(axis=(-2, -1))

    def score_taped(self, tape, a_tensor, layer: str):
        """Taped version of score_raw; returns a scalar Tensor (sums the
        per-sample scores when a_tensor is a batch)."""
        t = a_tensor
        if self.setting == "difull":
            t = tape.crop(t, self.quadrant_box(layer))
        for lay in self.explain_layers(layer):
            t = lay.taped(t, tape)
        cls = self.target_class
        if self.setting == "dipart":
            pooled = tape.masked_spatial_mean(t, self._pool_mask)
        else:
            pooled = tape.spatial_mean(t)
        if pooled.data.ndim == 2:  # batched (B, classes)
            per_sample = tape.index(pooled, (slice(None), cls))
            return tape.sum_all(per_sample), per_sample
        return tape.index(pooled, (cls,)), None

    def shared_gradient(self, layer: str, guided: bool = False) -> np.ndarray:
        """d(target logit)/d(split activation); one taped forward per layer,
        reused by the plain and guided backward passes."""
        key = (layer, guided)
        if key not in self._shared:
            if layer not in self._tapes:
                tape = Tape()
                leaf = tape.leaf(self.split_act(layer))
                y, _ = self.score_taped(tape, leaf, layer)
                self._tapes[layer] = (tape, leaf, y)
            tape, leaf, y = self._tapes[layer]
            grads, _ = tape.backward(y, [leaf], guided=guided)
            self._shared[key] = grads[leaf.tid]
        return self._shared[key]

    def target_score(self, layer: str) -> float:
        return float(self.score_raw(layer, self.split_act(layer)))
