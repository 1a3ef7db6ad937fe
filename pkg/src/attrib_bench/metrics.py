"""Localization scoring, aggregate attribution panels, rank correlation.

The localization score of a map for a target cell is the fraction of total
positive attribution mass that falls inside that cell's pixel box. It is
undefined when the map has no positive mass; such records are flagged and
excluded from aggregation (their count is reported).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

NO_POSITIVE_MASS = "no-positive-mass"
AGGATT_EDGES = (0, 2, 5, 50, 95, 98, 100)


def localization_score(values: np.ndarray, cell_boxes, target_cell: int):
    """(score, flag) of an image-space map: positive mass inside the target
    cell over total positive mass. flag is NO_POSITIVE_MASS (score nan) when
    the map has no positive values."""
    h, w = values.shape[-2], values.shape[-1]
    r0, r1, c0, c1 = cell_boxes[target_cell]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ShapeError(f"cell box {(r0, r1, c0, c1)} outside map {h}x{w}")
    pos = np.maximum(values, 0.0)
    total = pos.sum()
    if total == 0.0:
        return float("nan"), NO_POSITIVE_MASS
    return float(pos[r0:r1, c0:c1].sum() / total), None


@dataclass
class AggAttPanel:
    edges: tuple  # percentile edges
    bin_maps: list  # one mean map per bin
    bin_members: list  # ordered sample_id lists per bin
    excluded: list  # sample_ids dropped for lack of positive mass


def aggatt(records, edges=AGGATT_EDGES) -> AggAttPanel:
    """Aggregate maps into percentile bins of descending localization score.

    records: iterables of (sample_id, score_or_nan, image_space_map).
    Maps are normalized to unit positive mass before averaging so that the
    aggregate is invariant to per-sample positive rescaling. Sorting is by
    descending score with ties broken by ascending sample_id; bin k holds
    ranks in [edges[k]*N//100, edges[k+1]*N//100).
    """
    records = list(records)
    if not records:
        raise ConfigError("aggatt: empty record set")
    excluded = [sid for sid, score, _ in records if not np.isfinite(score)]
    kept = [(sid, score, m) for sid, score, m in records if np.isfinite(score)]
    if not kept:
        raise ConfigError("aggatt: no records with positive mass")
    kept.sort(key=lambda rec: (-rec[1], rec[0]))
    n = len(kept)
    bounds = [e * n // 100 for e in edges]
    bin_maps = []
    bin_members = []
    for k in range(len(edges) - 1):
        lo, hi = bounds[k], bounds[k + 1]
        if lo >= hi:
            raise ConfigError(
                f"aggatt: bin {edges[k]}-{edges[k + 1]}% empty for {n} records"
            )
        acc = None
        members = []
        for sid, score, m in kept[lo:hi]:
            norm = m / np.maximum(m, 0.0).sum()
            acc = norm if acc is None else acc + norm
            members.append(sid)
        bin_maps.append(acc / (hi - lo))
        bin_members.append(members)
    return AggAttPanel(tuple(edges), bin_maps, bin_members, excluded)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Rank correlation with average ranks on ties (Pearson of the ranks).

    Returns nan when either side has zero rank variance (undefined).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"spearman: need equal-length 1-D inputs, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ConfigError("spearman: need at least 2 paired scores")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    va = (da * da).sum()
    vb = (db * db).sum()
    if va == 0.0 or vb == 0.0:
        return float("nan")
    return float((da * db).sum() / np.sqrt(va * vb))
