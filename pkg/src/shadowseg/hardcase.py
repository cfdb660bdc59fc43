"""Hard-case subset construction from dark non-shadow statistics.

For each image and percentile p, an image-adaptive darkness threshold is
the p-th percentile (nearest rank) of the brightness channel; the hardness
signal is the fraction of non-shadow pixels strictly below it. Images are
ranked per percentile (rank 1 = largest fraction), averaged across
percentiles, and the smallest mean ranks form the hard subset.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .metrics import value_channel

DEFAULT_PERCENTILES = (5, 10, 15)
DEFAULT_FRACTION = 0.2


def darkness_threshold(image, percentile: float) -> float:
    """Nearest-rank percentile of the brightness channel.

    tau = k-th smallest value with k = ceil(p/100 * pixels); no
    interpolation, so the threshold is always an observed pixel value.
    """
    if not 0.0 < percentile <= 100.0:
        raise InputError(f"percentile {percentile} outside (0, 100]")
    v = value_channel(image).reshape(-1)
    if v.size == 0:
        raise InputError("empty image")
    k = math.ceil(percentile / 100.0 * v.size)
    return float(np.partition(v, k - 1)[k - 1])


class RatioResult(NamedTuple):
    ratio: float
    degenerate: bool  # True when the image has no non-shadow pixels


def dark_nonshadow_ratio(image, gt_mask, percentile: float) -> RatioResult:
    """Fraction of non-shadow pixels strictly darker than the threshold.

    All-shadow images have no non-shadow region; they score 0 and carry a
    degenerate flag so the ranking stays total.
    """
    gt = np.asarray(gt_mask)
    if not np.isin(gt, (0, 1)).all():
        raise InputError("gt_mask must be binary (0/1)")
    v = value_channel(image)
    if gt.shape != v.shape:
        raise InputError(f"mask shape {gt.shape} != image shape {v.shape}")
    nonshadow = gt == 0
    denom = int(nonshadow.sum())
    if denom == 0:
        return RatioResult(0.0, True)
    tau = darkness_threshold(image, percentile)
    dark = int(np.count_nonzero(v[nonshadow] < tau))
    return RatioResult(dark / denom, False)


@dataclass
class ImageRanking:
    image_id: str
    ratios: dict[float, float]
    ranks: dict[float, int]
    mean_rank: float
    selected: bool
    degenerate: bool


@dataclass
class HardCaseRanking:
    entries: list[ImageRanking]  # sorted by image id
    percentiles: tuple[float, ...]
    fraction: float

    def selected_ids(self) -> list[str]:
        """Selected ids in hardness order (smallest mean rank first)."""
        picked = [e for e in self.entries if e.selected]
        picked.sort(key=lambda e: (e.mean_rank, e.image_id))
        return [e.image_id for e in picked]


def rank_and_select(samples, percentiles=DEFAULT_PERCENTILES,
                    fraction: float = DEFAULT_FRACTION) -> HardCaseRanking:
    """Rank (id, image, gt_mask) samples by hardness and mark the top fraction.

    Per percentile, rank 1 goes to the largest dark non-shadow ratio with
    ties broken by ascending id; selection takes the ceil(fraction * N)
    smallest mean ranks, ties again by id.
    """
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"fraction {fraction} outside (0, 1]")
    percentiles = tuple(percentiles)
    if not percentiles:
        raise InputError("need at least one percentile")
    items = []
    for image_id, image, gt_mask in samples:
        result = {p: dark_nonshadow_ratio(image, gt_mask, p) for p in percentiles}
        items.append((str(image_id),
                      {p: result[p].ratio for p in percentiles},
                      any(result[p].degenerate for p in percentiles)))
    if not items:
        raise InputError("empty dataset")
    ids = [it[0] for it in items]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate image ids")

    ranks: dict[str, dict[float, int]] = {i: {} for i in ids}
    for p in percentiles:
        ordered = sorted(items, key=lambda it: (-it[1][p], it[0]))
        for position, it in enumerate(ordered, start=1):
            ranks[it[0]][p] = position
    mean_ranks = {i: sum(ranks[i].values()) / len(percentiles) for i in ids}

    n_selected = math.ceil(fraction * len(items))
    chosen = set(sorted(ids, key=lambda i: (mean_ranks[i], i))[:n_selected])

    entries = [
        ImageRanking(image_id=i, ratios=dict(r), ranks=dict(ranks[i]),
                     mean_rank=mean_ranks[i], selected=i in chosen, degenerate=flag)
        for i, r, flag in sorted(items, key=lambda it: it[0])
    ]
    return HardCaseRanking(entries=entries, percentiles=percentiles, fraction=fraction)


def ranking_to_csv(ranking: HardCaseRanking) -> str:
    """One line per image: id, per-percentile ratios, mean rank, selection, flag."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["id"] + [f"r_{p:g}" for p in ranking.percentiles] \
        + ["mean_rank", "selected", "degenerate"]
    writer.writerow(header)
    for e in ranking.entries:
        writer.writerow([
            e.image_id,
            *(f"{e.ratios[p]:.8f}" for p in ranking.percentiles),
            f"{e.mean_rank:.6f}", int(e.selected), int(e.degenerate),
        ])
    return buf.getvalue()
