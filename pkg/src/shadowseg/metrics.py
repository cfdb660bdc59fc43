"""Balanced error rate family, dark-region evaluation, and report emission.

All metrics reduce to exact integer confusion counts. Dataset-level numbers
pool counts across images before computing ratios, matching the standard
shadow-detection protocol; per-class rates with an empty denominator are
reported as undefined (None) rather than silently zeroed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _as_binary(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise InputError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def confusion_counts(pred, gt, region=None) -> ConfusionCounts:
    """Exact pixel confusion counts, optionally restricted to a boolean region."""
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise InputError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if region is None:
        region = np.ones_like(gt, dtype=bool)
    else:
        region = np.asarray(region, dtype=bool)
        if region.shape != gt.shape:
            raise InputError(f"region shape {region.shape} != gt shape {gt.shape}")
    p, g = pred[region], gt[region]
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def ber(counts: ConfusionCounts):
    """(overall, shadow-region, non-shadow-region) balanced error rates, in percent.

    A side with no pixels of its class is undefined (None); the overall BER
    is the mean of the two sides and undefined when either is.
    """
    shadow = 100.0 * (1.0 - counts.tp / (counts.tp + counts.fn)) \
        if counts.tp + counts.fn > 0 else None
    nonshadow = 100.0 * (1.0 - counts.tn / (counts.tn + counts.fp)) \
        if counts.tn + counts.fp > 0 else None
    overall = (shadow + nonshadow) / 2.0 \
        if shadow is not None and nonshadow is not None else None
    return overall, shadow, nonshadow


def fpr(counts: ConfusionCounts):
    """False-positive rate over true negatives, in percent; None when undefined."""
    denom = counts.fp + counts.tn
    return 100.0 * counts.fp / denom if denom > 0 else None


def precision(counts: ConfusionCounts):
    """Precision of the shadow class, in percent; None when nothing was predicted."""
    denom = counts.tp + counts.fp
    return 100.0 * counts.tp / denom if denom > 0 else None


def value_channel(image) -> np.ndarray:
    """HSV value channel of an RGB image on [0, 1] floats: max over channels."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected RGB image, got shape {image.shape}")
    return image.max(axis=2)


def darkest_fraction_mask(image, fraction: float) -> np.ndarray:
    """Boolean mask of the floor(fraction * pixels) darkest pixels.

    Darkness is the HSV value channel; ties resolve by row-major pixel index
    so the mask is deterministic on constant regions.
    """
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"fraction {fraction} outside (0, 1]")
    v = value_channel(image)
    k = int(math.floor(fraction * v.size))
    flat = v.reshape(-1)
    order = np.argsort(flat, kind="stable")  # stable = row-major tie-break
    mask = np.zeros(v.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(v.shape)


@dataclass
class MetricReport:
    ber: float | None
    ber_shadow: float | None
    ber_nonshadow: float | None
    fpr: float | None
    precision: float | None
    pixel_count: int
    region_tag: str


def report_from_counts(counts: ConfusionCounts, region_tag: str) -> MetricReport:
    overall, shadow, nonshadow = ber(counts)
    return MetricReport(
        ber=overall, ber_shadow=shadow, ber_nonshadow=nonshadow,
        fpr=fpr(counts), precision=precision(counts),
        pixel_count=counts.total, region_tag=region_tag,
    )


def evaluate_dataset(triples, dark_fraction: float | None = None) -> list[MetricReport]:
    """Pooled metrics over (pred, gt, image) triples.

    Confusion counts are pooled across all images before any ratio is taken.
    With ``dark_fraction`` set, a second report restricted to each image's
    darkest-fraction pixels is appended. ``image`` may be None when no dark
    evaluation is requested.
    """
    pooled = ConfusionCounts()
    pooled_dark = ConfusionCounts()
    count = 0
    for item in triples:
        if len(item) != 3:
            raise InputError("expected (pred, gt, image) triples")
        pred, gt, image = item
        pooled = pooled + confusion_counts(pred, gt)
        if dark_fraction is not None:
            if image is None:
                raise InputError("dark-fraction evaluation needs the source image")
            region = darkest_fraction_mask(image, dark_fraction)
            pooled_dark = pooled_dark + confusion_counts(pred, gt, region)
        count += 1
    if count == 0:
        raise InputError("no evaluation triples supplied")
    reports = [report_from_counts(pooled, "all")]
    if dark_fraction is not None:
        reports.append(report_from_counts(pooled_dark, f"darkest_{dark_fraction:g}"))
    return reports


def _fmt(value, digits: int = 2) -> str:
    return "undef" if value is None else f"{value:.{digits}f}"


REPORT_CSV_COLUMNS = ("region", "ber", "ber_shadow", "ber_nonshadow",
                      "fpr", "precision", "pixel_count")


def reports_to_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_CSV_COLUMNS)
    for r in reports:
        writer.writerow([
            r.region_tag,
            *("" if v is None else f"{v:.6f}"
              for v in (r.ber, r.ber_shadow, r.ber_nonshadow, r.fpr, r.precision)),
            r.pixel_count,
        ])
    return buf.getvalue()


def format_report_table(reports: list[MetricReport], method: str = "ours") -> str:
    """Aligned-column text: BER/S/NS for the full region, plus a dark-region
    BER/FPR/Prec block when a restricted report is present."""
    by_tag = {r.region_tag: r for r in reports}
    if "all" not in by_tag:
        raise InputError("report list lacks the full-region entry")
    full = by_tag["all"]
    dark = next((r for r in reports if r.region_tag != "all"), None)
    lines = []
    if dark is None:
        lines.append(f"{'Method':<12} {'BER':>8} {'S':>8} {'NS':>8}")
        lines.append(f"{method:<12} {_fmt(full.ber):>8} {_fmt(full.ber_shadow):>8} "
                     f"{_fmt(full.ber_nonshadow):>8}")
    else:
        tag = dark.region_tag
        lines.append(f"{'':<12} {'All':>8} {tag:>26}")
        lines.append(f"{'Method':<12} {'BER':>8} {'BER':>8} {'FPR':>8} {'Prec':>8}")
        lines.append(f"{method:<12} {_fmt(full.ber):>8} {_fmt(dark.ber):>8} "
                     f"{_fmt(dark.fpr):>8} {_fmt(dark.precision):>8}")
    return "\n".join(lines) + "\n"
