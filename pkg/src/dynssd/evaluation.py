"""Detection metrics, size-stratified reporting and report writers.

Positive units are ground-truth boxes: a box is a true positive when some
accepted detection in its frame overlaps it with IoU >= ``iou_match``.
Negative units are frames: a negative frame is a true negative when nothing
was accepted. A positive frame carrying at least one detection that matches
no ground truth adds one false positive.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

from .boxes import iou
from .synth import DatasetManifest, SizeBand, band_index

UNDEFINED = "undefined"


class UndefinedRateError(ZeroDivisionError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a non-negative integer, got {v}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedRateError("sensitivity is undefined with no positive units (tp + fn == 0)")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedRateError("specificity is undefined with no negative units (tn + fp == 0)")
    return c.tn / (c.tn + c.fp)


def rate_or_none(fn, c: ConfusionCounts) -> float | None:
    try:
        return fn(c)
    except UndefinedRateError:
        return None


def fmt_rate(v: float | None, digits: int = 3) -> str:
    return UNDEFINED if v is None else f"{v:.{digits}f}"


# --- scoring ----------------------------------------------------------------------


@dataclass(frozen=True)
class UnitOutcome:
    """One ground-truth box and whether it was found."""

    image_id: str
    relative_size: float
    detected: bool


def _align(results, manifest: DatasetManifest) -> list[tuple]:
    by_id = {}
    for r in results:
        if r.image_id in by_id:
            raise AlignmentError(f"duplicate result for image {r.image_id!r}")
        by_id[r.image_id] = r
    wanted = [it.image_id for it in manifest.items]
    missing = [i for i in wanted if i not in by_id]
    extra = sorted(set(by_id) - set(wanted))
    if missing or extra:
        raise AlignmentError(f"results/manifest mismatch: missing {missing}, extra {extra}")
    return [(it.annotation, by_id[it.image_id]) for it in manifest.items]


def score_units(results, manifest: DatasetManifest, iou_match: float = 0.5) -> tuple[list[UnitOutcome], ConfusionCounts]:
    if not 0.0 < iou_match <= 1.0:
        raise ValueError(f"iou_match must lie in (0, 1], got {iou_match}")
    units, fp, tn = [], 0, 0
    for ann, res in _align(results, manifest):
        boxes = [d.box for d in res.detections]
        if not ann.is_positive:
            if boxes:
                fp += 1
            else:
                tn += 1
            continue
        for g, r in zip(ann.boxes, ann.relative_sizes):
            units.append(UnitOutcome(ann.image_id, r, any(iou(b, g) >= iou_match for b in boxes)))
        if any(all(iou(b, g) < iou_match for g in ann.boxes) for b in boxes):
            fp += 1
    tp = sum(u.detected for u in units)
    return units, ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=len(units) - tp)


def score_results(results, manifest: DatasetManifest, iou_match: float = 0.5) -> ConfusionCounts:
    return score_units(results, manifest, iou_match)[1]


@dataclass(frozen=True)
class StratifiedReport:
    bands: tuple[SizeBand, ...]
    band_counts: tuple[tuple[int, int], ...]  # (tp, fn) per band
    overall: ConfusionCounts
    negative_frames: int

    def band_sensitivity(self, i: int) -> float | None:
        tp, fn = self.band_counts[i]
        return None if tp + fn == 0 else tp / (tp + fn)

    @property
    def sensitivity(self) -> float | None:
        return rate_or_none(sensitivity, self.overall)

    @property
    def specificity(self) -> float | None:
        return rate_or_none(specificity, self.overall)


def stratified_report(results, manifest: DatasetManifest, bands: Sequence[SizeBand], iou_match: float = 0.5):
    bands = tuple(bands)
    if not bands:
        raise ValueError("need at least one size band")
    units, overall = score_units(results, manifest, iou_match)
    counts = [[0, 0] for _ in bands]
    for u in units:
        try:
            k = band_index(bands, u.relative_size)
        except ValueError as exc:
            raise ValueError(f"{u.image_id}: relative size {u.relative_size:.4f} is outside every band") from exc
        counts[k][0 if u.detected else 1] += 1
    n_neg = sum(1 for it in manifest.items if not it.annotation.is_positive)
    return StratifiedReport(bands, tuple((a, b) for a, b in counts), overall, n_neg)


# --- comparison ---------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    sensitivity_a: float | None
    sensitivity_b: float | None
    specificity_a: float | None = None
    specificity_b: float | None = None

    @staticmethod
    def _delta(a, b):
        return None if a is None or b is None else b - a

    @property
    def sensitivity_delta(self) -> float | None:
        return self._delta(self.sensitivity_a, self.sensitivity_b)

    @property
    def specificity_delta(self) -> float | None:
        return self._delta(self.specificity_a, self.specificity_b)


def compare_runs(a: StratifiedReport, b: StratifiedReport) -> list[ComparisonRow]:
    """Per-band and overall deltas (b - a) in absolute rate units."""
    if a.bands != b.bands:
        raise ValueError("reports use different size bands")
    units_a = [t + f for t, f in a.band_counts]
    units_b = [t + f for t, f in b.band_counts]
    if units_a != units_b or a.negative_frames != b.negative_frames:
        raise ValueError("reports were scored on different manifests (unit counts differ)")
    rows = [
        ComparisonRow(band.label(), a.band_sensitivity(i), b.band_sensitivity(i)) for i, band in enumerate(a.bands)
    ]
    rows.append(ComparisonRow("overall", a.sensitivity, b.sensitivity, a.specificity, b.specificity))
    return rows


def compare_counts(a: ConfusionCounts, b: ConfusionCounts) -> tuple[float, float]:
    """(sensitivity delta, specificity delta), b - a."""
    return sensitivity(b) - sensitivity(a), specificity(b) - specificity(a)


# --- writers ------------------------------------------------------------------------


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_text(report: StratifiedReport, title: str = "") -> str:
    rows = []
    for i, band in enumerate(report.bands):
        tp, fn = report.band_counts[i]
        rows.append([band.label(), fmt_rate(report.band_sensitivity(i)), tp, fn])
    o = report.overall
    body = _table(["Relative size", "Sensitivity", "TP", "FN"], rows)
    summary = _table(
        ["Sensitivity", "Specificity", "TP", "FP", "TN", "FN"],
        [[fmt_rate(report.sensitivity), fmt_rate(report.specificity), o.tp, o.fp, o.tn, o.fn]],
    )
    head = f"{title}\n\n" if title else ""
    return head + body + "\n" + summary


REPORT_CSV_HEADER = ("band", "band_lower", "band_upper", "sensitivity", "tp", "fn", "specificity", "fp", "tn")


def report_csv(report: StratifiedReport) -> str:
    rows = []
    for i, band in enumerate(report.bands):
        tp, fn = report.band_counts[i]
        rows.append([band.label(), f"{band.lower:.6f}", f"{band.upper:.6f}", fmt_rate(report.band_sensitivity(i), 6), tp, fn, "", "", ""])
    o = report.overall
    rows.append(
        ["overall", f"{0.0:.6f}", f"{1.0:.6f}", fmt_rate(report.sensitivity, 6), o.tp, o.fn,
         fmt_rate(report.specificity, 6), o.fp, o.tn]
    )
    return _csv(REPORT_CSV_HEADER, rows)


def plot_csv(reports: dict[str, StratifiedReport]) -> str:
    """Long-format bar-chart data: one row per (run, band)."""
    rows = []
    for name, rep in reports.items():
        for i, band in enumerate(rep.bands):
            rows.append([name, band.label(), f"{band.lower:.6f}", f"{band.upper:.6f}", fmt_rate(rep.band_sensitivity(i), 6)])
    return _csv(["run", "band", "band_lower", "band_upper", "sensitivity"], rows)


def _delta_str(v: float | None) -> str:
    return UNDEFINED if v is None else f"{v:+.3f}"


def comparison_text(rows: Sequence[ComparisonRow], name_a: str, name_b: str) -> str:
    body = [
        [r.label, fmt_rate(r.sensitivity_a), fmt_rate(r.sensitivity_b), _delta_str(r.sensitivity_delta),
         fmt_rate(r.specificity_a) if r.label == "overall" else "", fmt_rate(r.specificity_b) if r.label == "overall" else "",
         _delta_str(r.specificity_delta) if r.label == "overall" else ""]
        for r in rows
    ]
    header = ["Band", f"Sens {name_a}", f"Sens {name_b}", "Delta sens", f"Spec {name_a}", f"Spec {name_b}", "Delta spec"]
    return _table(header, body)


ABLATION_HEADER = ("Upsampling Method", "Sensitivity", "Specificity", "TP", "FP", "TN", "FN")


def ablation_table(rows: Sequence[tuple[str, ConfusionCounts]]) -> str:
    body = [
        [name, fmt_rate(rate_or_none(sensitivity, c)), fmt_rate(rate_or_none(specificity, c)), c.tp, c.fp, c.tn, c.fn]
        for name, c in rows
    ]
    return _table(ABLATION_HEADER, body)


def ablation_csv(rows: Sequence[tuple[str, ConfusionCounts]]) -> str:
    body = [
        [name, fmt_rate(rate_or_none(sensitivity, c), 6), fmt_rate(rate_or_none(specificity, c), 6), c.tp, c.fp, c.tn, c.fn]
        for name, c in rows
    ]
    return _csv(ABLATION_HEADER, body)
