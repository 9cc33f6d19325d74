"""Counting, classification, validity and hallucination metrics plus aggregation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dkb
from .dkb import DentalOntology, StructuredReport

# Ablation variants in reporting order: (name, render_mode, flatten, dkb)
VARIANTS = (
    ("Full", "ssp", True, True),
    ("No DKB", "ssp", True, False),
    ("UVP", "uvp", True, True),
    ("No-Flatten", "ssp", False, True),
    ("No DKB + UVP", "uvp", True, False),
    ("No DKB + No-Flatten", "ssp", False, False),
    ("UVP + No-Flatten", "uvp", False, True),
    ("No DKB + UVP + No-Flatten", "uvp", False, False),
)
SUMMARY_METRICS = ("AE", "RE", "Acc", "Over", "Under", "MacroF1", "SizeMacroF1", "StageAcc", "JsonValid",
                   "HallucRate")
ABLATION_COLUMNS = (("AE", "AE"), ("RE", "RE"), ("Acc", "Acc"), ("MacroF1", "MacroF1"),
                    ("StageAcc", "StageAcc"), ("JsonValid", "JsonValid"), ("Halluc", "HallucRate"))
AGGREGATION_NOTE = "one record per arch; group means are taken over arch records"


class ZeroGroundTruth(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NoValidReports(ValueError):
    pass


def abs_err(pred: float, gt: float) -> float:
    if gt < 0:
        raise ValueError("ground truth must be >= 0")
    return abs(pred - gt)


def rel_err_acc(pred: float, gt: float) -> tuple[float, float]:
    """(RE %, Acc %) with Acc = 100 max(0, 1 - |pred - gt| / gt)."""
    if gt <= 0:
        raise ZeroGroundTruth("relative error is undefined for gt = 0")
    ratio = abs(pred - gt) / gt
    return 100.0 * ratio, 100.0 * max(0.0, 1.0 - ratio)


def signed_dev(pred: float, gt: float) -> tuple[float, float]:
    """Per-case (over %, under %): the positive and negative parts of (pred - gt) / gt."""
    if gt <= 0:
        raise ZeroGroundTruth("signed deviation percentage is undefined for gt = 0")
    dev = 100.0 * (pred - gt) / gt
    return max(dev, 0.0), max(-dev, 0.0)


def over_under(preds: Sequence[float], gts: Sequence[float]) -> tuple[float, float]:
    """Mean Over over the over-counted cases and mean Under over the
    under-counted cases (% of gt); an empty subset gives 0."""
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    overs, unders = [], []
    for p, g in zip(preds, gts):
        o, u = signed_dev(p, g)
        if p > g:
            overs.append(o)
        elif p < g:
            unders.append(u)
    return (float(np.mean(overs)) if overs else 0.0, float(np.mean(unders)) if unders else 0.0)


@dataclass(frozen=True)
class ConfusionTable:
    classes: tuple[str, ...]
    tp: dict[str, int]
    fp: dict[str, int]
    fn: dict[str, int]

    def __post_init__(self):
        if not self.classes:
            raise ValueError("class set must be non-empty")
        for table in (self.tp, self.fp, self.fn):
            if any(table.get(c, 0) < 0 for c in self.classes):
                raise ValueError("confusion counts must be >= 0")

    @classmethod
    def from_rows(cls, rows: dict[str, tuple[int, int, int]]) -> "ConfusionTable":
        """``{class: (TP, FP, FN)}``."""
        return cls(tuple(rows), {c: r[0] for c, r in rows.items()}, {c: r[1] for c, r in rows.items()},
                   {c: r[2] for c, r in rows.items()})


def macro_f1(table: ConfusionTable) -> float:
    """Unweighted mean per-class F1 (%); undefined per-class terms count as 0."""
    total = 0.0
    for c in table.classes:
        tp, fp, fn = table.tp.get(c, 0), table.fp.get(c, 0), table.fn.get(c, 0)
        if tp + fp == 0 or tp + fn == 0:
            continue
        p, r = tp / (tp + fp), tp / (tp + fn)
        if p + r > 0:
            total += 2 * p * r / (p + r)
    return 100.0 * total / len(table.classes)


def confusion_from_codes(pred_codes: Iterable[int], gt_codes: Iterable[int], class_of,
                         classes: Sequence[str]) -> ConfusionTable:
    """Per-class TP/FP/FN from tooth-level FDI sets."""
    pred, gt = set(pred_codes), set(gt_codes)
    tp = {c: 0 for c in classes}
    fp = dict(tp)
    fn = dict(tp)
    for code in pred | gt:
        try:
            label = class_of(code)
        except dkb.UnknownCode:
            continue
        if label not in tp:
            continue
        if code in pred and code in gt:
            tp[label] += 1
        elif code in pred:
            fp[label] += 1
        else:
            fn[label] += 1
    return ConfusionTable(tuple(classes), tp, fp, fn)


def confusion_from_counts(pred_counts: dict[str, int], gt_counts: dict[str, int],
                          classes: Sequence[str]) -> ConfusionTable:
    """Per-class TP/FP/FN when only class counts are known: matched = min."""
    tp, fp, fn = {}, {}, {}
    for c in classes:
        p, g = int(pred_counts.get(c, 0)), int(gt_counts.get(c, 0))
        tp[c], fp[c], fn[c] = min(p, g), max(p - g, 0), max(g - p, 0)
    return ConfusionTable(tuple(classes), tp, fp, fn)


def stage_acc(preds: Sequence[str], gts: Sequence[str]) -> float:
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("no stages to compare")
    return 100.0 * sum(p == g for p, g in zip(preds, gts)) / len(preds)


def map_detection_counts(tp: int, fp: int, fn: int) -> tuple[int, int, int, float]:
    """(Pred, GT, AE, RE %) from per-tooth detection counts."""
    gt = tp + fn
    if gt <= 0:
        raise ZeroGroundTruth("TP + FN = 0")
    err = abs(fp - fn)
    return tp + fp, gt, err, 100.0 * err / gt


def is_hallucinated(report: StructuredReport, ontology: DentalOntology | None = None) -> bool:
    return bool(dkb.vocabulary_problems(report, ontology or dkb.load_ontology()))


def hallucination_rate(outcomes, ontology: DentalOntology | None = None) -> float:
    """Percentage of json-valid reports carrying any out-of-ontology label."""
    ontology = ontology or dkb.load_ontology()
    valid = [o.report for o in outcomes if o.json_valid and o.report is not None]
    if not valid:
        raise NoValidReports("no json-valid reports")
    return 100.0 * sum(is_hallucinated(r, ontology) for r in valid) / len(valid)


# ---------------------------------------------------------------- per-case records


@dataclass
class CaseRecord:
    case: str
    arch: str
    variant: str = ""
    task: str = "count"
    metrics: dict[str, float | None] = field(default_factory=dict)
    pred: int | None = None
    gt: int | None = None
    gt_zero: bool = False


def _partition_f1(report: StructuredReport, gt: StructuredReport, ontology: DentalOntology,
                  kind: str) -> float:
    if kind == "region":
        classes, of, pc, gc = dkb.REGIONS, dkb.region_of, report.anatomical_counts, gt.anatomical_counts
    else:
        classes, of, pc, gc = dkb.SIZES, dkb.size_of, report.size_counts, gt.size_counts
    if report.fdi_present and gt.fdi_present:
        table = confusion_from_codes(report.fdi_present, gt.fdi_present, lambda c: of(c, ontology), classes)
    else:
        table = confusion_from_counts(pc, gc, classes)
    return macro_f1(table)


def evaluate_case(case: str, arch: str, report: StructuredReport | None, json_valid: bool,
                  gt: StructuredReport, ontology: DentalOntology | None = None, *, variant: str = "",
                  task: str = "count") -> CaseRecord:
    """Metrics for one arch. Counting metrics only use json-valid reports."""
    ontology = ontology or dkb.load_ontology()
    m: dict[str, float | None] = {k: None for k in SUMMARY_METRICS}
    m["JsonValid"] = 100.0 if json_valid else 0.0
    rec = CaseRecord(case, arch, variant, task, m, gt=gt.teeth_number)
    if not json_valid or report is None:
        return rec
    rec.pred = report.teeth_number
    m["HallucRate"] = 100.0 if is_hallucinated(report, ontology) else 0.0
    m["AE"] = abs_err(report.teeth_number, gt.teeth_number)
    if gt.teeth_number > 0:
        m["RE"], m["Acc"] = rel_err_acc(report.teeth_number, gt.teeth_number)
        over, under = signed_dev(report.teeth_number, gt.teeth_number)
        # each side is averaged over its own subset of cases
        m["Over"] = over if report.teeth_number > gt.teeth_number else None
        m["Under"] = under if report.teeth_number < gt.teeth_number else None
    else:
        rec.gt_zero = True
    m["MacroF1"] = _partition_f1(report, gt, ontology, "region")
    m["SizeMacroF1"] = _partition_f1(report, gt, ontology, "size")
    m["StageAcc"] = 100.0 if report.dentition_stage == gt.dentition_stage else 0.0
    return rec


# ---------------------------------------------------------------- aggregation


@dataclass
class MetricSummary:
    group: dict[str, str]
    n: int
    means: dict[str, float]
    stds: dict[str, float]
    counts: dict[str, int]
    excluded_gt_zero: int = 0

    def row(self, metrics: Sequence[str] = SUMMARY_METRICS) -> dict:
        out: dict = dict(self.group)
        out["n"] = self.n
        for k in metrics:
            out[f"{k}_mean"] = self.means[k]
            out[f"{k}_std"] = self.stds[k]
        out["excluded_gt_zero"] = self.excluded_gt_zero
        return out


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std 0 for one value, NaN mean for none."""
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def aggregate(records: Sequence[CaseRecord], grouping: Sequence[str] = ("variant",),
              metrics: Sequence[str] = SUMMARY_METRICS) -> list[MetricSummary]:
    """Mean and sample std per metric per group, groups in sorted key order.

    Records are sorted by (case, arch) inside each group before folding, so the
    result does not depend on input order.
    """
    for g in grouping:
        if g not in ("variant", "arch", "task"):
            raise ValueError(f"cannot group by {g!r}")
    groups: dict[tuple, list[CaseRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, g) for g in grouping), []).append(r)
    out = []
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: (r.case, r.arch, r.variant, r.task))
        means, stds, counts = {}, {}, {}
        for k in metrics:
            vals = [r.metrics[k] for r in recs if r.metrics.get(k) is not None]
            means[k], stds[k] = mean_std(vals)
            counts[k] = len(vals)
        out.append(MetricSummary(dict(zip(grouping, key)), len(recs), means, stds, counts,
                                 sum(r.gt_zero for r in recs)))
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def summaries_to_csv(summaries: Sequence[MetricSummary], metrics: Sequence[str] = SUMMARY_METRICS) -> str:
    rows = [s.row(metrics) for s in summaries]
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def records_to_csv(records: Sequence[CaseRecord]) -> str:
    buf = io.StringIO()
    fields = ["case", "arch", "variant", "task", "pred", "gt", *SUMMARY_METRICS]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in sorted(records, key=lambda r: (r.variant, r.case, r.arch, r.task)):
        row = {"case": r.case, "arch": r.arch, "variant": r.variant, "task": r.task,
               "pred": "" if r.pred is None else r.pred, "gt": "" if r.gt is None else r.gt}
        row.update({k: "" if r.metrics.get(k) is None else _fmt(float(r.metrics[k])) for k in SUMMARY_METRICS})
        writer.writerow(row)
    return buf.getvalue()


def _clean(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def summaries_to_json(summaries: Sequence[MetricSummary]) -> str:
    doc = {
        "aggregation": AGGREGATION_NOTE,
        "std": "sample (n - 1)",
        "groups": [
            {
                "group": s.group,
                "n": s.n,
                "excluded_gt_zero": s.excluded_gt_zero,
                "metrics": {k: {"mean": _clean(s.means[k]), "std": _clean(s.stds[k]), "n": s.counts[k]}
                            for k in s.means},
            }
            for s in summaries
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def ablation_csv(summaries: Sequence[MetricSummary]) -> str:
    """One row per variant, in reporting order, mean and std per column."""
    by_name = {s.group.get("variant"): s for s in summaries}
    buf = io.StringIO()
    header = ["variant", "n"] + [f"{col}_{stat}" for col, _ in ABLATION_COLUMNS for stat in ("mean", "std")]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for name, *_ in VARIANTS:
        s = by_name.get(name)
        if s is None:
            writer.writerow([name, 0] + [""] * (len(header) - 2))
            continue
        row = [name, s.n]
        for _, key in ABLATION_COLUMNS:
            row += [_fmt(s.means[key]), _fmt(s.stds[key])]
        writer.writerow(row)
    return buf.getvalue()


def load_ground_truth(path: str | Path) -> StructuredReport:
    return StructuredReport.from_dict(json.loads(Path(path).read_text()))
