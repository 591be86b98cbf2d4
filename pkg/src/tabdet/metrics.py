"""Detection metrics: greedy IoU matching pooled over pages, P/R/F1 at the
ten thresholds 0.50:0.05:0.95, and their mean.

The matcher is COCO-style: detections sorted by confidence (ties broken
by input index) each claim the unmatched ground truth of highest IoU,
provided that IoU meets the threshold. The threshold test is inclusive
(IoU >= tau counts). Counts are pooled across pages per threshold
(micro-averaging), then turned into precision/recall/F1 once.

Empty-set conventions, which pooling makes observable: with no
detections and no ground truths, precision = recall = F1 = 1; with
detections but no ground truths, precision = 0; with ground truths but
no detections, recall = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .geometry import Box, iou, validate_box
from .postprocess import Detection

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def _normalize_detections(detections: Sequence) -> list[tuple[Box, float]]:
    """Accept Detection objects or (box, confidence) pairs."""
    out = []
    for d in detections:
        if isinstance(d, Detection):
            box, conf = d.box, d.confidence
        else:
            box, conf = d
        box = tuple(float(v) for v in box)
        validate_box(box)
        out.append((box, float(conf)))
    return out


def match_at_threshold(
    detections: Sequence, ground_truths: Sequence[Box], tau: float
) -> tuple[int, int, int]:
    """Greedy matching on one page; returns (TP, FP, FN).

    Detections are visited in confidence-descending order (ties by input
    index); each claims the still-unmatched ground truth with the highest
    IoU when that IoU >= tau (equal-IoU ties go to the lowest gt index).
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {tau}")
    dets = _normalize_detections(detections)
    gts = [tuple(float(v) for v in g) for g in ground_truths]
    for g in gts:
        validate_box(g)

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    taken = [False] * len(gts)
    tp = 0
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i][0], g)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= tau:
            taken[best_j] = True
            tp += 1
    return tp, len(dets) - tp, len(gts) - tp


def compute_prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 from counts, with explicit empty conventions."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class ThresholdMetrics:
    tau: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-threshold counts and P/R/F1, plus their mean over thresholds."""

    per_threshold: tuple[ThresholdMetrics, ...]
    mean_precision: float
    mean_recall: float
    mean_f1: float

    def at(self, tau: float) -> ThresholdMetrics:
        for row in self.per_threshold:
            if abs(row.tau - tau) < 1e-9:
                return row
        raise KeyError(f"no metrics at threshold {tau}")

    def to_json_dict(self) -> dict:
        return {
            "thresholds": [
                {
                    "tau": row.tau,
                    "tp": row.tp,
                    "fp": row.fp,
                    "fn": row.fn,
                    "precision": row.precision,
                    "recall": row.recall,
                    "f1": row.f1,
                }
                for row in self.per_threshold
            ],
            "mean": {
                "precision": self.mean_precision,
                "recall": self.mean_recall,
                "f1": self.mean_f1,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    def to_text_table(self) -> str:
        """Aligned P/R/F1 columns per threshold plus the averaged row."""
        lines = [f"{'IoU':>8} {'P':>8} {'R':>8} {'F1':>8} {'TP':>6} {'FP':>6} {'FN':>6}"]
        for row in self.per_threshold:
            lines.append(
                f"{row.tau:>8.2f} {row.precision:>8.4f} {row.recall:>8.4f} "
                f"{row.f1:>8.4f} {row.tp:>6d} {row.fp:>6d} {row.fn:>6d}"
            )
        lines.append(
            f"{'Avg':>8} {self.mean_precision:>8.4f} {self.mean_recall:>8.4f} "
            f"{self.mean_f1:>8.4f}"
        )
        return "\n".join(lines)


@dataclass(frozen=True)
class PageEval:
    """One page's detections joined with its ground-truth boxes."""

    page_id: str
    detections: tuple
    ground_truths: tuple


def evaluate_dataset(
    pages: Sequence[PageEval],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    """Micro-averaged metrics: counts pooled over pages per threshold.

    Duplicate page ids are rejected; a dataset is whatever join the
    caller produced, with empty detection or ground-truth lists allowed.
    The averaged row is the plain mean of the per-threshold P, R, F1.
    """
    seen: set[str] = set()
    for page in pages:
        if page.page_id in seen:
            raise ValueError(f"duplicate page_id {page.page_id!r}")
        seen.add(page.page_id)

    rows = []
    for tau in thresholds:
        tp = fp = fn = 0
        for page in pages:
            dtp, dfp, dfn = match_at_threshold(page.detections, page.ground_truths, tau)
            tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
        p, r, f1 = compute_prf(tp, fp, fn)
        rows.append(ThresholdMetrics(tau, tp, fp, fn, p, r, f1))

    n = len(rows)
    return MetricsReport(
        per_threshold=tuple(rows),
        mean_precision=sum(r.precision for r in rows) / n,
        mean_recall=sum(r.recall for r in rows) / n,
        mean_f1=sum(r.f1 for r in rows) / n,
    )
