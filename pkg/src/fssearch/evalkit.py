"""Retrieval and localisation metrics, relevance judgments and report rendering.

Conventions:

* mF1 is the best F1 over all prefixes of a ranking (oracle threshold).
* AP@IoU uses all-point interpolation of the precision envelope.
* Queries with an empty relevant set are left out of every mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Clip, iou

RANK_METRICS = ("mAP", "mF1", "P@1", "P@10", "R@1", "R@10")
IOU_THRESHOLDS = (0.1, 0.3, 0.5)


def _items(ranked) -> list:
    return [r[0] if isinstance(r, tuple) else r for r in ranked]


def average_precision(ranked, relevant) -> float:
    """Mean precision at the rank of each relevant item; unretrieved items add 0."""
    items = _items(ranked)
    if not items:
        raise ValueError("average_precision needs a non-empty ranked list")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("average_precision is undefined for an empty relevant set")
    hits, total = 0, 0.0
    for rank, item in enumerate(items, start=1):
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def random_ap(n_relevant: int, n_candidates: int) -> float:
    """Expected AP of a uniformly random ranking of all candidates."""
    R, N = n_relevant, n_candidates
    if not 0 < R <= N:
        raise ValueError(f"need 0 < n_relevant <= n_candidates, got {R}, {N}")
    h = sum(1.0 / k for k in range(1, N + 1))
    if N == 1:
        return 1.0
    return (h + (R - 1) / (N - 1) * (N - h)) / N


def mean_f1(ranked, relevant) -> float:
    """Best F1 over all prefixes of the ranking."""
    items = _items(ranked)
    if not items:
        raise ValueError("mean_f1 needs a non-empty ranked list")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("mean_f1 is undefined for an empty relevant set")
    best, hits = 0.0, 0
    for n, item in enumerate(items, start=1):
        if item in relevant:
            hits += 1
            best = max(best, 2 * hits / (n + len(relevant)))
    return best


def precision_recall_at_n(ranked, relevant, n: int) -> tuple[float, float, float, float]:
    """``(P@n, R@n, max P@n, max R@n)``; maxima follow from ``|relevant|``."""
    items = _items(ranked)
    if not items:
        raise ValueError("precision_recall_at_n needs a non-empty ranked list")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("precision_recall_at_n is undefined for an empty relevant set")
    hits = len(relevant.intersection(items[:n]))
    best = min(len(relevant), n)
    return hits / n, hits / len(relevant), best / n, best / len(relevant)


def ap_at_iou(predictions, ground_truth: Mapping[str, Sequence], threshold: float) -> float:
    """Localisation AP over predictions pooled across clips.

    ``predictions`` holds ``(clip_id, segment, score)``; ``ground_truth`` maps
    clip id to segments.  Each prediction, best score first, claims the
    unmatched ground truth in its clip with the highest IoU if that IoU
    reaches ``threshold``.
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        raise ValueError("ap_at_iou needs at least one ground-truth segment")
    preds = sorted(predictions, key=lambda p: (-p[2], p[0], p[1].s, p[1].t))
    used = {k: np.zeros(len(v), dtype=bool) for k, v in ground_truth.items()}
    tp = np.zeros(len(preds))
    for i, (clip_id, seg, _) in enumerate(preds):
        gts = ground_truth.get(clip_id, ())
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if used[clip_id][j]:
                continue
            v = iou(seg, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= threshold:
            used[clip_id][best_j] = True
            tp[i] = 1
    if not preds:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(preds) + 1)
    return _all_point_ap(recall, precision)


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.flatnonzero(r[1:] != r[:-1]) + 1
    return float(np.sum((r[steps] - r[steps - 1]) * p[steps]))


def build_judgments(clips: Sequence[Clip], direction: str) -> dict[str, set[str]]:
    """FWS: clip id -> its words.  FVS: word -> ids of clips containing it."""
    if direction == "fws":
        return {c.id: set(c.words) for c in clips}
    if direction == "fvs":
        out: dict[str, set[str]] = {}
        for c in clips:
            for w in c.words:
                out.setdefault(w, set()).add(c.id)
        return dict(sorted(out.items()))
    raise ValueError(f"direction must be 'fws' or 'fvs', got {direction!r}")


@dataclass
class QueryResult:
    query: str
    n_relevant: int
    values: dict[str, float]
    maxima: dict[str, float]


@dataclass
class MetricReport:
    """Rank metrics (with attainable maxima), per-query records and AP@IoU."""

    system: str
    direction: str
    metrics: dict[str, float] = field(default_factory=dict)
    maxima: dict[str, float] = field(default_factory=dict)
    per_query: list[QueryResult] = field(default_factory=list)
    ap_iou: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "direction": self.direction,
            "metrics": {k: round(v, 6) for k, v in self.metrics.items()},
            "maxima": {k: round(v, 6) for k, v in self.maxima.items()},
            "ap_iou": {f"{k:.1f}": round(v, 6) for k, v in self.ap_iou.items()},
            "per_query": [
                {"query": q.query, "n_relevant": q.n_relevant,
                 "values": {k: round(v, 6) for k, v in q.values.items()},
                 "maxima": {k: round(v, 6) for k, v in q.maxima.items()}}
                for q in self.per_query
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def evaluate_rankings(rankings: Mapping[str, Sequence], judgments: Mapping[str, set],
                      system: str = "", direction: str = "",
                      metrics: Iterable[str] = RANK_METRICS) -> MetricReport:
    """Average every selected metric over queries with at least one relevant item."""
    metrics = tuple(metrics)
    unknown = set(metrics) - set(RANK_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    report = MetricReport(system, direction)
    for q in sorted(judgments):
        rel = judgments[q]
        if not rel:
            continue
        ranked = rankings.get(q, [])
        if not ranked:
            raise ValueError(f"no ranking for query {q!r}")
        values, maxima = {}, {}
        if "mAP" in metrics:
            values["mAP"], maxima["mAP"] = average_precision(ranked, rel), 1.0
        if "mF1" in metrics:
            values["mF1"], maxima["mF1"] = mean_f1(ranked, rel), 1.0
        for n in (1, 10):
            p, r, mp, mr = precision_recall_at_n(ranked, rel, n)
            if f"P@{n}" in metrics:
                values[f"P@{n}"], maxima[f"P@{n}"] = p, mp
            if f"R@{n}" in metrics:
                values[f"R@{n}"], maxima[f"R@{n}"] = r, mr
        report.per_query.append(QueryResult(q, len(rel), values, maxima))
    for m in metrics:
        if report.per_query:
            report.metrics[m] = float(np.mean([r.values[m] for r in report.per_query]))
            report.maxima[m] = float(np.mean([r.maxima[m] for r in report.per_query]))
    return report


def localization_ap(predictions, clips: Sequence[Clip], thresholds=IOU_THRESHOLDS) -> dict[float, float]:
    gt = {c.id: [g.segment for g in c.ground_truth] for c in clips}
    return {t: ap_at_iou(predictions, gt, t) for t in thresholds}


def render_table(reports: Sequence[MetricReport], metrics: Sequence[str] = RANK_METRICS) -> str:
    """Method x metric grid per direction, with an attainable-maximum row."""
    lines = []
    for direction in ("fws", "fvs"):
        rows = [r for r in reports if r.direction == direction]
        if not rows:
            continue
        lines.append(f"## {direction.upper()}")
        lines.append("| system | " + " | ".join(metrics) + " |")
        lines.append("|---" * (len(metrics) + 1) + "|")
        for r in rows:
            cells = " | ".join(f"{r.metrics.get(m, float('nan')):.3f}" for m in metrics)
            lines.append(f"| {r.system} | {cells} |")
        lines.append("| max | " + " | ".join(f"{rows[0].maxima.get(m, float('nan')):.3f}" for m in metrics) + " |")
        lines.append("")
    loc = [r for r in reports if r.ap_iou and r.direction == "fvs"] or [r for r in reports if r.ap_iou]
    if loc:
        lines.append("## AP@IoU")
        lines.append("| system | " + " | ".join(f"{t:.1f}" for t in IOU_THRESHOLDS) + " |")
        lines.append("|---" * (len(IOU_THRESHOLDS) + 1) + "|")
        seen = set()
        for r in loc:
            if r.system in seen:
                continue
            seen.add(r.system)
            lines.append(f"| {r.system} | " + " | ".join(f"{r.ap_iou[t]:.3f}" for t in IOU_THRESHOLDS) + " |")
        lines.append("")
    return "\n".join(lines)
