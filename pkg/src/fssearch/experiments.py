"""Train-and-evaluate helpers shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import evalkit
from .config import RunConfig, make_estimator
from .core import Clip
from .search import ScoreMatrix
from .synthcorpus import Corpus

log = logging.getLogger(__name__)


@dataclass
class Evaluation:
    system: str
    scores: ScoreMatrix
    reports: dict[str, evalkit.MetricReport] = field(default_factory=dict)

    def per_query_ap(self, direction: str = "fvs") -> dict[str, float]:
        return {q.query: q.values["mAP"] for q in self.reports[direction].per_query}


def search_vocabulary(clips: list[Clip]) -> list[str]:
    """Every word occurring in ``clips``, sorted."""
    return sorted({w for c in clips for w in c.words})


def evaluate(estimator, clips: list[Clip], system: str, words: list[str] | None = None,
             metrics=evalkit.RANK_METRICS, localization: bool = True) -> Evaluation:
    """Score ``clips`` against ``words`` and compute both retrieval directions."""
    words = search_vocabulary(clips) if words is None else words
    scores = estimator.score_matrix(clips, words)
    out = Evaluation(system, scores)
    ap_iou = {}
    if localization:
        preds = estimator.localize(clips)
        if preds:
            ap_iou = evalkit.localization_ap(preds, clips)
    for direction in ("fws", "fvs"):
        judgments = evalkit.build_judgments(clips, direction)
        if direction == "fws":
            vocab = set(words)
            judgments = {k: v & vocab for k, v in judgments.items()}
        report = evalkit.evaluate_rankings(scores.rankings(direction), judgments, system, direction, metrics)
        report.ap_iou = dict(ap_iou)
        out.reports[direction] = report
    return out


def train(system: str, cfg: RunConfig, corpus: Corpus, use_dev: bool = False, **overrides):
    est = make_estimator(system, cfg, **overrides)
    log.info("training %s seed=%d", system, cfg.seed)
    return est.fit(corpus.train, corpus.dev if use_dev else None)


def run(system: str, cfg: RunConfig, corpus: Corpus, split: str = "test", **overrides) -> Evaluation:
    est = train(system, cfg, corpus, **overrides)
    return evaluate(est, corpus.split(split), system)


def length_trend(per_query_ap: dict[str, float], short_max: int = 3, long_min: int = 6) -> tuple[float, float]:
    """Mean AP over short queries and over long queries."""
    short = [v for q, v in per_query_ap.items() if len(q) <= short_max]
    long = [v for q, v in per_query_ap.items() if len(q) >= long_min]
    return (float(np.mean(short)) if short else float("nan"), float(np.mean(long)) if long else float("nan"))
