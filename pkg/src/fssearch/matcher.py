"""Proposal filtering, segment/text encoders and the semi-hard triplet objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import ALPHABET, LabeledSegment, Segment, iou, is_ratio
from .nnkit import DTYPE, BiRecurrentEncoder, check_finite, l2_normalize


@dataclass(frozen=True)
class FilterConfig:
    delta_iou: float = 0.8
    delta_is: float = 0.8
    k: int = 4

    def __post_init__(self):
        if not (0.0 <= self.delta_iou <= 1.0 and 0.0 <= self.delta_is <= 1.0):
            raise ValueError("filter thresholds must lie in [0, 1]")
        if self.k < 0:
            raise ValueError("k must be >= 0")


@dataclass(frozen=True)
class MatchConfig:
    margin: float = 0.45
    n_neg_v: int = 5
    n_neg_w: int = 5
    embed_dim: int = 64
    lambda_det: float = 0.1

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.n_neg_v < 1 or self.n_neg_w < 1:
            raise ValueError("negative caps must be >= 1")


def filter_proposals(proposals: Sequence[Segment], ground_truth: Sequence[LabeledSegment],
                     config: FilterConfig = FilterConfig(),
                     rng: np.random.Generator | None = None) -> list[LabeledSegment]:
    """Sample up to ``k`` near-ground-truth proposals per ground-truth segment.

    A proposal survives for ground truth ``g`` when ``iou >= delta_iou`` and
    the fraction of ``g`` it covers is ``>= delta_is``; it inherits ``g``'s text.
    Survivors are canonically sorted before sampling so the result does not
    depend on the input order.
    """
    out: list[LabeledSegment] = []
    distinct = sorted(set(proposals))
    for g in ground_truth:
        survivors = [p for p in distinct
                     if iou(p, g.segment) >= config.delta_iou and is_ratio(p, g.segment) >= config.delta_is]
        if len(survivors) > config.k:
            if rng is None:
                survivors = survivors[:config.k]
            else:
                pick = np.sort(rng.choice(len(survivors), size=config.k, replace=False))
                survivors = [survivors[i] for i in pick]
        out.extend(LabeledSegment(p, g.text) for p in survivors)
    return out


class SegmentEncoder(nn.Module):
    """Bidirectional recurrent encoder of a feature window, projected and unit-normalised."""

    def __init__(self, in_dim: int, hidden_dim: int = 32, n_layers: int = 1, embed_dim: int = 64):
        super().__init__()
        self.rnn = BiRecurrentEncoder(in_dim, hidden_dim, n_layers)
        self.proj = nn.Linear(self.rnn.out_dim, embed_dim, dtype=DTYPE)

    def forward(self, features: torch.Tensor, segments: Sequence[tuple[int, int, int]]) -> torch.Tensor:
        """Embed windows ``(batch_index, s, t)`` of ``features`` ``(B, T, F)``."""
        if not segments:
            return features.new_zeros((0, self.proj.out_features))
        T = features.shape[1]
        lengths = []
        for b, s, t in segments:
            if not (0 <= s < t <= T):
                raise ValueError(f"segment [{s}, {t}) is degenerate or outside a clip of {T} frames")
            lengths.append(t - s)
        rows = [features[b, s:t] for b, s, t in segments]
        windows = nn.utils.rnn.pad_sequence(rows, batch_first=True)
        return l2_normalize(self.proj(self.rnn.final(windows, lengths)))


class TextEncoder(nn.Module):
    """Character embedding followed by a bidirectional recurrent encoder."""

    def __init__(self, hidden_dim: int = 32, n_layers: int = 1, embed_dim: int = 64, char_dim: int = 32):
        super().__init__()
        self.chars = nn.Embedding(ALPHABET.n_chars, char_dim, dtype=DTYPE)
        self.rnn = BiRecurrentEncoder(char_dim, hidden_dim, n_layers)
        self.proj = nn.Linear(self.rnn.out_dim, embed_dim, dtype=DTYPE)

    def forward(self, words: Sequence[str]) -> torch.Tensor:
        if not words:
            return self.proj.weight.new_zeros((0, self.proj.out_features))
        codes = [torch.as_tensor(ALPHABET.encode(w), dtype=torch.int64) for w in words]
        if any(len(c) == 0 for c in codes):
            raise ValueError("cannot encode an empty word")
        padded = nn.utils.rnn.pad_sequence(codes, batch_first=True)
        x = self.chars(padded)
        return l2_normalize(self.proj(self.rnn.final(x, [len(c) for c in codes])))


def mine_negatives(pos_dist: float, cand_dists: Sequence[float], eligible: Sequence[bool] | None = None,
                   cap: int = 5) -> np.ndarray:
    """Semi-hard negatives: eligible candidates strictly farther than the positive.

    Returns candidate indices, nearest first, at most ``cap`` of them.
    """
    d = np.asarray(cand_dists, dtype=np.float64)
    ok = d > pos_dist
    if eligible is not None:
        ok &= np.asarray(eligible, dtype=bool)
    idx = np.flatnonzero(ok)
    idx = idx[np.argsort(d[idx], kind="stable")]
    return idx[:cap]


def _semi_hard_mean(dist: torch.Tensor, pos: torch.Tensor, eligible: torch.Tensor, cap: int):
    """Row-wise mean of the ``cap`` nearest eligible distances above ``pos``.

    Returns the means and a mask of rows whose negative set is non-empty.
    """
    with torch.no_grad():
        ok = eligible & (dist > pos[:, None])
        key = torch.where(ok, dist, torch.full_like(dist, float("inf")))
        k = min(cap, dist.shape[1])
        order = torch.sort(key, dim=1, stable=True).indices[:, :k]
        chosen = torch.gather(ok, 1, order)
        count = chosen.sum(1)
    vals = torch.gather(dist, 1, order) * chosen
    mean = vals.sum(1) / count.clamp(min=1)
    return mean, count > 0


def triplet_loss(visual: torch.Tensor, text: torch.Tensor, word_index: Sequence[int],
                 relevant: torch.Tensor | np.ndarray | None = None,
                 config: MatchConfig = MatchConfig()) -> torch.Tensor:
    """Two-sided hinge triplet loss with semi-hard negatives, summed over positives.

    ``visual`` is ``(P, E)`` unit vectors for the positive pairs, ``text`` is
    ``(W, E)`` unit vectors for the distinct batch words and ``word_index[i]``
    names pair ``i``'s word.  ``relevant[i, j]`` marks words that must never
    serve as negatives for visual item ``i`` (defaults to its own word).
    A side whose semi-hard set is empty contributes nothing.
    """
    P = visual.shape[0]
    if P == 0:
        return visual.sum() * 0.0
    w = torch.as_tensor(list(word_index), dtype=torch.int64)
    if relevant is None:
        rel = torch.zeros((P, text.shape[0]), dtype=torch.bool)
        rel[torch.arange(P), w] = True
    else:
        rel = torch.as_tensor(np.asarray(relevant), dtype=torch.bool)
    d_vw = 1.0 - visual @ text.T                     # (P, W)
    pos = d_vw[torch.arange(P), w]
    m = config.margin

    neg_w, has_w = _semi_hard_mean(d_vw, pos.detach(), ~rel, config.n_neg_w)
    # d(e_v', e_x^w) for every other visual item v' against this pair's word
    d_other = d_vw[:, w].T                           # (P, P): row i = word of i, column = v'
    eligible_v = ~rel[:, w].T                        # v' must not contain word w_i
    neg_v, has_v = _semi_hard_mean(d_other, pos.detach(), eligible_v, config.n_neg_v)

    zero = torch.zeros_like(pos)
    term_w = torch.where(has_w, torch.clamp(m + pos - neg_w, min=0.0), zero)
    term_v = torch.where(has_v, torch.clamp(m + pos - neg_v, min=0.0), zero)
    return check_finite((term_w + term_v).sum(), "triplet_loss")


def total_loss(l_det: torch.Tensor, l_tri: torch.Tensor, lambda_det: float) -> torch.Tensor:
    return lambda_det * l_det + l_tri
