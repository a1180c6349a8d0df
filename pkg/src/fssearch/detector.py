"""Temporal proposal generation: anchors, target assignment, loss, decoding and NMS."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import Segment, iou_matrix
from .nnkit import DTYPE, ConvPoolStack, ConvSpec, default_chain

DEFAULT_SCALES = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20, 24, 32, 40, 60, 75)
POS_IOU = 0.6
NEG_IOU = 0.3
NEG_PER_POS = 3
NMS_IOU = 0.7
# share of the negative quota reserved for negatives overlapping ground truth
HARD_NEG_SHARE = 0.5
MAX_PROPOSALS = 50
# quadratic zone of the regression loss, as in region proposal networks (sigma = 3)
SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass(frozen=True)
class Proposal:
    segment: Segment
    p_det: float

    def __post_init__(self):
        if not 0.0 <= self.p_det <= 1.0:
            raise ValueError(f"p_det must lie in [0, 1], got {self.p_det}")


class AnchorGrid:
    """Anchors of every scale centred at every feature-map position.

    Anchor ``i`` sits at position ``i // n_scales`` with scale
    ``scales[i % n_scales]``; bounds are clipped to ``[0, T)``.
    """

    def __init__(self, scales: Sequence[int] = DEFAULT_SCALES, centers: Sequence[float] = ()):
        self.scales = tuple(int(s) for s in scales)
        if not self.scales or min(self.scales) < 1:
            raise ValueError("anchor scales must be positive")
        self.centers = np.asarray(centers, dtype=np.float64)

    @classmethod
    def for_stack(cls, stack: ConvPoolStack, T: int, scales: Sequence[int] = DEFAULT_SCALES):
        return cls(scales, stack.frame_centers(T))

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    def __len__(self):
        return len(self.centers) * self.n_scales

    def bounds(self, T: int) -> np.ndarray:
        """``(N, 2)`` integer ``[s, t)`` bounds, clipped to the clip."""
        c = np.repeat(self.centers, self.n_scales)
        L = np.tile(np.asarray(self.scales, dtype=np.float64), len(self.centers))
        s = np.floor(c - L / 2.0)
        t = s + L
        s = np.clip(s, 0, T - 1)
        t = np.clip(t, s + 1, T)
        return np.stack([s, t], axis=1).astype(np.int64)


@dataclass
class DetectionTargets:
    labels: np.ndarray        # (N,) 1 positive, 0 negative, -1 ignore
    regression: np.ndarray    # (N, 2) (center offset / anchor length, log length ratio)
    matched: np.ndarray       # (N,) ground-truth index, -1 if none
    overlap: np.ndarray | None = None   # (N,) max IoU with any ground truth

    @property
    def n_positive(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_negative(self) -> int:
        return int((self.labels == 0).sum())


def encode_regression(anchor: np.ndarray, target: np.ndarray) -> np.ndarray:
    a_len = anchor[..., 1] - anchor[..., 0]
    g_len = target[..., 1] - target[..., 0]
    a_c = (anchor[..., 0] + anchor[..., 1]) / 2.0
    g_c = (target[..., 0] + target[..., 1]) / 2.0
    return np.stack([(g_c - a_c) / a_len, np.log(g_len / a_len)], axis=-1)


def decode_regression(anchor: np.ndarray, reg: np.ndarray, T: int) -> np.ndarray:
    """Apply regression outputs to anchors; returns clipped integer ``[s, t)``."""
    a_len = anchor[:, 1] - anchor[:, 0]
    a_c = (anchor[:, 0] + anchor[:, 1]) / 2.0
    c = a_c + reg[:, 0] * a_len
    length = a_len * np.exp(np.clip(reg[:, 1], -6.0, 6.0))
    s = np.round(c - length / 2.0)
    t = np.round(c + length / 2.0)
    s = np.clip(s, 0, T - 1)
    t = np.clip(np.maximum(t, s + 1), 1, T)
    return np.stack([s, t], axis=1).astype(np.int64)


def assign_anchors(anchors, ground_truth) -> DetectionTargets:
    """Label anchors by max IoU with ground truth (> 0.6 positive, < 0.3 negative).

    A ground truth segment with no anchor above the positive threshold is
    force-matched to its best anchor (lowest index on ties).
    """
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    if len(anchors) == 0:
        raise ValueError("assign_anchors: empty anchor grid")
    gt = np.asarray([[g.s, g.t] for g in ground_truth], dtype=np.int64).reshape(-1, 2)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    regression = np.zeros((n, 2))
    if len(gt) == 0:
        return DetectionTargets(labels, regression, matched, np.zeros(n))
    ious = iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    labels[best >= NEG_IOU] = -1
    pos = best > POS_IOU
    labels[pos] = 1
    matched[pos] = best_gt[pos]
    for g in range(len(gt)):
        if (pos & (best_gt == g)).any():
            continue
        a = int(ious[:, g].argmax())
        if ious[a, g] > 0:
            labels[a] = 1
            matched[a] = g
    sel = labels == 1
    regression[sel] = encode_regression(anchors[sel].astype(np.float64), gt[matched[sel]].astype(np.float64))
    return DetectionTargets(labels, regression, matched, best)


def sample_anchors(targets: DetectionTargets, rng: np.random.Generator | None) -> np.ndarray:
    """Indices used by the classification loss: all positives plus <= 3x negatives.

    Up to ``HARD_NEG_SHARE`` of the negative quota goes to negatives that
    overlap some ground truth; the rest is drawn from all remaining negatives.
    """
    pos = np.flatnonzero(targets.labels == 1)
    neg = np.flatnonzero(targets.labels == 0)
    cap = NEG_PER_POS * max(len(pos), 1)
    if len(neg) <= cap:
        return np.concatenate([pos, neg])
    if rng is None:
        return np.concatenate([pos, neg[:cap]])
    hard = neg[targets.overlap[neg] > 0] if targets.overlap is not None else neg[:0]
    take_hard = min(len(hard), int(cap * HARD_NEG_SHARE))
    picked = rng.choice(hard, size=take_hard, replace=False) if take_hard else hard[:0]
    rest = np.setdiff1d(neg, picked)
    picked = np.concatenate([picked, rng.choice(rest, size=cap - take_hard, replace=False)])
    return np.concatenate([pos, np.sort(picked)])


def detection_loss(cls_logits: torch.Tensor, reg_out: torch.Tensor, targets: DetectionTargets,
                   rng: np.random.Generator | None = None) -> torch.Tensor:
    """Mean BCE on sampled anchors plus mean smooth-L1 on positives, equally weighted."""
    idx = sample_anchors(targets, rng)
    if len(idx) == 0:
        return cls_logits.sum() * 0.0
    idx_t = torch.as_tensor(idx)
    y = torch.as_tensor(targets.labels[idx] == 1, dtype=cls_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(cls_logits[idx_t], y)
    pos = np.flatnonzero(targets.labels == 1)
    if len(pos) == 0:
        return bce
    pos_t = torch.as_tensor(pos)
    reg_t = torch.as_tensor(targets.regression[pos], dtype=reg_out.dtype)
    reg = F.smooth_l1_loss(reg_out[pos_t], reg_t, reduction="sum", beta=SMOOTH_L1_BETA) / len(pos)
    return bce + reg


def nms(bounds, scores, iou_threshold: float = NMS_IOU, max_out: int | None = MAX_PROPOSALS) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, best first.

    Order is by score descending, ties broken by earlier start then longer length.
    """
    bounds = np.asarray(bounds, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((-(bounds[:, 1] - bounds[:, 0]), bounds[:, 0], -scores))
    keep: list[int] = []
    suppressed = np.zeros(len(bounds), dtype=bool)
    b = bounds.astype(np.float64)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if max_out is not None and len(keep) >= max_out:
            break
        lo = np.maximum(b[i, 0], b[:, 0])
        hi = np.minimum(b[i, 1], b[:, 1])
        inter = np.clip(hi - lo, 0, None)
        ious = inter / ((b[i, 1] - b[i, 0]) + (b[:, 1] - b[:, 0]) - inter)
        suppressed |= ious >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


class DetectorHead(nn.Module):
    """Conv/pool stack with per-position classification and regression heads."""

    def __init__(self, in_dim: int, scales: Sequence[int] = DEFAULT_SCALES,
                 chain: Sequence[ConvSpec] | None = None):
        super().__init__()
        self.scales = tuple(scales)
        self.stack = ConvPoolStack(in_dim, chain if chain is not None else default_chain())
        n = len(self.scales)
        self.cls = nn.Linear(self.stack.out_dim, n, dtype=DTYPE)
        self.reg = nn.Linear(self.stack.out_dim, 2 * n, dtype=DTYPE)
        nn.init.zeros_(self.reg.weight)
        nn.init.zeros_(self.reg.bias)

    def anchors(self, T: int) -> AnchorGrid:
        return AnchorGrid.for_stack(self.stack, T, self.scales)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, T, F)`` -> logits ``(B, N)`` and regression ``(B, N, 2)``."""
        h = self.stack(features)
        B, P, _ = h.shape
        logits = self.cls(h).reshape(B, P * len(self.scales))
        reg = self.reg(h).reshape(B, P * len(self.scales), 2)
        return logits, reg


def proposals_from_outputs(logits: np.ndarray, reg: np.ndarray, anchor_bounds: np.ndarray, T: int,
                           max_out: int = MAX_PROPOSALS, iou_threshold: float = NMS_IOU) -> list[Proposal]:
    bounds = decode_regression(anchor_bounds.astype(np.float64), reg, T)
    p = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
    keep = nms(bounds, p, iou_threshold, max_out)
    return [Proposal(Segment(int(bounds[i, 0]), int(bounds[i, 1])), float(p[i])) for i in keep]


def dump_proposals(records: Iterable[tuple[str, Proposal]], path) -> None:
    """Write ``(clip_id, proposal)`` pairs as tab-separated ``clip_id s t p_det`` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#fssearch-proposals/1\tclip_id\ts\tt\tp_det\n")
        for clip_id, p in records:
            fh.write(f"{clip_id}\t{p.segment.s}\t{p.segment.t}\t{float(p.p_det)!r}\n")


def load_proposals(path) -> dict[str, list[Proposal]]:
    out: dict[str, list[Proposal]] = {}
    with open(path, encoding="utf-8") as fh:
        head = fh.readline()
        if not head.startswith("#fssearch-proposals/1"):
            raise ValueError(f"{path}: line 1: not a proposals file")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                p = Proposal(Segment(int(parts[1]), int(parts[2])), float(parts[3]))
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
            out.setdefault(parts[0], []).append(p)
    return out
