"""CTC negative log-likelihood (log-space forward algorithm) and prefix beam search."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

NEG_INF = float("-inf")
# finite stand-in for log(0) inside autograd: logsumexp over all -inf has a NaN gradient
LOG_ZERO = -1e30


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(log_probs: torch.Tensor, targets: Sequence[Sequence[int]], blank: int,
             input_lengths: Sequence[int] | None = None) -> torch.Tensor:
    """Per-sequence ``-log p(target | input)``.

    ``log_probs`` is ``(B, T, C)`` log-softmax output; ``targets`` are label
    lists without blanks.  Returns a ``(B,)`` tensor.
    """
    if log_probs.ndim != 3:
        raise ValueError(f"ctc_loss: expected (B, T, C) log-probabilities, got {tuple(log_probs.shape)}")
    B, T, C = log_probs.shape
    if len(targets) != B:
        raise ValueError(f"ctc_loss: {len(targets)} targets for a batch of {B}")
    lengths = [T] * B if input_lengths is None else list(input_lengths)
    for b, tgt in enumerate(targets):
        if any(not 0 <= c < C or c == blank for c in tgt):
            raise ValueError(f"ctc_loss: target {b} has labels outside [0, {C}) or the blank")
        if min_frames(tgt) > lengths[b]:
            raise ValueError(f"ctc_loss: target {b} needs {min_frames(tgt)} frames, input has {lengths[b]}")

    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = torch.full((B, S), blank, dtype=torch.int64)
    # skip[b, s]: transition s-2 -> s allowed (non-blank, differs from label two back)
    skip = torch.zeros((B, S), dtype=torch.bool)
    valid = torch.zeros((B, S), dtype=torch.bool)
    for b, tgt in enumerate(targets):
        n = 2 * len(tgt) + 1
        valid[b, :n] = True
        for i, c in enumerate(tgt):
            ext[b, 2 * i + 1] = c
            if i > 0 and tgt[i - 1] != c:
                skip[b, 2 * i + 1] = True

    emit = torch.gather(log_probs, 2, ext[:, None, :].expand(B, T, S))   # (B, T, S)
    neg = torch.full((B, S), LOG_ZERO, dtype=log_probs.dtype)
    alpha = neg.clone()
    alpha[:, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 1] = torch.where(valid[:, 1], emit[:, 0, 1], neg[:, 1])
    alpha = torch.where(valid, alpha, neg)
    final = [None] * B
    pad1 = torch.full((B, 1), LOG_ZERO, dtype=log_probs.dtype)
    pad2 = torch.full((B, 2), LOG_ZERO, dtype=log_probs.dtype)
    for b in range(B):
        if lengths[b] == 1:
            final[b] = alpha[b]
    for t in range(1, T):
        stay = alpha
        step = torch.cat([pad1, alpha], dim=1)[:, :S]
        jump = torch.where(skip, torch.cat([pad2, alpha], dim=1)[:, :S], neg)
        alpha = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        alpha = torch.where(valid, alpha, neg)
        for b in range(B):
            if lengths[b] == t + 1:
                final[b] = alpha[b]
    out = []
    for b, tgt in enumerate(targets):
        n = 2 * len(tgt) + 1
        tail = final[b][n - 1:n] if n == 1 else final[b][n - 2:n]
        out.append(-torch.logsumexp(tail, dim=0))
    return torch.stack(out)


@dataclass(frozen=True)
class Hypothesis:
    labels: tuple[int, ...]
    log_prob: float


def beam_search(log_probs: np.ndarray, beam_width: int, blank: int, prune: float = 0.0) -> list[Hypothesis]:
    """CTC prefix beam search over a ``(T, C)`` log-probability matrix.

    Keeps ``beam_width`` prefixes, merging paths that collapse to the same
    label sequence.  Symbols with probability below ``prune`` at a frame are
    skipped (0 disables pruning).  Returns hypotheses best first.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    # prefix -> (log p ending in blank, log p ending in non-blank)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    log_prune = np.log(prune) if prune > 0 else NEG_INF
    for t in range(T):
        row = lp[t]
        symbols = [c for c in range(C) if row[c] >= log_prune]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            for c in symbols:
                p = row[c]
                if c == blank:
                    e = nxt[prefix]
                    e[0] = np.logaddexp(e[0], total + p)
                    continue
                last = prefix[-1] if prefix else None
                ext = prefix + (c,)
                e = nxt[ext]
                if c == last:
                    # repeat needs an intervening blank to extend; otherwise it collapses
                    e[1] = np.logaddexp(e[1], pb + p)
                    same = nxt[prefix]
                    same[1] = np.logaddexp(same[1], pnb + p)
                else:
                    e[1] = np.logaddexp(e[1], total + p)
        scored = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in scored[:beam_width]}
    hyps = [Hypothesis(k, float(np.logaddexp(*v))) for k, v in beams.items()]
    return sorted(hyps, key=lambda h: (-h.log_prob, h.labels))


def greedy_decode(log_probs: np.ndarray, blank: int) -> tuple[int, ...]:
    best = np.asarray(log_probs).argmax(axis=1)
    out = []
    prev = None
    for c in best:
        if c != prev and c != blank:
            out.append(int(c))
        prev = c
    return tuple(out)
