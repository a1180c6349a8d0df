"""Comparison systems: CTC recognizer, whole-clip embedding and attention keyword spotting.

The external-detector pipeline lives with FSS-Net (``fssnet.ExtDet``) since it
reuses that model's matcher unchanged; it is re-exported here.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import ALPHABET, Clip, Segment, levenshtein
from .ctc import Hypothesis, beam_search, ctc_loss
from .estimator import ClipEstimator, frames_tensor, length_groups
from .fssnet import ExtDet
from .matcher import MatchConfig, TextEncoder, triplet_loss
from .nnkit import DTYPE, BiRecurrentEncoder, l2_normalize
from .validation import check_clips, check_is_fitted, check_vocabulary

__all__ = ["Recognizer", "WholeClip", "AttnKWS", "ExtDet", "transcript", "hypothesis_words",
           "recognizer_score", "attention_to_segments"]


# CTC recognizer --------------------------------------------------------------

def transcript(clip: Clip) -> list[int]:
    """Label sequence for CTC training: words in order, ``<x>`` for every gap.

    Boundaries are not used, only the symbol order.  A clip without
    fingerspelling is the single label ``<x>``.
    """
    x = ALPHABET.x_index
    gt = clip.ground_truth
    if not gt:
        return [x]
    out = [x] if gt[0].s > 0 else []
    for i, g in enumerate(gt):
        if i:
            out.append(x)
        out.extend(ALPHABET.encode(g.text))
    if gt[-1].t < clip.n_frames:
        out.append(x)
    return out


def hypothesis_words(labels: Sequence[int]) -> list[str]:
    """Split a decoded label sequence on ``<x>`` into non-empty words."""
    words, cur = [], []
    for c in labels:
        if c == ALPHABET.x_index:
            if cur:
                words.append(ALPHABET.decode(cur))
            cur = []
        else:
            cur.append(c)
    if cur:
        words.append(ALPHABET.decode(cur))
    return words


def recognizer_score(hypotheses: Sequence[Sequence[str]], word: str) -> float:
    """``1 - min`` clamped letter error rate of ``word`` against any decoded word.

    A hypothesis without words counts as error 1.
    """
    word = ALPHABET.normalize(word)
    if not word:
        raise ValueError("query word must be non-empty")
    best = 1.0
    for words in hypotheses:
        for w in words:
            best = min(best, levenshtein(w, word) / len(word))
    return 1.0 - min(best, 1.0)


class _CtcModule(nn.Module):
    def __init__(self, n_features, hidden_dim):
        super().__init__()
        self.trunk = BiRecurrentEncoder(n_features, hidden_dim, 1)
        self.out = nn.Linear(self.trunk.out_dim, ALPHABET.size, dtype=DTYPE)

    def forward(self, X):
        return F.log_softmax(self.out(self.trunk.sequence(X)), dim=-1)


class Recognizer(ClipEstimator):
    """Frame-level letter recognizer trained with CTC, searched by decoded-word edit distance."""

    system = "recognizer"

    def __init__(self, hidden_dim=32, beam_width=10, prune=1e-3, epochs=10, batch_size=8, lr=5e-3,
                 optimizer="adam", patience=3, random_state=0):
        self.hidden_dim = hidden_dim
        self.beam_width = beam_width
        self.prune = prune
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.patience = patience
        self.random_state = random_state

    def _build(self, n_features):
        return _CtcModule(n_features, self.hidden_dim)

    def _train_step(self, batch, rng):
        log_probs = self.module_(frames_tensor(batch))
        return ctc_loss(log_probs, [transcript(c) for c in batch], ALPHABET.blank_index).sum() / len(batch)

    def frame_posteriors(self, clips) -> list[np.ndarray]:
        """Per-frame probabilities ``(T, |alphabet| + 2)`` for each clip."""
        check_is_fitted(self, "module_")
        clips = check_clips(clips, n_features=self.n_features_in_)
        out: list = [None] * len(clips)
        with torch.no_grad():
            for group in length_groups(clips, 32):
                lp = self.module_(frames_tensor([clips[i] for i in group])).exp().numpy()
                for b, i in enumerate(group):
                    out[i] = lp[b]
        return out

    def decode(self, clips) -> list[list[Hypothesis]]:
        return [beam_search(np.log(np.maximum(p, 1e-300)), self.beam_width, ALPHABET.blank_index, self.prune)
                for p in self.frame_posteriors(clips)]

    def _scores(self, clips, words):
        out = np.zeros((len(clips), len(words)))
        for i, hyps in enumerate(self.decode(clips)):
            split = [hypothesis_words(h.labels) for h in hyps]
            out[i] = [recognizer_score(split, w) for w in words]
        return out


# whole-clip embedding ------------------------------------------------------------

class _WholeClipModule(nn.Module):
    def __init__(self, n_features, hidden_dim, embed_dim, text_layers):
        super().__init__()
        self.trunk = BiRecurrentEncoder(n_features, hidden_dim, 1)
        self.proj = nn.Linear(self.trunk.out_dim, embed_dim, dtype=DTYPE)
        self.text_encoder = TextEncoder(hidden_dim, text_layers, embed_dim)

    def clips(self, X):
        return l2_normalize(self.proj(self.trunk.final(X)))


class WholeClip(ClipEstimator):
    """One embedding per clip matched against word embeddings with the triplet objective."""

    system = "wholeclip"

    def __init__(self, hidden_dim=32, embed_dim=64, text_layers=1, margin=0.45, n_neg_v=5, n_neg_w=5,
                 epochs=10, batch_size=8, lr=5e-3, optimizer="adam", patience=3, random_state=0):
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.text_layers = text_layers
        self.margin = margin
        self.n_neg_v = n_neg_v
        self.n_neg_w = n_neg_w
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.patience = patience
        self.random_state = random_state

    def _build(self, n_features):
        return _WholeClipModule(n_features, self.hidden_dim, self.embed_dim, self.text_layers)

    def _train_step(self, batch, rng):
        emb = self.module_.clips(frames_tensor(batch))
        rows, labels = [], []
        for b, c in enumerate(batch):
            for w in sorted(c.words):
                rows.append(b)
                labels.append(w)
        if not rows:
            return emb.sum() * 0.0
        vocab = sorted(set(labels))
        index = {w: i for i, w in enumerate(vocab)}
        # a clip holding several words must not use any of them as a negative
        relevant = np.array([[w in batch[b].words for w in vocab] for b in rows])
        text = self.module_.text_encoder(vocab)
        cfg = MatchConfig(self.margin, self.n_neg_v, self.n_neg_w, self.embed_dim)
        loss = triplet_loss(emb[rows], text, [index[w] for w in labels], relevant, cfg)
        return loss / len(batch)

    def _scores(self, clips, words):
        text = self.module_.text_encoder(words).numpy()
        out = np.zeros((len(clips), len(words)))
        for group in length_groups(clips, 32):
            V = self.module_.clips(frames_tensor([clips[i] for i in group])).numpy()
            out[group] = np.maximum(0.0, V @ text.T)
        return out


# attention keyword spotting ---------------------------------------------------------

def attention_to_segments(a, tau: float = 0.5) -> list[tuple[Segment, float]]:
    """Runs of frames with weight >= ``tau * max(a)``, each scored by its mean weight."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("attention must be a non-empty vector")
    on = a >= tau * a.max()
    out = []
    t = 0
    while t < len(a):
        if not on[t]:
            t += 1
            continue
        s = t
        while t < len(a) and on[t]:
            t += 1
        out.append((Segment(s, t), float(a[s:t].mean())))
    return out


class _AttnModule(nn.Module):
    def __init__(self, n_features, hidden_dim, embed_dim, text_layers):
        super().__init__()
        self.trunk = BiRecurrentEncoder(n_features, hidden_dim, 1)
        self.proj = nn.Linear(self.trunk.out_dim, embed_dim, dtype=DTYPE)
        self.text_encoder = TextEncoder(hidden_dim, text_layers, embed_dim)
        self.alpha = nn.Parameter(torch.ones((), dtype=DTYPE))
        self.theta = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.out = nn.Linear(embed_dim, 1, dtype=DTYPE)

    def frames(self, X):
        return l2_normalize(self.proj(self.trunk.sequence(X)))

    def attend(self, frames, text):
        """Attention ``(B, W, T)`` and presence logits ``(B, W)``.

        ``frames`` are unit vectors ``(B, T, E)``, ``text`` unit vectors ``(W, E)``.
        """
        cos = torch.einsum("bte,we->bwt", frames, text)
        a = torch.softmax(self.alpha * cos ** 2 + self.theta, dim=-1)
        pooled = torch.einsum("bwt,bte->bwe", a, frames)
        return a, self.out(pooled).squeeze(-1)


class AttnKWS(ClipEstimator):
    """Word-conditioned attention over frames followed by a presence classifier."""

    system = "attnkws"

    def __init__(self, hidden_dim=32, embed_dim=64, text_layers=1, n_neg=5, tau=0.5, epochs=10, batch_size=8,
                 lr=5e-3, optimizer="adam", patience=3, random_state=0):
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.text_layers = text_layers
        self.n_neg = n_neg
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.patience = patience
        self.random_state = random_state

    def _build(self, n_features):
        return _AttnModule(n_features, self.hidden_dim, self.embed_dim, self.text_layers)

    def _prepare(self, clips):
        self.vocabulary_ = sorted({w for c in clips for w in c.words})

    def _train_step(self, batch, rng):
        frames = self.module_.frames(frames_tensor(batch))
        rows, words, labels = [], [], []
        vocab = self.vocabulary_
        for b, c in enumerate(batch):
            pool = [w for w in vocab if w not in c.words]
            # clips without fingerspelling still get one draw of negatives
            for _ in range(max(len(c.words), 1)):
                k = min(self.n_neg, len(pool))
                negs = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)] if k else []
                words.extend(negs)
                rows.extend([b] * k)
                labels.extend([0.0] * k)
            for w in sorted(c.words):
                words.append(w)
                rows.append(b)
                labels.append(1.0)
        uniq = sorted(set(words))
        index = {w: i for i, w in enumerate(uniq)}
        text = self.module_.text_encoder(uniq)
        _, logits = self.module_.attend(frames, text)
        picked = logits[rows, [index[w] for w in words]]
        target = torch.as_tensor(labels, dtype=DTYPE)
        return F.binary_cross_entropy_with_logits(picked, target, reduction="sum") / len(batch)

    def attention(self, clips, words) -> np.ndarray:
        """Attention weights ``(n_clips, n_words, T)``; clips must share a length."""
        check_is_fitted(self, "module_")
        clips = check_clips(clips, n_features=self.n_features_in_)
        words = check_vocabulary(words)
        with torch.no_grad():
            text = self.module_.text_encoder(words)
            a, _ = self.module_.attend(self.module_.frames(frames_tensor(clips)), text)
        return a.numpy()

    def _scores(self, clips, words):
        text = self.module_.text_encoder(words)
        out = np.zeros((len(clips), len(words)))
        for group in length_groups(clips, 16):
            _, logits = self.module_.attend(self.module_.frames(frames_tensor([clips[i] for i in group])), text)
            out[group] = torch.sigmoid(logits).numpy()
        return out

    def localize(self, clips) -> list:
        """Attention-derived segments for each clip's own words."""
        clips = check_clips(clips, n_features=self.n_features_in_)
        out = []
        for c in clips:
            words = sorted(c.words)
            if not words:
                continue
            for a in self.attention([c], words)[0]:
                out.extend((c.id, seg, score) for seg, score in attention_to_segments(a, self.tau))
        return out
