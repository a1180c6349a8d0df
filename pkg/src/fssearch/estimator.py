"""Shared fit loop, batching and checkpointing for the clip/word estimators."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import evalkit
from .core import Clip
from .nnkit import DTYPE, check_finite, load_checkpoint, make_optimizer, plateau_halver, save_checkpoint
from .search import ScoreMatrix
from .validation import check_clips, check_is_fitted, check_vocabulary

log = logging.getLogger(__name__)


def frames_tensor(clips: Sequence[Clip]) -> torch.Tensor:
    lengths = {c.n_frames for c in clips}
    if len(lengths) != 1:
        raise ValueError(f"clips in one batch must share a length, got {sorted(lengths)}")
    return torch.as_tensor(np.stack([c.frames for c in clips]), dtype=DTYPE)


def length_groups(clips: Sequence[Clip], size: int) -> list[list[int]]:
    """Indices of ``clips`` in batches of at most ``size`` equal-length clips, input order kept."""
    by_len: dict[int, list[int]] = {}
    for i, c in enumerate(clips):
        by_len.setdefault(c.n_frames, []).append(i)
    out = []
    for idx in by_len.values():
        out.extend(idx[j:j + size] for j in range(0, len(idx), size))
    return out


class ClipEstimator(BaseEstimator):
    """Base for systems that score (clip, word) pairs.

    Subclasses implement ``_build``, ``_train_step`` and ``_scores``; the
    fitted torch module lives in ``module_``.
    """

    system = ""
    min_frames = 1

    def _build(self, n_features: int) -> torch.nn.Module:
        raise NotImplementedError

    def _prepare(self, clips: list[Clip]) -> None:
        pass

    def _train_step(self, batch: list[Clip], rng: np.random.Generator) -> torch.Tensor:
        raise NotImplementedError

    def _scores(self, clips: list[Clip], words: list[str]) -> np.ndarray:
        raise NotImplementedError

    def _dev_score(self, dev: list[Clip]) -> float:
        words = sorted({w for c in dev for w in c.words})
        if not words:
            return 0.0
        m = self.score_matrix(dev, words)
        report = evalkit.evaluate_rankings(m.rankings("fvs"), evalkit.build_judgments(dev, "fvs"), metrics=("mAP",))
        return report.metrics.get("mAP", 0.0)

    def _params(self):
        return self.module_.parameters()

    def fit(self, clips, dev=None):
        clips = check_clips(clips, min_frames=self.min_frames)
        dev = check_clips(dev, allow_empty=True, min_frames=self.min_frames) if dev is not None else []
        self.n_features_in_ = clips[0].frames.shape[1]
        check_clips(clips, n_features=self.n_features_in_)
        rng = np.random.default_rng(self.random_state)
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.module_ = self._build(self.n_features_in_)
        self._prepare(clips)
        params = [p for p in self._params() if p.requires_grad]
        opt = make_optimizer(params, self.optimizer, self.lr)
        sched = plateau_halver(opt, self.patience) if dev else None
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(clips))
            total, n_steps = 0.0, 0
            for group in length_groups([clips[i] for i in order], self.batch_size):
                batch = [clips[order[i]] for i in group]
                opt.zero_grad()
                loss = check_finite(self._train_step(batch, rng), f"{type(self).__name__} loss")
                loss.backward()
                opt.step()
                total += loss.item()
                n_steps += 1
            rec = {"epoch": epoch + 1, "loss": total / max(n_steps, 1), "lr": opt.param_groups[0]["lr"]}
            if sched is not None:
                rec["dev"] = self._dev_score(dev)
                sched.step(rec["dev"])
            self.history_.append(rec)
            log.info("%s epoch %d: %s", type(self).__name__, epoch + 1, rec)
        return self

    def decision_function(self, clips, words) -> np.ndarray:
        """Score matrix ``(n_clips, n_words)``."""
        check_is_fitted(self, "module_")
        clips = check_clips(clips, n_features=self.n_features_in_, min_frames=self.min_frames)
        words = check_vocabulary(words)
        with torch.no_grad():
            return np.asarray(self._scores(clips, words), dtype=np.float64)

    def score_matrix(self, clips, words) -> ScoreMatrix:
        clips = list(clips)
        words = check_vocabulary(words)
        return ScoreMatrix([c.id for c in clips], words, self.decision_function(clips, words))

    def localize(self, clips) -> list:
        """``(clip_id, Segment, score)`` predictions for AP@IoU; empty if unsupported."""
        return []

    # checkpoints -------------------------------------------------------
    def _state(self) -> dict[str, torch.Tensor]:
        return dict(self.module_.state_dict())

    def _load_state(self, tensors: dict[str, torch.Tensor]) -> None:
        self.module_ = self._build(self.n_features_in_)
        self.module_.load_state_dict(tensors)

    def save(self, path, extra_meta: dict | None = None) -> None:
        check_is_fitted(self, "module_")
        meta = {"system": self.system, "params": _jsonable(self.get_params(deep=False)),
                "n_features_in": self.n_features_in_, **(extra_meta or {})}
        save_checkpoint(path, self._state(), meta)


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, BaseEstimator):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def load_estimator(path, registry: dict[str, type]) -> ClipEstimator:
    tensors, meta = load_checkpoint(path)
    system = meta.get("system")
    if system not in registry:
        raise ValueError(f"{path}: unknown system {system!r}")
    cls = registry[system]
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["params"].items()}
    est = cls(**params)
    est.n_features_in_ = int(meta["n_features_in"])
    est._load_state(tensors)
    est.history_ = []
    return est
