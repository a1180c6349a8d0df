"""Input validation shared by the estimators."""
from __future__ import annotations

from typing import Sequence

from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .core import ALPHABET, Clip

__all__ = ["check_clips", "check_vocabulary", "check_is_fitted", "NotFittedError"]


def check_clips(clips, *, allow_empty: bool = False, n_features: int | None = None,
                min_frames: int = 1) -> list[Clip]:
    clips = list(clips)
    if not clips and not allow_empty:
        raise ValueError("expected at least one clip")
    for c in clips:
        if not isinstance(c, Clip):
            raise TypeError(f"expected Clip instances, got {type(c).__name__}")
        if n_features is not None and c.frames.shape[1] != n_features:
            raise ValueError(f"clip {c.id} has {c.frames.shape[1]} features per frame, model expects {n_features}")
        if c.n_frames < min_frames:
            raise ValueError(f"clip {c.id} has {c.n_frames} frames, need at least {min_frames}")
    ids = [c.id for c in clips]
    if len(set(ids)) != len(ids):
        raise ValueError("clip ids must be unique")
    return clips


def check_vocabulary(words: Sequence[str]) -> list[str]:
    """Normalise query words; rejects an empty vocabulary and duplicates."""
    out = [ALPHABET.normalize(w) for w in words]
    if not out:
        raise ValueError("vocabulary must be non-empty")
    if any(not w for w in out):
        raise ValueError("vocabulary words must be non-empty")
    if len(set(out)) != len(out):
        dupes = sorted({w for w in out if out.count(w) > 1})
        raise ValueError(f"duplicate vocabulary words: {dupes}")
    return out
