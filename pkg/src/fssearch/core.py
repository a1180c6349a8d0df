"""Domain types, interval arithmetic, the symbol alphabet and edit distance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
SPECIALS = " '&.@"
NON_FS = "<x>"
BLANK = "<blank>"


class Alphabet:
    """Fingerspelling symbol inventory with two reserved indices.

    Characters occupy indices ``0 .. n_chars - 1``; ``x_index`` marks
    non-fingerspelling and ``blank_index`` is the CTC blank.
    """

    def __init__(self, chars: str = LETTERS + SPECIALS):
        if len(set(chars)) != len(chars):
            raise ValueError("alphabet characters must be unique")
        self.chars = tuple(chars)
        self._index = {c: i for i, c in enumerate(self.chars)}
        self.x_index = len(self.chars)
        self.blank_index = len(self.chars) + 1

    @property
    def n_chars(self) -> int:
        return len(self.chars)

    @property
    def size(self) -> int:
        """Number of output classes including ``<x>`` and ``<blank>``."""
        return len(self.chars) + 2

    def symbol(self, index: int) -> str:
        if index == self.x_index:
            return NON_FS
        if index == self.blank_index:
            return BLANK
        return self.chars[index]

    def index(self, char: str) -> int:
        try:
            return self._index[char]
        except KeyError:
            raise ValueError(f"character {char!r} is not in the alphabet") from None

    def normalize(self, text: str) -> str:
        """Uppercase ASCII letters and reject anything outside the alphabet."""
        out = "".join(c.upper() if "a" <= c <= "z" else c for c in text)
        for c in out:
            self.index(c)
        return out

    def encode(self, text: str) -> list[int]:
        return [self.index(c) for c in self.normalize(text)]

    def decode(self, indices: Iterable[int]) -> str:
        return "".join(self.chars[i] for i in indices)

    def __eq__(self, other):
        return isinstance(other, Alphabet) and self.chars == other.chars

    def __repr__(self):
        return f"Alphabet({''.join(self.chars)!r})"


ALPHABET = Alphabet()


@dataclass(frozen=True, order=True)
class Segment:
    """Half-open frame interval ``[s, t)``."""

    s: int
    t: int

    def __post_init__(self):
        if not (0 <= self.s < self.t):
            raise ValueError(f"invalid segment [{self.s}, {self.t})")

    def __len__(self) -> int:
        return self.t - self.s

    @property
    def length(self) -> int:
        return self.t - self.s

    @property
    def center(self) -> float:
        return (self.s + self.t) / 2.0


@dataclass(frozen=True)
class LabeledSegment:
    segment: Segment
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("labeled segment text must be non-empty")

    @property
    def s(self) -> int:
        return self.segment.s

    @property
    def t(self) -> int:
        return self.segment.t


@dataclass(frozen=True)
class Query:
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("query must be non-empty")
        object.__setattr__(self, "text", ALPHABET.normalize(self.text))

    @property
    def chars(self) -> list[str]:
        return list(self.text)


@dataclass(eq=False)
class Clip:
    """A ``T x D`` frame-feature matrix with its labelled fingerspelling."""

    id: str
    frames: np.ndarray
    ground_truth: tuple[LabeledSegment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"clip {self.id}: frames must be 2-D, got shape {self.frames.shape}")
        self.ground_truth = tuple(sorted(self.ground_truth, key=lambda g: g.segment))
        T = self.frames.shape[0]
        for g in self.ground_truth:
            if g.t > T:
                raise ValueError(f"clip {self.id}: segment [{g.s}, {g.t}) exceeds length {T}")
        for a, b in zip(self.ground_truth, self.ground_truth[1:]):
            if intersection(a.segment, b.segment) > 0:
                raise ValueError(f"clip {self.id}: overlapping ground truth segments")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def words(self) -> set[str]:
        return {g.text for g in self.ground_truth}

    def __eq__(self, other):
        if not isinstance(other, Clip):
            return NotImplemented
        return (
            self.id == other.id
            and self.ground_truth == other.ground_truth
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )

    def __repr__(self):
        return f"Clip(id={self.id!r}, T={self.n_frames}, ground_truth={list(self.ground_truth)!r})"


def intersection(a, b) -> int:
    return max(0, min(a.t, b.t) - max(a.s, b.s))


def iou(a, b) -> float:
    inter = intersection(a, b)
    return inter / ((a.t - a.s) + (b.t - b.s) - inter)


def is_ratio(x, y) -> float:
    """Fraction of ``y`` covered by ``x``."""
    return intersection(x, y) / (y.t - y.s)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 2)`` arrays of ``[s, t)`` bounds."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    lo = np.maximum(a[:, None, 0], b[None, :, 0])
    hi = np.minimum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(hi - lo, 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return inter / union


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance, two-row dynamic programme."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ler(hyp: str, ref: str) -> float:
    """Letter error rate of ``hyp`` against a non-empty reference."""
    if not ref:
        raise ValueError("letter error rate needs a non-empty reference")
    return levenshtein(hyp, ref) / len(ref)
