"""Clip/word scoring and the two retrieval directions built on one score matrix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

FORMAT = "#fssearch-scores/1"
RANKED_FORMAT = "#fssearch-ranked/1"


def score_word(p_det, distance, beta: float = 1.0):
    """``p_det ** beta * max(0, 1 - d)``; works elementwise on arrays."""
    return np.power(p_det, beta) * np.maximum(0.0, 1.0 - np.asarray(distance, dtype=np.float64))


def score_clip(p_det, distances, beta: float = 1.0) -> float:
    """Best proposal score for one word; 0 when the clip has no proposals."""
    p_det = np.asarray(p_det, dtype=np.float64)
    if p_det.size == 0:
        return 0.0
    return float(np.max(score_word(p_det, distances, beta)))


def ranking(scores: Sequence[float], ids: Sequence[str]) -> list[tuple[str, float]]:
    """Sort descending by score, ties by id."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order]


def _check_unique(ids, what):
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate {what} ids")


@dataclass
class ScoreMatrix:
    """``scores[i, j]`` = score of clip ``clip_ids[i]`` for word ``words[j]``."""

    clip_ids: list[str]
    words: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.clip_ids = list(self.clip_ids)
        self.words = list(self.words)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        _check_unique(self.clip_ids, "clip")
        _check_unique(self.words, "word")
        if self.scores.shape != (len(self.clip_ids), len(self.words)):
            raise ValueError(f"score matrix shape {self.scores.shape} does not match "
                             f"{len(self.clip_ids)} clips x {len(self.words)} words")

    def fws(self, clip_id: str) -> list[tuple[str, float]]:
        return ranking(self.scores[self.clip_ids.index(clip_id)], self.words)

    def fvs(self, word: str) -> list[tuple[str, float]]:
        return ranking(self.scores[:, self.words.index(word)], self.clip_ids)

    def rankings(self, direction: str) -> dict[str, list[tuple[str, float]]]:
        if direction == "fws":
            return {c: self.fws(c) for c in self.clip_ids}
        if direction == "fvs":
            return {w: self.fvs(w) for w in self.words}
        raise ValueError(f"direction must be 'fws' or 'fvs', got {direction!r}")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{FORMAT}\tclip_id\tword\tscore\n")
            for i, c in enumerate(self.clip_ids):
                for j, w in enumerate(self.words):
                    fh.write(f"{c}\t{w}\t{float(self.scores[i, j])!r}\n")

    @classmethod
    def load(cls, path) -> "ScoreMatrix":
        clip_ids: dict[str, int] = {}
        words: dict[str, int] = {}
        triples = []
        with open(path, encoding="utf-8") as fh:
            if not fh.readline().startswith(FORMAT):
                raise ValueError(f"{path}: line 1: not a score matrix file")
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}: line {lineno}: expected 3 fields")
                c, w, s = parts
                try:
                    value = float(s)
                except ValueError:
                    raise ValueError(f"{path}: line {lineno}: bad score {s!r}") from None
                clip_ids.setdefault(c, len(clip_ids))
                words.setdefault(w, len(words))
                triples.append((clip_ids[c], words[w], value))
        scores = np.full((len(clip_ids), len(words)), np.nan)
        for i, j, s in triples:
            scores[i, j] = s
        if np.isnan(scores).any():
            raise ValueError(f"{path}: score matrix is incomplete")
        return cls(list(clip_ids), list(words), scores)


def fws(matrix: ScoreMatrix, clip_id: str) -> list[tuple[str, float]]:
    if not matrix.words:
        raise ValueError("fws needs a non-empty vocabulary")
    return matrix.fws(clip_id)


def fvs(matrix: ScoreMatrix, word: str) -> list[tuple[str, float]]:
    if not matrix.clip_ids:
        raise ValueError("fvs needs a non-empty clip set")
    return matrix.fvs(word)


def save_rankings(rankings: dict[str, list[tuple[str, float]]], direction: str, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{RANKED_FORMAT}\t{direction}\tquery\titem\trank\tscore\n")
        for q in sorted(rankings):
            for rank, (item, score) in enumerate(rankings[q], start=1):
                fh.write(f"{q}\t{item}\t{rank}\t{float(score)!r}\n")


def load_rankings(path) -> tuple[str, dict[str, list[tuple[str, float]]]]:
    out: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if head[0] != RANKED_FORMAT or len(head) < 2:
            raise ValueError(f"{path}: line 1: not a ranked-list file")
        direction = head[1]
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 fields")
            q, item, rank, score = parts
            out.setdefault(q, []).append((int(rank), item, float(score)))
    return direction, {q: [(i, s) for _, i, s in sorted(v)] for q, v in out.items()}
