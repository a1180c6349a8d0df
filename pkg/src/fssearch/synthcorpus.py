"""Synthetic fingerspelling corpus: letter-prototype feature streams in distractor signing.

Each split is generated as a set of "videos" chopped into ``clip_len``-frame
clips that overlap by ``overlap`` frames.  Fingerspelling segments are placed
so that none straddles a clip boundary, hence every segment is either fully
inside a clip or absent from it.

File format (``fssearch-corpus/1``) is JSON lines:

* line 1, header: ``format``, ``config`` (all :class:`CorpusConfig` fields),
  ``alphabet``, ``letter_prototypes`` / ``distractor_prototypes`` as
  ``{"shape": [n, D], "data": <base64 little-endian float64>}``,
  ``lexicon`` as ``[[word, tag], ...]`` with tag ``shared`` or ``test_only``,
  and ``counts`` per split.
* one line per clip: ``split``, ``id``, ``frames`` (same array encoding) and
  ``ground_truth`` as ``[[s, t, word], ...]`` with half-open ``[s, t)``.

Clips appear in split order train, dev, test.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import ALPHABET, LETTERS, Clip, LabeledSegment, Segment

FORMAT = "fssearch-corpus/1"
SPLITS = ("train", "dev", "test")


class CorpusFormatError(ValueError):
    """Raised when a corpus file cannot be parsed."""


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 1
    feature_dim: int = 64
    clip_len: int = 300
    overlap: int = 75
    clips_per_video: int = 4
    n_train: int = 500
    n_dev: int = 60
    n_test: int = 120
    lexicon_size: int = 300
    word_len_min: int = 2
    word_len_max: int = 10
    letter_dur_min: int = 2
    letter_dur_max: int = 6
    distractor_dur_min: int = 4
    distractor_dur_max: int = 12
    n_distractors: int = 40
    noise_sigma: float = 0.3
    fs_segments_per_clip_mean: float = 1.9
    max_segments_per_clip: int = 4
    min_gap: int = 4
    test_only_word_fraction: float = 0.2

    def __post_init__(self):
        if not self.clip_len > self.overlap >= 0:
            raise ValueError("need clip_len > overlap >= 0")
        if self.letter_dur_min < 1 or self.letter_dur_max < self.letter_dur_min:
            raise ValueError("need 1 <= letter_dur_min <= letter_dur_max")
        if self.distractor_dur_min < 1 or self.distractor_dur_max < self.distractor_dur_min:
            raise ValueError("need 1 <= distractor_dur_min <= distractor_dur_max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.word_len_min < 1 or self.word_len_max < self.word_len_min:
            raise ValueError("need 1 <= word_len_min <= word_len_max")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("split sizes must be >= 0")
        if not 0.0 <= self.test_only_word_fraction < 1.0:
            raise ValueError("test_only_word_fraction must lie in [0, 1)")
        if self.clips_per_video < 1 or self.n_distractors < 1 or self.feature_dim < 1:
            raise ValueError("clips_per_video, n_distractors and feature_dim must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}[split]


@dataclass(eq=False)
class Corpus:
    config: CorpusConfig
    letter_prototypes: np.ndarray
    distractor_prototypes: np.ndarray
    lexicon: tuple[tuple[str, str], ...]
    train: list[Clip] = field(default_factory=list)
    dev: list[Clip] = field(default_factory=list)
    test: list[Clip] = field(default_factory=list)

    def split(self, name: str) -> list[Clip]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def words(self, split: str) -> list[str]:
        """Sorted distinct ground-truth words of a split."""
        return sorted({w for c in self.split(split) for w in c.words})

    @property
    def test_only_words(self) -> set[str]:
        return {w for w, tag in self.lexicon if tag == "test_only"}

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.config == other.config
            and self.lexicon == other.lexicon
            and np.array_equal(self.letter_prototypes, other.letter_prototypes)
            and np.array_equal(self.distractor_prototypes, other.distractor_prototypes)
            and all(getattr(self, s) == getattr(other, s) for s in SPLITS)
        )


def _prototypes(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    # rejection-sample until all pairs are clearly separated; only enforced at dim >= 64
    for _ in range(1000):
        p = rng.standard_normal((n, dim))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        if dim < 64:
            return p
        cos = p @ p.T
        np.fill_diagonal(cos, 0.0)
        if np.abs(cos).max() < 0.5:
            return p
    raise RuntimeError(f"could not draw {n} near-orthogonal prototypes in {dim} dims")


def _lexicon(rng: np.random.Generator, cfg: CorpusConfig) -> tuple[tuple[str, str], ...]:
    n_letters = len(LETTERS)
    max_distinct = n_letters * (n_letters - 1) ** (cfg.word_len_min - 1)
    if cfg.lexicon_size > max_distinct:
        raise ValueError("lexicon_size too large for the minimum word length")
    words: list[str] = []
    seen = set()
    while len(words) < cfg.lexicon_size:
        n = int(rng.integers(cfg.word_len_min, cfg.word_len_max + 1))
        chars = [int(rng.integers(n_letters))]
        while len(chars) < n:
            # no immediate repeats: a doubled letter would render as one long run
            c = int(rng.integers(n_letters - 1))
            chars.append(c + (c >= chars[-1]))
        w = "".join(LETTERS[c] for c in chars)
        if w not in seen:
            seen.add(w)
            words.append(w)
    n_test_only = int(math.ceil(cfg.lexicon_size * cfg.test_only_word_fraction))
    if cfg.test_only_word_fraction > 0 and cfg.lexicon_size - n_test_only < 1:
        raise ValueError("lexicon too small to reserve test-only words")
    return tuple(
        (w, "test_only" if i >= cfg.lexicon_size - n_test_only else "shared")
        for i, w in enumerate(words)
    )


def _zipf(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


class _Renderer:
    def __init__(self, cfg: CorpusConfig, letters: np.ndarray, distractors: np.ndarray,
                 shared: list[str], test_only: list[str]):
        self.cfg = cfg
        self.letters = letters
        self.distractors = distractors
        self.shared = shared
        self.test_only = test_only
        self.p_shared = _zipf(len(shared)) if shared else None
        self.p_test_only = _zipf(len(test_only)) if test_only else None

    def _word(self, rng, split):
        if split == "test" and self.test_only and rng.random() < self.cfg.test_only_word_fraction:
            return self.test_only[rng.choice(len(self.test_only), p=self.p_test_only)]
        return self.shared[rng.choice(len(self.shared), p=self.p_shared)]

    def _count(self, rng) -> int:
        k = int(rng.poisson(self.cfg.fs_segments_per_clip_mean))
        return min(k, self.cfg.max_segments_per_clip)

    def _place(self, rng, split, n_new, lo, hi, forbidden, lead_gap):
        """Sample ``n_new`` (segment, word, durations) inside ``[lo, hi)``."""
        cfg = self.cfg
        for _ in range(200):
            words = [self._word(rng, split) for _ in range(n_new)]
            durs = [rng.integers(cfg.letter_dur_min, cfg.letter_dur_max + 1, size=len(w)) for w in words]
            lens = [int(d.sum()) for d in durs]
            min_gaps = lead_gap + cfg.min_gap * (n_new - 1)
            free = (hi - lo) - sum(lens) - min_gaps
            if free < 0:
                continue
            cuts = np.sort(rng.integers(0, free + 1, size=n_new))
            extra = np.diff(np.concatenate([[0], cuts]))
            out = []
            pos = lo + lead_gap
            for i in range(n_new):
                pos += int(extra[i]) + (cfg.min_gap if i else 0)
                out.append((Segment(pos, pos + lens[i]), words[i], durs[i]))
                pos += lens[i]
            if any(seg.s < f < seg.t for seg, _, _ in out for f in forbidden):
                continue
            return out
        return None

    def video(self, rng, split, n_chunks, video_id):
        cfg = self.cfg
        stride = cfg.clip_len - cfg.overlap
        total = cfg.clip_len + (n_chunks - 1) * stride
        D = self.letters.shape[1]
        clean = np.empty((total, D))
        # distractor runs over the whole stream; letters overwrite them below
        pos = 0
        while pos < total:
            d = int(rng.integers(cfg.distractor_dur_min, cfg.distractor_dur_max + 1))
            clean[pos:pos + d] = self.distractors[rng.integers(len(self.distractors))]
            pos += d
        placed: list[tuple[Segment, str]] = []
        clips_gt = []
        for k in range(n_chunks):
            start, end = k * stride, k * stride + cfg.clip_len
            lo = start if k == 0 else start + cfg.overlap
            inherited = [p for p in placed if p[0].s >= start]
            target = self._count(rng)
            n_new = max(0, target - len(inherited))
            # later clips start inside this one; no segment may straddle those starts
            forbidden = [j * stride for j in range(k + 1, n_chunks) if j * stride < end]
            lead_gap = cfg.min_gap if k > 0 else 0
            new = None
            while new is None:
                new = self._place(rng, split, n_new, lo, end, forbidden, lead_gap)
                if new is None:
                    n_new -= 1  # infeasible packing: resample with one fewer segment
            for seg, word, durs in new:
                p = seg.s
                for ch, d in zip(word, durs):
                    clean[p:p + d] = self.letters[ALPHABET.index(ch)]
                    p += int(d)
                placed.append((seg, word))
            clips_gt.append([
                LabeledSegment(Segment(seg.s - start, seg.t - start), w)
                for seg, w in placed if seg.s >= start and seg.t <= end
            ])
        noisy = clean + cfg.noise_sigma * rng.standard_normal(clean.shape) if cfg.noise_sigma > 0 else clean
        clips = []
        for k in range(n_chunks):
            start = k * stride
            clips.append(Clip(
                id=f"{split}-{video_id:04d}-{k}",
                frames=noisy[start:start + cfg.clip_len].copy(),
                ground_truth=tuple(clips_gt[k]),
            ))
        return clips


def generate(config: CorpusConfig) -> Corpus:
    """Deterministically generate a corpus from ``config.seed``."""
    cfg = config
    root = np.random.SeedSequence(cfg.seed)
    proto_rng = np.random.default_rng(root.spawn(1)[0])
    protos = _prototypes(proto_rng, ALPHABET.n_chars + cfg.n_distractors, cfg.feature_dim)
    letters, distractors = protos[:ALPHABET.n_chars], protos[ALPHABET.n_chars:]
    lexicon = _lexicon(np.random.default_rng([cfg.seed, 1]), cfg)
    shared = [w for w, tag in lexicon if tag == "shared"]
    test_only = [w for w, tag in lexicon if tag == "test_only"]
    renderer = _Renderer(cfg, letters, distractors, shared, test_only)
    splits = {}
    for split_no, split in enumerate(SPLITS):
        n = cfg.split_size(split)
        clips: list[Clip] = []
        video_id = 0
        while len(clips) < n:
            n_chunks = min(cfg.clips_per_video, n - len(clips))
            # seeded per (split, video) so videos can be generated independently
            rng = np.random.default_rng([cfg.seed, 2, split_no, video_id])
            clips.extend(renderer.video(rng, split, n_chunks, video_id))
            video_id += 1
        splits[split] = clips
    return Corpus(cfg, letters, distractors, lexicon, **splits)


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    shape = tuple(int(x) for x in d["shape"])
    raw = base64.b64decode(d["data"], validate=True)
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != math.prod(shape):
        raise ValueError(f"array data holds {arr.size} values, shape {list(shape)} needs {math.prod(shape)}")
    return arr.reshape(shape).astype(np.float64)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save(corpus: Corpus, path) -> None:
    counts = {s: len(corpus.split(s)) for s in SPLITS}
    header = {
        "format": FORMAT,
        "config": asdict(corpus.config),
        "alphabet": "".join(ALPHABET.chars),
        "letter_prototypes": _encode_array(corpus.letter_prototypes),
        "distractor_prototypes": _encode_array(corpus.distractor_prototypes),
        "lexicon": [list(e) for e in corpus.lexicon],
        "counts": counts,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for split in SPLITS:
            for clip in corpus.split(split):
                rec = {
                    "split": split,
                    "id": clip.id,
                    "frames": _encode_array(clip.frames),
                    "ground_truth": [[g.s, g.t, g.text] for g in clip.ground_truth],
                }
                fh.write(_dumps(rec) + "\n")


def load(path) -> Corpus:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusFormatError(f"{path}: line 1: empty file, expected a header record")

    def fail(lineno, msg):
        raise CorpusFormatError(f"{path}: line {lineno}: {msg}")

    def parse(lineno, text):
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as e:
            fail(lineno, f"malformed record ({e.msg} at column {e.colno})")
        if not isinstance(rec, dict):
            fail(lineno, "record is not an object")
        return rec

    header = parse(1, lines[0])
    if header.get("format") != FORMAT:
        fail(1, f"unsupported format tag {header.get('format')!r}, expected {FORMAT!r}")
    try:
        config = CorpusConfig.from_dict(header["config"])
        if header["alphabet"] != "".join(ALPHABET.chars):
            raise ValueError("alphabet differs from this build's alphabet")
        letters = _decode_array(header["letter_prototypes"])
        distractors = _decode_array(header["distractor_prototypes"])
        lexicon = tuple((str(w), str(tag)) for w, tag in header["lexicon"])
        counts = {s: int(header["counts"][s]) for s in SPLITS}
    except (KeyError, TypeError, ValueError) as e:
        fail(1, f"bad header: {e!r}")

    splits: dict[str, list[Clip]] = {s: [] for s in SPLITS}
    expected = [s for s in SPLITS for _ in range(counts[s])]
    for i, text in enumerate(lines[1:], start=2):
        if i - 2 >= len(expected):
            fail(i, "more clip records than the header declares")
        rec = parse(i, text)
        try:
            split = rec["split"]
            if split != expected[i - 2]:
                raise ValueError(f"expected a {expected[i - 2]!r} clip, got {split!r}")
            frames = _decode_array(rec["frames"])
            gt = tuple(
                LabeledSegment(Segment(int(s), int(t)), ALPHABET.normalize(str(w)))
                for s, t, w in rec["ground_truth"]
            )
            clip = Clip(id=str(rec["id"]), frames=frames, ground_truth=gt)
        except (KeyError, TypeError, ValueError) as e:
            fail(i, f"bad clip record: {e}")
        splits[split].append(clip)
    if len(lines) - 1 != len(expected):
        fail(len(lines) + 1, f"truncated file: {len(lines) - 1} clip records, header declares {len(expected)}")
    return Corpus(config, letters, distractors, lexicon, **splits)
