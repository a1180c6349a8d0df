"""Fingerspelling search: proposal detection, visual-text matching and retrieval evaluation."""
from .baselines import AttnKWS, Recognizer, WholeClip
from .config import RunConfig, make_estimator
from .core import ALPHABET, Alphabet, Clip, LabeledSegment, Query, Segment, iou, is_ratio, ler, levenshtein
from .fssnet import FSSNet, ExtDet, ProposalDetector
from .search import ScoreMatrix
from .synthcorpus import Corpus, CorpusConfig, generate

__version__ = "0.1.0"

__all__ = [
    "ALPHABET", "Alphabet", "AttnKWS", "Clip", "Corpus", "CorpusConfig", "ExtDet", "FSSNet", "LabeledSegment",
    "ProposalDetector", "Query", "Recognizer", "RunConfig", "ScoreMatrix", "Segment", "WholeClip", "generate",
    "iou", "is_ratio", "ler", "levenshtein", "make_estimator",
]
