"""Joint proposal detection and visual-text matching (FSS-Net), its detector-only
variant and the external-detector pipeline built from the two."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import evalkit
from .core import Clip, LabeledSegment, Segment
from .detector import (DEFAULT_SCALES, AnchorGrid, DetectionTargets, DetectorHead, Proposal, assign_anchors,
                       detection_loss, proposals_from_outputs)
from .estimator import ClipEstimator, frames_tensor, length_groups
from .matcher import FilterConfig, MatchConfig, SegmentEncoder, TextEncoder, filter_proposals, triplet_loss
from .nnkit import BiRecurrentEncoder, ConvPoolStack, default_chain
from .search import score_word
from .validation import check_clips, check_is_fitted, check_vocabulary

SEGMENT_CHUNK = 2048


class FSSNetModule(nn.Module):
    def __init__(self, n_features, hidden_dim=32, embed_dim=64, seg_layers=1, text_layers=1,
                 conv_channels=64, scales=DEFAULT_SCALES, with_detector=True, with_matcher=True):
        super().__init__()
        self.trunk = BiRecurrentEncoder(n_features, hidden_dim, 1)
        F = self.trunk.out_dim
        c = conv_channels
        self.detector = DetectorHead(F, scales, default_chain((c, c, c))) if with_detector else None
        if with_matcher:
            self.segment_encoder = SegmentEncoder(F, hidden_dim, seg_layers, embed_dim)
            self.text_encoder = TextEncoder(hidden_dim, text_layers, embed_dim)
        else:
            self.segment_encoder = self.text_encoder = None

    def features(self, X: torch.Tensor) -> torch.Tensor:
        return self.trunk.sequence(X)


class _ProposalMixin:
    """Proposal generation from a module with a trunk and a detector head."""

    _anchor_cache: dict

    def _anchors(self, T: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_anchor_cache", {})
        if T not in cache:
            cache[T] = self.module_.detector.anchors(T).bounds(T)
        return cache[T]

    def _targets(self, clips: list[Clip]) -> dict[str, DetectionTargets]:
        return {c.id: assign_anchors(self._anchors(c.n_frames), c.ground_truth) for c in clips}

    def _detector_loss(self, feats, batch, rng):
        logits, reg = self.module_.detector(feats)
        losses = [detection_loss(logits[b], reg[b], self.targets_[c.id], rng) for b, c in enumerate(batch)]
        return torch.stack(losses).sum(), logits, reg

    def _decode(self, logits, reg, clips) -> list[list[Proposal]]:
        logits = logits.detach().numpy()
        reg = reg.detach().numpy()
        return [proposals_from_outputs(logits[b], reg[b], self._anchors(c.n_frames), c.n_frames,
                                       self.n_proposals, self.nms_iou)
                for b, c in enumerate(clips)]

    def _detect(self, clips: list[Clip]) -> list[list[Proposal]]:
        out: list = [None] * len(clips)
        with torch.no_grad():
            for group in length_groups(clips, 32):
                sub = [clips[i] for i in group]
                feats = self.module_.features(frames_tensor(sub))
                logits, reg = self.module_.detector(feats)
                for i, props in zip(group, self._decode(logits, reg, sub)):
                    out[i] = props
        return out

    def localize(self, clips) -> list:
        clips = check_clips(clips, n_features=self.n_features_in_, min_frames=self.min_frames)
        return [(c.id, p.segment, p.p_det) for c, props in zip(clips, self.propose(clips)) for p in props]


class ProposalDetector(_ProposalMixin, ClipEstimator):
    """Trunk plus detector head trained with the detection loss alone."""

    system = "detector"

    def __init__(self, hidden_dim=32, conv_channels=64, scales=DEFAULT_SCALES, n_proposals=50, nms_iou=0.7,
                 epochs=10, batch_size=8, lr=5e-3, optimizer="adam", patience=3, random_state=0):
        self.hidden_dim = hidden_dim
        self.conv_channels = conv_channels
        self.scales = scales
        self.n_proposals = n_proposals
        self.nms_iou = nms_iou
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.patience = patience
        self.random_state = random_state

    @property
    def min_frames(self):
        return 8

    def _build(self, n_features):
        self._anchor_cache = {}
        return FSSNetModule(n_features, self.hidden_dim, conv_channels=self.conv_channels,
                            scales=tuple(self.scales), with_matcher=False)

    def _prepare(self, clips):
        self.targets_ = self._targets(clips)

    def _train_step(self, batch, rng):
        feats = self.module_.features(frames_tensor(batch))
        loss, _, _ = self._detector_loss(feats, batch, rng)
        return loss / len(batch)

    def _dev_score(self, dev):
        if not any(c.ground_truth for c in dev):
            return 0.0
        return evalkit.localization_ap(self.localize(dev), dev, (0.5,))[0.5]

    def propose(self, clips) -> list[list[Proposal]]:
        check_is_fitted(self, "module_")
        clips = check_clips(clips, n_features=self.n_features_in_, min_frames=self.min_frames)
        return self._detect(clips)

    def _scores(self, clips, words):
        raise TypeError("a detector alone does not score words")


class FSSNet(_ProposalMixin, ClipEstimator):
    """Fingerspelling search network.

    Trains a shared recurrent trunk with ``lambda_det * L_det + L_tri`` and
    scores a (clip, word) pair by the best ``p_det ** beta * (1 - d)`` over
    the clip's proposals.

    Ablation switches: ``use_generator=False`` trains on ground truth only and
    searches over every anchor window with ``p_det = 1``; ``k=0`` disables
    sampled proposals; ``proposal_source`` substitutes a frozen external
    detector for the built-in head.
    """

    system = "fssnet"

    def __init__(self, hidden_dim=32, embed_dim=64, seg_layers=1, text_layers=1, conv_channels=64,
                 scales=DEFAULT_SCALES, margin=0.45, n_neg_v=5, n_neg_w=5, lambda_det=0.1, beta=1.0,
                 delta_iou=0.8, delta_is=0.8, k=4, n_proposals=50, nms_iou=0.7, use_generator=True,
                 proposal_source=None, epochs=10, batch_size=8, lr=5e-3, optimizer="adam", patience=3,
                 random_state=0):
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.seg_layers = seg_layers
        self.text_layers = text_layers
        self.conv_channels = conv_channels
        self.scales = scales
        self.margin = margin
        self.n_neg_v = n_neg_v
        self.n_neg_w = n_neg_w
        self.lambda_det = lambda_det
        self.beta = beta
        self.delta_iou = delta_iou
        self.delta_is = delta_is
        self.k = k
        self.n_proposals = n_proposals
        self.nms_iou = nms_iou
        self.use_generator = use_generator
        self.proposal_source = proposal_source
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.patience = patience
        self.random_state = random_state

    @property
    def min_frames(self):
        return 8

    @property
    def _own_detector(self) -> bool:
        return self.use_generator and self.proposal_source is None

    def _match_config(self):
        return MatchConfig(self.margin, self.n_neg_v, self.n_neg_w, self.embed_dim, self.lambda_det)

    def _filter_config(self):
        return FilterConfig(self.delta_iou, self.delta_is, self.k)

    def _build(self, n_features):
        self._anchor_cache = {}
        return FSSNetModule(n_features, self.hidden_dim, self.embed_dim, self.seg_layers, self.text_layers,
                            self.conv_channels, tuple(self.scales), with_detector=self._own_detector)

    def _prepare(self, clips):
        if self._own_detector:
            self.targets_ = self._targets(clips)
        self._external = {}
        if self.proposal_source is not None and self.k > 0:
            for c, props in zip(clips, self.proposal_source.propose(clips)):
                self._external[c.id] = props

    def positive_set(self, clip: Clip, proposals: Sequence[Proposal] | None,
                     rng: np.random.Generator | None) -> list[LabeledSegment]:
        """Ground truth plus sampled near-ground-truth proposals."""
        pos = list(clip.ground_truth)
        if proposals and self.k > 0 and self.use_generator:
            pos += filter_proposals([p.segment for p in proposals], clip.ground_truth, self._filter_config(), rng)
        return pos

    def _train_step(self, batch, rng):
        feats = self.module_.features(frames_tensor(batch))
        B = len(batch)
        det_term = feats.new_zeros(())
        proposals: list = [None] * B
        if self._own_detector:
            if self.lambda_det > 0:
                l_det, logits, reg = self._detector_loss(feats, batch, rng)
                det_term = self.lambda_det * l_det
            else:
                # lambda_det = 0: no detection gradient reaches the trunk, heads still learn
                l_det, logits, reg = self._detector_loss(feats.detach(), batch, rng)
                det_term = l_det
            if self.k > 0:
                proposals = self._decode(logits, reg, batch)
        elif self.proposal_source is not None:
            proposals = [self._external.get(c.id) for c in batch]

        segments, labels = [], []
        for b, clip in enumerate(batch):
            for ls in self.positive_set(clip, proposals[b], rng):
                segments.append((b, ls.s, ls.t))
                labels.append(ls.text)
        if not segments:
            return det_term / B
        vocab = sorted(set(labels))
        index = {w: i for i, w in enumerate(vocab)}
        visual = self.module_.segment_encoder(feats, segments)
        text = self.module_.text_encoder(vocab)
        l_tri = triplet_loss(visual, text, [index[w] for w in labels], config=self._match_config())
        return (det_term + l_tri) / B

    # inference ---------------------------------------------------------
    def propose(self, clips) -> list[list[Proposal]]:
        """Up to ``n_proposals`` proposals per clip, best ``p_det`` first."""
        check_is_fitted(self, "module_")
        clips = check_clips(clips, n_features=self.n_features_in_, min_frames=self.min_frames)
        if self.proposal_source is not None:
            return self.proposal_source.propose(clips)
        if not self.use_generator:
            return [self._windows(c.n_frames) for c in clips]
        return self._detect(clips)

    def _windows(self, T: int) -> list[Proposal]:
        cache = self.__dict__.setdefault("_window_cache", {})
        if T not in cache:
            # same anchor layout as the detector head, without its weights
            stack = ConvPoolStack(1, default_chain((1, 1, 1)))
            bounds = AnchorGrid.for_stack(stack, T, tuple(self.scales)).bounds(T)
            uniq = sorted({(int(s), int(t)) for s, t in bounds})
            cache[T] = [Proposal(Segment(s, t), 1.0) for s, t in uniq]
        return cache[T]

    def encode_text(self, words: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "module_")
        words = check_vocabulary(words)
        with torch.no_grad():
            return self.module_.text_encoder(words).numpy()

    def encode_segments(self, clips, segments: Sequence[Sequence[Segment]]) -> list[np.ndarray]:
        """Unit embeddings for ``segments[i]`` of ``clips[i]``."""
        check_is_fitted(self, "module_")
        clips = list(clips)
        out: list = [None] * len(clips)
        with torch.no_grad():
            for group in length_groups(clips, 16):
                sub = [clips[i] for i in group]
                feats = self.module_.features(frames_tensor(sub))
                flat = [(b, s.s, s.t) for b, i in enumerate(group) for s in segments[i]]
                parts = [self.module_.segment_encoder(feats, flat[j:j + SEGMENT_CHUNK])
                         for j in range(0, len(flat), SEGMENT_CHUNK)]
                emb = torch.cat(parts).numpy() if parts else np.zeros((0, self.embed_dim))
                pos = 0
                for i in group:
                    n = len(segments[i])
                    out[i] = emb[pos:pos + n]
                    pos += n
        return out

    def encode_segment(self, clip: Clip, segment: Segment) -> np.ndarray:
        return self.encode_segments([clip], [[segment]])[0][0]

    def scores_from_proposals(self, clips, words, proposals: Sequence[Sequence[Proposal]]) -> np.ndarray:
        """Best ``p_det ** beta * max(0, 1 - d)`` per (clip, word) over the given proposals."""
        text = self.encode_text(words)
        embs = self.encode_segments(clips, [[p.segment for p in props] for props in proposals])
        out = np.zeros((len(clips), len(words)))
        for i, (props, V) in enumerate(zip(proposals, embs)):
            if len(props) == 0:
                continue
            p = np.array([q.p_det for q in props])
            out[i] = score_word(p[:, None], 1.0 - V @ text.T, self.beta).max(axis=0)
        return out

    def _scores(self, clips, words):
        return self.scores_from_proposals(clips, words, self.propose(clips))

    def _state(self):
        return dict(self.module_.state_dict())


class ExtDet(ClipEstimator):
    """Frozen stand-alone detector feeding a separately trained matcher."""

    system = "extdet"

    def __init__(self, hidden_dim=32, embed_dim=64, seg_layers=1, text_layers=1, conv_channels=64,
                 scales=DEFAULT_SCALES, margin=0.45, n_neg_v=5, n_neg_w=5, beta=1.0, delta_iou=0.8,
                 delta_is=0.8, k=4, n_proposals=50, nms_iou=0.7, detector_epochs=10, epochs=10, batch_size=8,
                 lr=5e-3, optimizer="adam", patience=3, random_state=0):
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.seg_layers = seg_layers
        self.text_layers = text_layers
        self.conv_channels = conv_channels
        self.scales = scales
        self.margin = margin
        self.n_neg_v = n_neg_v
        self.n_neg_w = n_neg_w
        self.beta = beta
        self.delta_iou = delta_iou
        self.delta_is = delta_is
        self.k = k
        self.n_proposals = n_proposals
        self.nms_iou = nms_iou
        self.detector_epochs = detector_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.patience = patience
        self.random_state = random_state

    min_frames = 8

    def _make_detector(self):
        return ProposalDetector(self.hidden_dim, self.conv_channels, self.scales, self.n_proposals, self.nms_iou,
                                self.detector_epochs, self.batch_size, self.lr, self.optimizer, self.patience,
                                self.random_state + 7919)

    def _make_matcher(self, detector):
        return FSSNet(self.hidden_dim, self.embed_dim, self.seg_layers, self.text_layers, self.conv_channels,
                      self.scales, self.margin, self.n_neg_v, self.n_neg_w, 0.0, self.beta, self.delta_iou,
                      self.delta_is, self.k, self.n_proposals, self.nms_iou, True, detector, self.epochs,
                      self.batch_size, self.lr, self.optimizer, self.patience, self.random_state)

    def fit(self, clips, dev=None):
        clips = check_clips(clips, min_frames=self.min_frames)
        self.detector_ = self._make_detector().fit(clips, dev)
        self.matcher_ = self._make_matcher(self.detector_).fit(clips, dev)
        self.n_features_in_ = self.matcher_.n_features_in_
        self.module_ = self.matcher_.module_
        self.history_ = [dict(r, stage="detector") for r in self.detector_.history_] + \
                        [dict(r, stage="matcher") for r in self.matcher_.history_]
        return self

    def propose(self, clips):
        check_is_fitted(self, "detector_")
        return self.detector_.propose(clips)

    def localize(self, clips):
        check_is_fitted(self, "detector_")
        return self.detector_.localize(clips)

    def _scores(self, clips, words):
        return self.matcher_._scores(clips, words)

    def _state(self):
        out = {f"detector.{k}": v for k, v in self.detector_.module_.state_dict().items()}
        out.update({f"matcher.{k}": v for k, v in self.matcher_.module_.state_dict().items()})
        return out

    def _load_state(self, tensors):
        det = self._make_detector()
        det.n_features_in_ = self.n_features_in_
        det._load_state({k[9:]: v for k, v in tensors.items() if k.startswith("detector.")})
        mat = self._make_matcher(det)
        mat.n_features_in_ = self.n_features_in_
        mat._load_state({k[8:]: v for k, v in tensors.items() if k.startswith("matcher.")})
        self.detector_, self.matcher_, self.module_ = det, mat, mat.module_
