"""Finite-difference checks of every differentiable op and of the joint training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import nnkit
from .core import ALPHABET, Clip, LabeledSegment, Segment
from .ctc import ctc_loss
from .detector import DetectorHead, assign_anchors, detection_loss
from .matcher import MatchConfig, SegmentEncoder, TextEncoder, triplet_loss
from .nnkit import DTYPE

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def _randn(g: torch.Generator, *shape, requires_grad=True):
    return torch.randn(*shape, generator=g, dtype=DTYPE).requires_grad_(requires_grad)


def _unit_rows(g, n, d):
    return nnkit.l2_normalize(torch.randn(n, d, generator=g, dtype=DTYPE)).detach().requires_grad_(True)


def _seeded(module_fn, seed):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return module_fn()


def _case_sigmoid(g, seed):
    x = _randn(g, 5)
    w = torch.randn(5, generator=g, dtype=DTYPE)
    return lambda: (nnkit.sigmoid(x) * w).sum(), [x]


def _case_softmax(g, seed):
    x = _randn(g, 3, 4)
    w = torch.randn(3, 4, generator=g, dtype=DTYPE)
    return lambda: (nnkit.softmax(x, dim=-1) * w).sum(), [x]


def _case_l2_normalize(g, seed):
    x = _randn(g, 3, 4)
    w = torch.randn(3, 4, generator=g, dtype=DTYPE)
    return lambda: (nnkit.l2_normalize(x) * w).sum(), [x]


def _case_cosine_distance(g, seed):
    a, b = _randn(g, 6), _randn(g, 6)
    return lambda: nnkit.cosine_distance(a, b), [a, b]


def _case_cosine_matrix(g, seed):
    a, b = _randn(g, 3, 5), _randn(g, 4, 5)
    w = torch.randn(3, 4, generator=g, dtype=DTYPE)
    return lambda: (nnkit.cosine_distance_matrix(a, b) * w).sum(), [a, b]


def _case_conv_stack(g, seed):
    stack = _seeded(lambda: nnkit.ConvPoolStack(3, nnkit.default_chain((4, 4, 4))), seed)
    x = _randn(g, 2, 20, 3)
    params = [x, stack.convs[0].weight, stack.convs[-1].bias]
    return lambda: stack(x).pow(2).sum(), params


def _case_recurrent_sequence(g, seed):
    enc = _seeded(lambda: nnkit.BiRecurrentEncoder(3, 4), seed)
    x = _randn(g, 2, 5, 3)
    w = torch.randn(2, 5, 8, generator=g, dtype=DTYPE)
    return lambda: (enc.sequence(x) * w).sum(), [x, enc.rnn.weight_hh_l0]


def _case_recurrent_final(g, seed):
    enc = _seeded(lambda: nnkit.BiRecurrentEncoder(3, 4), seed)
    x = _randn(g, 3, 6, 3)
    w = torch.randn(3, 8, generator=g, dtype=DTYPE)
    lengths = [6, 4, 2]
    return lambda: (enc.final(x, lengths) * w).sum(), [x, enc.rnn.weight_ih_l0_reverse]


def _case_segment_encoder(g, seed):
    enc = _seeded(lambda: SegmentEncoder(4, 3, 1, 5), seed)
    feats = _randn(g, 2, 12, 4)
    w = torch.randn(3, 5, generator=g, dtype=DTYPE)
    segs = [(0, 1, 6), (1, 3, 12), (0, 7, 9)]
    return lambda: (enc(feats, segs) * w).sum(), [feats, enc.proj.weight]


def _case_text_encoder(g, seed):
    enc = _seeded(lambda: TextEncoder(3, 1, 5, 4), seed)
    w = torch.randn(3, 5, generator=g, dtype=DTYPE)
    return lambda: (enc(["AB", "CAT", "Q"]) * w).sum(), [enc.chars.weight, enc.proj.weight]


def _case_detection_loss(g, seed):
    rs = np.random.default_rng(seed)
    T = 32
    head = _seeded(lambda: DetectorHead(3, (4, 8, 16), nnkit.default_chain((4, 4, 4))), seed)
    bounds = head.anchors(T).bounds(T)
    s = int(rs.integers(0, 16))
    gt = [LabeledSegment(Segment(s, s + int(rs.integers(4, 16))), "A")]
    targets = assign_anchors(bounds, gt)
    feats = _randn(g, 1, T, 3)

    def fn():
        logits, reg = head(feats)
        return detection_loss(logits[0], reg[0], targets, np.random.default_rng(seed))
    return fn, [feats, head.cls.weight, head.reg.weight]


def _case_triplet(g, seed):
    P, W, E = 4, 5, 6
    v, t = _unit_rows(g, P, E), _unit_rows(g, W, E)
    rs = np.random.default_rng(seed)
    idx = [int(i) for i in rs.integers(0, W, size=P)]
    cfg = MatchConfig(margin=0.45, n_neg_v=2, n_neg_w=2, embed_dim=E)
    return lambda: triplet_loss(v, t, idx, config=cfg), [v, t]


def _case_ctc(g, seed):
    rs = np.random.default_rng(seed)
    C, T = 4, 6
    logits = _randn(g, 2, T, C)
    targets = [[int(c) for c in rs.integers(0, C - 1, size=n)] for n in (2, 1)]
    return lambda: ctc_loss(torch.log_softmax(logits, -1), targets, blank=C - 1).sum(), [logits]


def _case_joint_objective(g, seed):
    """``lambda * L_det + L_tri`` through the shared trunk of a tiny network."""
    from .fssnet import FSSNet

    rs = np.random.default_rng(seed)
    T, D = 24, 3
    clips = []
    for i in range(2):
        s = int(rs.integers(0, 10))
        gt = [LabeledSegment(Segment(s, s + int(rs.integers(5, 12))), ["AB", "CAB", "BC"][i + int(rs.integers(0, 2))])]
        clips.append(Clip(f"c{i}", rs.normal(size=(T, D)), gt))
    net = FSSNet(hidden_dim=3, embed_dim=4, conv_channels=3, scales=(4, 8, 16), lambda_det=0.5, k=0,
                 random_state=seed)
    net.n_features_in_ = D
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net.module_ = net._build(D)
    net.module_.to(DTYPE)
    net._prepare(clips)
    mod = net.module_
    params = [mod.trunk.rnn.weight_ih_l0, mod.detector.reg.weight, mod.segment_encoder.proj.weight,
              mod.text_encoder.proj.bias]
    return lambda: net._train_step(clips, np.random.default_rng(seed)), params


CASES: dict[str, Callable] = {
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "l2_normalize": _case_l2_normalize,
    "cosine_distance": _case_cosine_distance,
    "cosine_distance_matrix": _case_cosine_matrix,
    "conv_pool_stack": _case_conv_stack,
    "recurrent_sequence": _case_recurrent_sequence,
    "recurrent_final": _case_recurrent_final,
    "segment_encoder": _case_segment_encoder,
    "text_encoder": _case_text_encoder,
    "detection_loss": _case_detection_loss,
    "triplet_loss": _case_triplet,
    "ctc_loss": _case_ctc,
    "joint_objective": _case_joint_objective,
}


def run_suite(instances: int = 20, seed: int = 0, names=None, step: float = 1e-6) -> list[CheckResult]:
    out = []
    for name in names or CASES:
        worst = 0.0
        for i in range(instances):
            g = torch.Generator().manual_seed(seed * 10007 + i)
            fn, params = CASES[name](g, seed * 10007 + i)
            worst = max(worst, *nnkit.gradcheck(fn, params, step=step))
        out.append(CheckResult(name, instances, worst))
    return out
