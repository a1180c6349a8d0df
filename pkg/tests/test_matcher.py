import math

import numpy as np
import pytest
import torch

from fssearch import gradsuite
from fssearch.core import ALPHABET, LabeledSegment, Segment
from fssearch.matcher import (FilterConfig, MatchConfig, SegmentEncoder, TextEncoder, filter_proposals,
                              mine_negatives, total_loss, triplet_loss)
from fssearch.nnkit import DTYPE


def _unit(*xs):
    v = torch.tensor(xs, dtype=DTYPE)
    return v / v.norm()


def _at_cos(c):
    return torch.tensor([c, math.sqrt(1 - c * c)], dtype=DTYPE)


def _triplet_oracle(V, Tx, widx, rel, m, cap_v, cap_w):
    """Direct per-pair transcription of the two hinge terms."""
    V, Tx = V.numpy(), Tx.numpy()
    total = 0.0
    for i in range(len(V)):
        d = lambda a, b: 1.0 - float(a @ b)
        pos = d(V[i], Tx[widx[i]])
        nw = sorted(d(V[i], Tx[j]) for j in range(len(Tx)) if not rel[i, j] and d(V[i], Tx[j]) > pos)[:cap_w]
        nv = sorted(d(V[k], Tx[widx[i]]) for k in range(len(V))
                    if not rel[k, widx[i]] and d(V[k], Tx[widx[i]]) > pos)[:cap_v]
        if nw:
            total += max(0.0, m + pos - sum(nw) / len(nw))
        if nv:
            total += max(0.0, m + pos - sum(nv) / len(nv))
    return total


def test_filter_keeps_exact_match_and_drops_disjoint():
    g = [LabeledSegment(Segment(10, 20), "CAT")]
    out = filter_proposals([Segment(10, 20), Segment(30, 40)], g, FilterConfig(1.0, 1.0, 4))
    assert out == [LabeledSegment(Segment(10, 20), "CAT")]


def test_filter_inclusive_boundary():
    # (0,8) against (0,10): IoU = IS = 0.8 exactly
    g = [LabeledSegment(Segment(0, 10), "AB")]
    assert filter_proposals([Segment(0, 8)], g, FilterConfig(0.8, 0.8)) == [LabeledSegment(Segment(0, 8), "AB")]
    assert filter_proposals([Segment(0, 8)], g, FilterConfig(0.81, 0.8)) == []


def test_filter_caps_at_k_and_is_order_invariant(rng):
    g = [LabeledSegment(Segment(0, 40), "WORD")]
    props = [Segment(0, 40 - i) for i in range(8)]
    cfg = FilterConfig(0.5, 0.5, 3)
    a = filter_proposals(props, g, cfg, np.random.default_rng(5))
    b = filter_proposals(props[::-1], g, cfg, np.random.default_rng(5))
    assert a == b and len(a) == 3
    assert all(x.text == "WORD" for x in a)
    assert filter_proposals(props, g, FilterConfig(0.5, 0.5, 0)) == []


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(1.2, 0.5)
    with pytest.raises(ValueError):
        FilterConfig(0.5, 0.5, -1)
    with pytest.raises(ValueError):
        MatchConfig(margin=0)
    with pytest.raises(ValueError):
        MatchConfig(n_neg_w=0)


def test_mine_negatives_examples():
    assert mine_negatives(0.4, [0.3, 0.5, 0.6], cap=5).tolist() == [1, 2]
    assert mine_negatives(0.4, [0.6, 0.5, 0.3], cap=1).tolist() == [1]
    assert mine_negatives(0.4, []).tolist() == []
    assert mine_negatives(0.4, [0.5, 0.6], eligible=[False, True]).tolist() == [1]


def test_triplet_scalar_example():
    # distances 0.2 to the positive word and 0.3 to the negative
    v = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
    t = torch.stack([_at_cos(0.8), _at_cos(0.7)])
    assert triplet_loss(v, t, [0]).item() == pytest.approx(0.35, abs=1e-12)


def test_triplet_saturated_hinge_is_zero():
    v = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
    t = torch.stack([_at_cos(1.0), _at_cos(0.5)])   # 0 vs 0.5 >= 0 + 0.45
    assert triplet_loss(v, t, [0]).item() == 0.0


def test_triplet_empty_negative_sets():
    v = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
    assert triplet_loss(v, v.clone(), [0]).item() == 0.0
    assert triplet_loss(v[:0], v, []).item() == 0.0


def test_triplet_zero_margin_equal_distances():
    v = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
    t = torch.stack([_at_cos(0.6), _at_cos(0.6)])
    assert triplet_loss(v, t, [0], config=MatchConfig(margin=1e-300)).item() == 0.0


def test_duplicate_word_is_never_its_own_negative():
    v = torch.stack([_unit(1.0, 0.0), _unit(0.0, 1.0)])
    t = _unit(1.0, 0.0)[None]
    # both visual items carry word 0; the far one must not be a negative for the near one
    assert triplet_loss(v, t, [0, 0]).item() == 0.0


def test_triplet_matches_oracle(rng):
    for _ in range(100):
        P, W, E = int(rng.integers(1, 6)), int(rng.integers(1, 6)), 4
        V = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(P, E))), dim=1)
        Tx = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(W, E))), dim=1)
        widx = [int(i) for i in rng.integers(0, W, size=P)]
        rel = np.zeros((P, W), dtype=bool)
        rel[np.arange(P), widx] = True
        rel |= rng.random((P, W)) < 0.2
        cfg = MatchConfig(margin=float(rng.uniform(0.1, 0.6)), n_neg_v=int(rng.integers(1, 4)),
                          n_neg_w=int(rng.integers(1, 4)))
        got = triplet_loss(V, Tx, widx, rel, cfg).item()
        want = _triplet_oracle(V, Tx, widx, rel, cfg.margin, cfg.n_neg_v, cfg.n_neg_w)
        assert got == pytest.approx(want, abs=1e-12)


def test_total_loss_examples():
    two, one = torch.tensor(2.0), torch.tensor(1.0)
    assert total_loss(two, one, 0.1).item() == pytest.approx(1.2)
    assert total_loss(two, one, 0.0).item() == 1.0
    assert total_loss(torch.tensor(0.0), torch.tensor(0.0), 0.1).item() == 0.0


def test_text_encoder_properties():
    torch.manual_seed(0)
    enc = TextEncoder(hidden_dim=4, embed_dim=6)
    e = enc(["ASL", "ASL", "QZXJ"])
    torch.testing.assert_close(e[0], e[1])
    torch.testing.assert_close(e.norm(dim=1), torch.ones(3, dtype=DTYPE))
    assert ALPHABET.encode("ASL") == [ALPHABET.index(c) for c in "ASL"]
    with pytest.raises(ValueError):
        enc([""])


def test_segment_encoder_properties():
    torch.manual_seed(0)
    enc = SegmentEncoder(3, 4, 1, 5)
    x = torch.randn(2, 20, 3, dtype=DTYPE)
    x[1, 10:15] = x[0, 2:7]
    e = enc(x, [(0, 2, 7), (1, 10, 15), (0, 0, 20)])
    torch.testing.assert_close(e[0], e[1])
    torch.testing.assert_close(enc(x, [(0, 0, 20)])[0], e[2])
    torch.testing.assert_close(e.norm(dim=1), torch.ones(3, dtype=DTYPE))
    with pytest.raises(ValueError, match="degenerate"):
        enc(x, [(0, 5, 5)])
    with pytest.raises(ValueError, match="outside"):
        enc(x, [(0, 15, 21)])


def test_joint_objective_gradient_on_micro_batch():
    [res] = gradsuite.run_suite(instances=2, seed=4, names=["joint_objective"])
    assert res.passed, res.worst
