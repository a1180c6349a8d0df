import math

import numpy as np
import pytest
import torch

from fssearch import detector
from fssearch.baselines import (AttnKWS, Recognizer, WholeClip, _AttnModule, attention_to_segments,
                                hypothesis_words, recognizer_score, transcript)
from fssearch.core import ALPHABET, Clip, LabeledSegment, Segment
from fssearch.fssnet import FSSNet
from fssearch.nnkit import DTYPE

X = ALPHABET.x_index


def _clip(T, *spans):
    return Clip("c", np.zeros((T, 2)), [LabeledSegment(Segment(s, t), w) for s, t, w in spans])


def test_transcripts():
    enc = ALPHABET.encode
    assert transcript(_clip(20)) == [X]
    assert transcript(_clip(20, (0, 20, "AB"))) == enc("AB")
    assert transcript(_clip(20, (3, 8, "AB"), (10, 20, "CD"))) == [X] + enc("AB") + [X] + enc("CD")
    assert transcript(_clip(20, (0, 5, "AB"), (5, 9, "C"))) == enc("AB") + [X] + enc("C") + [X]


def test_hypothesis_words_split_on_x():
    labels = [X] + ALPHABET.encode("ALL") + [X, X] + ALPHABET.encode("CAT")
    assert hypothesis_words(labels) == ["ALL", "CAT"]
    assert hypothesis_words([X]) == []


def test_recognizer_score_examples():
    assert recognizer_score([["ASL"]], "ASL") == 1.0
    assert recognizer_score([["ALL"]], "ASL") == pytest.approx(2 / 3)
    assert recognizer_score([[]], "ASL") == 0.0
    assert recognizer_score([["QQQQQQQ"]], "AB") == 0.0      # clamped
    assert recognizer_score([["XY"], ["ALL", "AS"]], "ASL") == pytest.approx(2 / 3)


def test_recognizer_score_is_one_only_on_exact_match(rng):
    for _ in range(100):
        words = ["".join(rng.choice(list("ABC"), size=int(rng.integers(1, 4)))) for _ in range(3)]
        q = "".join(rng.choice(list("ABC"), size=int(rng.integers(1, 4))))
        s = recognizer_score([words], q)
        assert 0.0 <= s <= 1.0
        assert (s == 1.0) == (q in words)


def test_attention_segments():
    bump = np.array([0.0, 0.0, 0.3, 0.3, 0.3, 0.05])
    assert attention_to_segments(bump) == [(Segment(2, 5), pytest.approx(0.3))]
    flat = np.full(7, 1 / 7)
    assert attention_to_segments(flat) == [(Segment(0, 7), pytest.approx(1 / 7))]
    two = np.array([0.4, 0.4, 0.1, 0.0, 0.2, 0.3, 0.0])
    segs = attention_to_segments(two, tau=0.5)
    assert [s for s, _ in segs] == [Segment(0, 2), Segment(4, 6)]
    assert segs[1][1] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        attention_to_segments([])


def test_uniform_scores_give_uniform_attention():
    torch.manual_seed(0)
    mod = _AttnModule(2, 4, 3, 1)
    frames = torch.nn.functional.normalize(torch.randn(1, 9, 3, dtype=DTYPE), dim=-1)
    with torch.no_grad():
        mod.alpha.fill_(0.0)
        a, _ = mod.attend(frames, torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE))
    torch.testing.assert_close(a, torch.full((1, 1, 9), 1 / 9, dtype=DTYPE))


def test_scripted_two_frame_attention():
    mod = _AttnModule(2, 2, 2, 1)
    with torch.no_grad():
        mod.out.weight.copy_(torch.tensor([[2.0, -1.0]]))
        mod.out.bias.fill_(0.5)
    frames = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=DTYPE)
    a, logit = mod.attend(frames, torch.tensor([[1.0, 0.0]], dtype=DTYPE))
    # scores cos^2 = (1, 0); weights e/(e+1), 1/(e+1)
    a1, a2 = math.e / (math.e + 1), 1 / (math.e + 1)
    assert a[0, 0].tolist() == pytest.approx([a1, a2])
    assert torch.sigmoid(logit).item() == pytest.approx(1 / (1 + math.exp(-(2 * a1 - a2 + 0.5))))
    assert a.sum().item() == pytest.approx(1.0)


@pytest.mark.parametrize("cls,kw", [(Recognizer, {}), (WholeClip, {"embed_dim": 8}), (AttnKWS, {"embed_dim": 8})])
def test_baselines_train_and_score(tiny_corpus, cls, kw):
    est = cls(hidden_dim=8, epochs=1, batch_size=8, random_state=0, **kw).fit(tiny_corpus.train)
    words = sorted({w for c in tiny_corpus.test for w in c.words})
    S = est.decision_function(tiny_corpus.test, words)
    assert S.shape == (len(tiny_corpus.test), len(words))
    assert np.isfinite(S).all() and (S >= 0).all() and (S <= 1).all()
    np.testing.assert_array_equal(S, est.decision_function(tiny_corpus.test, words))


def test_recognizer_posteriors_are_distributions(tiny_corpus):
    est = Recognizer(hidden_dim=8, epochs=1, batch_size=8).fit(tiny_corpus.train[:8])
    for p in est.frame_posteriors(tiny_corpus.test[:2]):
        assert p.shape == (300, ALPHABET.size)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    hyps = est.decode(tiny_corpus.test[:1])[0]
    assert len(hyps) <= 10
    assert all(a.log_prob >= b.log_prob for a, b in zip(hyps, hyps[1:]))


def test_attnkws_attention_and_localization(tiny_corpus):
    est = AttnKWS(hidden_dim=8, embed_dim=8, epochs=1, batch_size=8).fit(tiny_corpus.train[:8])
    a = est.attention(tiny_corpus.test[:2], ["CAT", "DOG"])
    assert a.shape == (2, 2, 300) and (a >= 0).all()
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)
    preds = est.localize(tiny_corpus.test[:3])
    assert preds and all(0 <= s.s < s.t <= 300 for _, s, _ in preds)


def test_external_detector_plumbing_identity(tiny_corpus, tiny_fssnet):
    clips = tiny_corpus.test
    words = sorted({w for c in clips for w in c.words})
    base = tiny_fssnet.decision_function(clips, words)
    # same matcher weights, proposals supplied by the jointly trained model itself
    ext = FSSNet(**{**tiny_fssnet.get_params(), "proposal_source": tiny_fssnet})
    ext.n_features_in_ = tiny_fssnet.n_features_in_
    ext.module_ = ext._build(ext.n_features_in_)
    missing, unexpected = ext.module_.load_state_dict(tiny_fssnet.module_.state_dict(), strict=False)
    assert not missing and all(k.startswith("detector.") for k in unexpected)
    np.testing.assert_array_equal(ext.decision_function(clips, words), base)


def test_exported_proposals_reproduce_scores(tiny_corpus, tiny_fssnet, tmp_path):
    clips = tiny_corpus.test
    words = sorted({w for c in clips for w in c.words})
    props = tiny_fssnet.propose(clips)
    path = tmp_path / "proposals.tsv"
    detector.dump_proposals([(c.id, p) for c, ps in zip(clips, props) for p in ps], path)
    loaded = detector.load_proposals(path)
    again = tiny_fssnet.scores_from_proposals(clips, words, [loaded.get(c.id, []) for c in clips])
    np.testing.assert_array_equal(again, tiny_fssnet.decision_function(clips, words))
