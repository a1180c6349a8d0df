import numpy as np
import pytest
from sklearn.base import clone

from fssearch.baselines import AttnKWS, Recognizer, WholeClip
from fssearch.config import registry
from fssearch.core import Clip
from fssearch.estimator import length_groups, load_estimator
from fssearch.fssnet import ExtDet, FSSNet, ProposalDetector
from fssearch.validation import NotFittedError, check_vocabulary

ALL = [FSSNet, ExtDet, Recognizer, WholeClip, AttnKWS, ProposalDetector]


@pytest.mark.parametrize("cls", ALL)
def test_get_params_and_clone(cls):
    est = cls(hidden_dim=7, random_state=3)
    params = est.get_params()
    assert params["hidden_dim"] == 7 and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(lr=0.02).lr == 0.02


@pytest.mark.parametrize("cls", [FSSNet, ExtDet, Recognizer, WholeClip, AttnKWS])
def test_unfitted_estimators_refuse_to_score(cls, tiny_corpus):
    with pytest.raises(NotFittedError):
        cls().decision_function(tiny_corpus.test[:1], ["CAT"])


def test_input_validation(tiny_fssnet, tiny_corpus):
    clip = tiny_corpus.test[0]
    with pytest.raises(ValueError, match="features per frame"):
        tiny_fssnet.decision_function([Clip("z", np.zeros((300, 3)), [])], ["CAT"])
    with pytest.raises(ValueError, match="non-empty"):
        tiny_fssnet.decision_function([clip], [])
    with pytest.raises(ValueError, match="duplicate"):
        tiny_fssnet.decision_function([clip], ["CAT", "cat"])
    with pytest.raises(ValueError, match="unique"):
        tiny_fssnet.decision_function([clip, clip], ["CAT"])
    with pytest.raises(TypeError):
        tiny_fssnet.decision_function(["not a clip"], ["CAT"])
    with pytest.raises(ValueError, match="at least one clip"):
        FSSNet().fit([])
    assert check_vocabulary(["cat", "Dog"]) == ["CAT", "DOG"]


def test_fit_is_deterministic(tiny_corpus):
    words = sorted({w for c in tiny_corpus.test for w in c.words})
    a = FSSNet(hidden_dim=8, embed_dim=8, conv_channels=8, epochs=1, batch_size=8).fit(tiny_corpus.train)
    b = FSSNet(hidden_dim=8, embed_dim=8, conv_channels=8, epochs=1, batch_size=8).fit(tiny_corpus.train)
    assert a.history_ == b.history_
    np.testing.assert_array_equal(a.decision_function(tiny_corpus.test, words),
                                  b.decision_function(tiny_corpus.test, words))


def test_checkpoint_round_trip_gives_identical_scores(tiny_fssnet, tiny_corpus, tmp_path):
    words = sorted({w for c in tiny_corpus.test for w in c.words})
    path = tmp_path / "m.ckpt"
    tiny_fssnet.save(path)
    back = load_estimator(path, registry())
    assert back.get_params() == tiny_fssnet.get_params()
    np.testing.assert_array_equal(back.decision_function(tiny_corpus.test, words),
                                  tiny_fssnet.decision_function(tiny_corpus.test, words))


def test_extdet_checkpoint_round_trip(tiny_corpus, tmp_path):
    est = ExtDet(hidden_dim=8, embed_dim=8, conv_channels=8, detector_epochs=1, epochs=1, batch_size=8)
    est.fit(tiny_corpus.train[:12])
    words = sorted({w for c in tiny_corpus.test for w in c.words})
    path = tmp_path / "e.ckpt"
    est.save(path)
    back = load_estimator(path, registry())
    np.testing.assert_array_equal(back.decision_function(tiny_corpus.test, words),
                                  est.decision_function(tiny_corpus.test, words))
    assert [h["stage"] for h in est.history_] == ["detector", "matcher"]


def test_unknown_system_in_checkpoint(tiny_fssnet, tmp_path):
    path = tmp_path / "m.ckpt"
    tiny_fssnet.save(path)
    with pytest.raises(ValueError, match="unknown system"):
        load_estimator(path, {})


def test_dev_set_enables_lr_halving(tiny_corpus):
    est = WholeClip(hidden_dim=4, embed_dim=4, epochs=5, batch_size=8, lr=1e-3, patience=0)
    est.fit(tiny_corpus.train[:8], tiny_corpus.dev)
    assert all("dev" in h for h in est.history_)
    assert est.history_[-1]["lr"] <= 1e-3
    plain = WholeClip(hidden_dim=4, embed_dim=4, epochs=2, batch_size=8).fit(tiny_corpus.train[:8])
    assert all("dev" not in h for h in plain.history_)


def test_length_groups_batch_equal_lengths():
    clips = [Clip(f"c{i}", np.zeros((T, 1)), []) for i, T in enumerate([10, 12, 10, 10, 12])]
    groups = length_groups(clips, 2)
    assert sorted(i for g in groups for i in g) == list(range(5))
    for g in groups:
        assert len(g) <= 2 and len({clips[i].n_frames for i in g}) == 1
