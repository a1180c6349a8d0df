import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fssearch import search
from fssearch.search import ScoreMatrix, score_clip, score_word


def test_score_word_examples():
    assert score_word(0.5, 0.2, 1.0) == pytest.approx(0.4)
    assert score_word(1.0, 0.0) == 1.0
    assert score_word(0.3, 0.25, beta=0.0) == pytest.approx(0.75)
    # distances past 1 are clamped to zero score
    assert score_word(0.9, 1.7) == 0.0


def test_score_clip_is_max_over_proposals():
    p = [0.9, 0.5, 0.8]
    d = [0.6, 0.1, 0.3]
    brute = max(pi * max(0.0, 1 - di) for pi, di in zip(p, d))
    assert score_clip(p, d) == pytest.approx(brute)
    assert score_clip([0.9], [0.6]) == pytest.approx(score_word(0.9, 0.6))
    assert score_clip([], []) == 0.0


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 2)), min_size=1, max_size=8),
       st.floats(0, 1), st.floats(0, 2))
@settings(max_examples=200, deadline=None)
def test_adding_a_proposal_never_lowers_the_clip_score(props, p, d):
    ps, ds = zip(*props)
    before = score_clip(ps, ds)
    after = score_clip(list(ps) + [p], list(ds) + [d])
    assert after >= before
    if score_word(p, d) <= before:
        assert after == before


def test_ranking_ties_broken_by_id():
    assert search.ranking([0.5, 0.9, 0.5], ["b", "c", "a"]) == [("c", 0.9), ("a", 0.5), ("b", 0.5)]


def test_rankings_invariant_under_monotone_transform(rng):
    s = rng.random((6, 4))
    m1 = ScoreMatrix([f"c{i}" for i in range(6)], list("WXYZ"), s)
    m2 = ScoreMatrix(m1.clip_ids, m1.words, s ** 3)
    for d in ("fws", "fvs"):
        r1, r2 = m1.rankings(d), m2.rankings(d)
        assert {q: [i for i, _ in r] for q, r in r1.items()} == {q: [i for i, _ in r] for q, r in r2.items()}


def test_single_item_rankings():
    m = ScoreMatrix(["c0"], ["ONLY"], [[0.2]])
    assert search.fws(m, "c0") == [("ONLY", 0.2)]
    assert search.fvs(m, "ONLY") == [("c0", 0.2)]


def test_fws_and_fvs_are_rows_and_columns():
    m = ScoreMatrix(["a", "b"], ["X", "Y", "Z"], [[0.1, 0.7, 0.3], [0.9, 0.2, 0.3]])
    assert [w for w, _ in m.fws("a")] == ["Y", "Z", "X"]
    assert [c for c, _ in m.fvs("Z")] == ["a", "b"]
    with pytest.raises(ValueError, match="direction"):
        m.rankings("sideways")


def test_duplicates_and_shape_rejected():
    with pytest.raises(ValueError, match="duplicate word"):
        ScoreMatrix(["a"], ["X", "X"], [[0.1, 0.2]])
    with pytest.raises(ValueError, match="duplicate clip"):
        ScoreMatrix(["a", "a"], ["X"], [[0.1], [0.2]])
    with pytest.raises(ValueError, match="shape"):
        ScoreMatrix(["a"], ["X"], [[0.1, 0.2]])


def test_empty_vocabulary_and_clip_set_errors():
    with pytest.raises(ValueError, match="vocabulary"):
        search.fws(ScoreMatrix(["a"], [], np.zeros((1, 0))), "a")
    with pytest.raises(ValueError, match="clip set"):
        search.fvs(ScoreMatrix([], ["X"], np.zeros((0, 1))), "X")


def test_score_matrix_round_trip(tmp_path, rng):
    m = ScoreMatrix(["c1", "c0", "c2"], ["B", "A"], rng.random((3, 2)) / 3)
    path = tmp_path / "scores.tsv"
    m.save(path)
    back = ScoreMatrix.load(path)
    assert back.clip_ids == m.clip_ids and back.words == m.words
    assert back.scores.tobytes() == m.scores.tobytes()


def test_score_matrix_load_errors(tmp_path):
    path = tmp_path / "s.tsv"
    path.write_text(f"{search.FORMAT}\tclip_id\tword\tscore\nc0\tA\t0.5\nc1\tB\t0.1\n")
    with pytest.raises(ValueError, match="incomplete"):
        ScoreMatrix.load(path)
    path.write_text(f"{search.FORMAT}\tclip_id\tword\tscore\nc0\tA\n")
    with pytest.raises(ValueError, match="line 2"):
        ScoreMatrix.load(path)


def test_rankings_round_trip(tmp_path):
    m = ScoreMatrix(["a", "b"], ["X", "Y"], [[0.1, 0.7], [0.9, 0.7]])
    path = tmp_path / "r.tsv"
    search.save_rankings(m.rankings("fvs"), "fvs", path)
    direction, back = search.load_rankings(path)
    assert direction == "fvs"
    assert back == m.rankings("fvs")


def test_brute_force_max_over_three_proposals():
    p = [0.2, 0.95, 0.6]
    d = [0.05, 0.9, 0.4]
    for beta in (0.0, 0.5, 1.0, 2.0):
        want = max(pi ** beta * max(0, 1 - di) for pi, di in itertools.product(p, d) if (pi, di) in zip(p, d))
        assert score_clip(p, d, beta) == pytest.approx(want)
