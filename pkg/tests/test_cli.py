import json

import pytest

from fssearch.cli import EXIT_CODES, main

SMALL = ["--set", "corpus.n_train=20", "--set", "corpus.n_dev=4", "--set", "corpus.n_test=8",
         "--set", "corpus.feature_dim=16", "--set", "corpus.lexicon_size=30"]
TINY = ["--set", "model.hidden_dim=8", "--set", "model.embed_dim=8", "--set", "model.conv_channels=8",
        "--set", "train.epochs=1", "--set", "train.detector_epochs=1"]


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corpus(workdir):
    path = workdir / "corpus.tsv"
    assert main(["gen-corpus", *SMALL, "--seed", "3", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(workdir, corpus):
    path = workdir / "fss.ckpt"
    assert main(["train", "--system", "fssnet", "--corpus", str(corpus), *TINY, "--out", str(path)]) == 0
    return path


def _pipeline(workdir, corpus, checkpoint, tag):
    sdir, edir = workdir / f"search-{tag}", workdir / f"eval-{tag}"
    assert main(["search", "--checkpoint", str(checkpoint), "--corpus", str(corpus), "--out", str(sdir)]) == 0
    assert main(["eval", "--corpus", str(corpus), "--ranked", str(sdir / "ranked-fvs.tsv"),
                 "--ranked", str(sdir / "ranked-fws.tsv"), "--proposals", str(sdir / "proposals.tsv"),
                 "--system", "fssnet", "--out", str(edir)]) == 0
    return sdir, edir


def test_full_pipeline_emits_a_report(workdir, corpus, checkpoint, capsys):
    sdir, edir = _pipeline(workdir, corpus, checkpoint, "a")
    doc = json.loads((edir / "report.json").read_text())
    assert [r["direction"] for r in doc["reports"]] == ["fvs", "fws"]
    for r in doc["reports"]:
        assert 0.0 <= r["metrics"]["mAP"] <= 1.0
        assert set(r["ap_iou"]) == {"0.1", "0.3", "0.5"}
    assert "mAP" in (edir / "report.md").read_text()
    manifest = json.loads((sdir / "manifest.json").read_text())
    assert manifest["command"] == "search" and set(manifest["inputs"]) == {"checkpoint", "corpus"}
    assert json.loads((workdir / "corpus.tsv.manifest.json").read_text())["config"]["corpus"]["seed"] == 3
    assert (workdir / "fss.ckpt.log.json").is_file()


def test_same_inputs_give_identical_report_bytes(workdir, corpus, checkpoint):
    _, a = _pipeline(workdir, corpus, checkpoint, "b")
    _, b = _pipeline(workdir, corpus, checkpoint, "c")
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_retraining_is_byte_identical(workdir, corpus, checkpoint):
    again = workdir / "again.ckpt"
    assert main(["train", "--system", "fssnet", "--corpus", str(corpus), *TINY, "--out", str(again)]) == 0
    assert again.read_bytes() == checkpoint.read_bytes()


def test_corpus_generation_is_reproducible(workdir, corpus):
    again = workdir / "again.tsv"
    assert main(["gen-corpus", *SMALL, "--seed", "3", "--out", str(again)]) == 0
    assert again.read_bytes() == corpus.read_bytes()


def test_missing_file(workdir, capsys):
    code = main(["search", "--checkpoint", str(workdir / "nope.ckpt"), "--corpus", "x", "--out", str(workdir)])
    assert code == EXIT_CODES["missing_file"] == 3
    assert _error(capsys)["error"] == "missing_file"


def test_bad_config(workdir, capsys):
    cfg = workdir / "bad.yaml"
    cfg.write_text("loss:\n  gamma: 1\n")
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(workdir / "z.tsv")]) == 4
    assert _error(capsys)["error"] == "config"
    assert main(["gen-corpus", "--set", "corpus.nope=1", "--out", str(workdir / "z.tsv")]) == 4


def test_bad_corpus(workdir, capsys):
    bad = workdir / "garbage.tsv"
    bad.write_text("this is not a corpus\n")
    assert main(["eval", "--corpus", str(bad), "--proposals", str(bad), "--out", str(workdir / "e")]) == 5
    assert _error(capsys)["error"] == "corpus_format"


def test_dimension_mismatch(workdir, checkpoint, capsys):
    other = workdir / "wide.tsv"
    assert main(["gen-corpus", *SMALL, "--set", "corpus.feature_dim=24", "--out", str(other)]) == 0
    code = main(["search", "--checkpoint", str(checkpoint), "--corpus", str(other), "--out", str(workdir / "s")])
    assert code == 6
    err = _error(capsys)
    assert err["error"] == "dimension_mismatch" and "24" in err["message"]


def test_corrupt_checkpoint(workdir, corpus, capsys):
    bad = workdir / "bad.ckpt"
    bad.write_bytes(b"\x00not a checkpoint")
    assert main(["search", "--checkpoint", str(bad), "--corpus", str(corpus), "--out", str(workdir / "s")]) == 7
    assert _error(capsys)["error"] == "checkpoint"


def test_usage_errors(workdir, corpus, capsys):
    assert main([]) == 2
    assert main(["train", "--system", "nonsense", "--corpus", "c", "--out", "o"]) == 2
    assert main(["eval", "--corpus", str(corpus), "--out", str(workdir / "e")]) == 2
    assert main(["eval", "--corpus", str(corpus), "--metrics", "mAP,bogus", "--proposals", str(corpus),
                 "--out", str(workdir / "e")]) == EXIT_CODES["input"]


def test_gradcheck_command(workdir, capsys):
    out = workdir / "grad.txt"
    assert main(["gradcheck", "--instances", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines and all(line.startswith("PASS\t") for line in lines)
    assert json.loads((workdir / "grad.txt.manifest.json").read_text())["tolerance"] == 1e-4
