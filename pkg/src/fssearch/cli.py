"""``fssearch`` command line: corpus generation, training, search, evaluation and gradient checks.

Every command writes a manifest next to its outputs.  Failures print one
JSON line ``{"error": <kind>, "message": ...}`` on stderr and exit with the
code listed in ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import evalkit, synthcorpus
from .config import SYSTEMS, ConfigError, RunConfig, registry
from .detector import Proposal, dump_proposals, load_proposals
from .estimator import load_estimator
from .experiments import evaluate, search_vocabulary
from .search import ScoreMatrix, load_rankings, save_rankings

EXIT_CODES = {
    "failed": 1,
    "usage": 2,
    "missing_file": 3,
    "config": 4,
    "corpus_format": 5,
    "dimension_mismatch": 6,
    "checkpoint": 7,
    "input": 8,
}

log = logging.getLogger("fssearch")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _version() -> str:
    from . import __version__
    return __version__


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, config: RunConfig | None, inputs: dict, outputs: dict, **extra) -> None:
    doc = {
        "command": command,
        "version": _version(),
        "config": config.to_dict() if config is not None else None,
        "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in sorted(inputs.items())},
        "outputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in sorted(outputs.items())},
        **extra,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{what} not found: {p}")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(_require(args.config, "config")) if args.config else RunConfig()
    cfg = cfg.with_overrides(args.set or [])
    return cfg


def _load_corpus(path) -> synthcorpus.Corpus:
    return synthcorpus.load(_require(path, "corpus"))


def _load_model(path):
    try:
        return load_estimator(_require(path, "checkpoint"), registry())
    except CliError:
        raise
    except (ValueError, KeyError, OSError) as e:
        raise CliError("checkpoint", f"{path}: {e}") from None


def _check_dims(model, corpus, ckpt):
    dim = corpus.config.feature_dim
    if model.n_features_in_ != dim:
        raise CliError("dimension_mismatch",
                       f"checkpoint {ckpt} expects {model.n_features_in_} features per frame, corpus has {dim}")


def _split(corpus, name):
    if name not in synthcorpus.SPLITS:
        raise CliError("input", f"unknown split {name!r}")
    clips = corpus.split(name)
    if not clips:
        raise CliError("input", f"split {name!r} is empty")
    return clips


# commands ----------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, corpus=replace(cfg.corpus, seed=args.seed))
    ccfg = cfg.corpus
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthcorpus.save(synthcorpus.generate(ccfg), out)
    write_manifest(f"{out}.manifest.json", "gen-corpus", cfg, {}, {"corpus": out})
    print(out)
    return 0


def cmd_train(args) -> int:
    from .config import make_estimator

    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    corpus_path = _require(args.corpus, "corpus")
    corpus = _load_corpus(corpus_path)
    est = make_estimator(args.system, cfg)
    dev = corpus.dev if args.dev else None
    est.fit(corpus.train, dev)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    est.save(out, {"config": cfg.to_dict()})
    log_path = Path(f"{out}.log.json")
    log_path.write_text(json.dumps(est.history_, sort_keys=True, indent=1) + "\n")
    write_manifest(f"{out}.manifest.json", "train", cfg, {"corpus": corpus_path},
                   {"checkpoint": out, "log": log_path}, system=args.system)
    print(out)
    return 0


def cmd_search(args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    corpus_path = _require(args.corpus, "corpus")
    model = _load_model(ckpt)
    corpus = _load_corpus(corpus_path)
    _check_dims(model, corpus, ckpt)
    clips = _split(corpus, args.split)
    words = search_vocabulary(clips)
    if not words:
        raise CliError("input", f"split {args.split!r} contains no words to search for")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matrix = model.score_matrix(clips, words)
    outputs = {"scores": out / "scores.tsv"}
    matrix.save(outputs["scores"])
    directions = ("fws", "fvs") if args.direction == "both" else (args.direction,)
    for d in directions:
        outputs[f"ranked_{d}"] = out / f"ranked-{d}.tsv"
        save_rankings(matrix.rankings(d), d, outputs[f"ranked_{d}"])
    preds = model.localize(clips)
    if preds:
        outputs["proposals"] = out / "proposals.tsv"
        dump_proposals([(c, Proposal(seg, float(np.clip(s, 0.0, 1.0)))) for c, seg, s in preds],
                       outputs["proposals"])
    write_manifest(out / "manifest.json", "search", None, {"checkpoint": ckpt, "corpus": corpus_path}, outputs,
                   system=model.system, split=args.split)
    print(out)
    return 0


def cmd_eval(args) -> int:
    corpus_path = _require(args.corpus, "corpus")
    corpus = _load_corpus(corpus_path)
    clips = _split(corpus, args.split)
    metrics = tuple(m.strip() for m in args.metrics.split(",")) if args.metrics else evalkit.RANK_METRICS
    unknown = set(metrics) - set(evalkit.RANK_METRICS)
    if unknown:
        raise CliError("input", f"unknown metrics {sorted(unknown)}; choose from {','.join(evalkit.RANK_METRICS)}")
    inputs = {"corpus": corpus_path}
    ap_iou = {}
    if args.proposals:
        inputs["proposals"] = _require(args.proposals, "proposals")
        props = load_proposals(inputs["proposals"])
        preds = [(c, p.segment, p.p_det) for c, ps in sorted(props.items()) for p in ps]
        ap_iou = evalkit.localization_ap(preds, clips)
    reports = []
    for i, path in enumerate(args.ranked or []):
        inputs[f"ranked_{i}"] = _require(path, "ranked list")
        try:
            direction, rankings = load_rankings(path)
        except ValueError as e:
            raise CliError("input", str(e)) from None
        try:
            judgments = evalkit.build_judgments(clips, direction)
            report = evalkit.evaluate_rankings(rankings, judgments, args.system or "", direction, metrics)
        except ValueError as e:
            raise CliError("input", f"{path}: {e}") from None
        report.ap_iou = dict(ap_iou)
        reports.append(report)
    if not reports:
        if not ap_iou:
            raise CliError("usage", "eval needs --ranked and/or --proposals")
        reports.append(evalkit.MetricReport(args.system or "", "", ap_iou=ap_iou))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"reports": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    table = evalkit.render_table(reports, metrics)
    (out / "report.md").write_text(table + "\n")
    write_manifest(out / "manifest.json", "eval", None, inputs,
                   {"report": out / "report.json", "table": out / "report.md"})
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    seed = 0 if args.seed is None else args.seed
    results = run_suite(args.instances, seed)
    lines = [f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\tinstances={r.instances}\tworst_rel_err={r.worst:.3e}"
             for r in results]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_manifest(f"{out}.manifest.json", "gradcheck", None, {}, {"report": out},
                       seed=seed, tolerance=TOLERANCE)
    return 0 if all(r.passed for r in results) else EXIT_CODES["failed"]


def cmd_experiment(args) -> int:
    """Train and evaluate several systems over several seeds on one corpus."""
    from .experiments import train

    cfg = _config(args)
    corpus_path = _require(args.corpus, "corpus")
    corpus = _load_corpus(corpus_path)
    clips = _split(corpus, args.split)
    systems = [s.strip() for s in args.systems.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, outputs = [], {}
    for system in systems:
        for seed in seeds:
            est = train(system, cfg.with_seed(seed), corpus, use_dev=args.dev)
            ev = evaluate(est, clips, f"{system}/seed{seed}")
            reports.extend(ev.reports.values())
            path = out / f"{system}-seed{seed}.json"
            path.write_text(json.dumps({d: r.to_dict() for d, r in sorted(ev.reports.items())},
                                       sort_keys=True, indent=1) + "\n")
            outputs[f"{system}_seed{seed}"] = path
    outputs["table"] = out / "table.md"
    outputs["table"].write_text(evalkit.render_table(reports) + "\n")
    write_manifest(out / "manifest.json", "experiment", cfg, {"corpus": corpus_path}, outputs,
                   systems=systems, seeds=seeds)
    print(outputs["table"].read_text(), end="")
    return 0


# parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fssearch", description="Fingerspelling search toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    config_flags(g)
    g.add_argument("--seed", type=int, help="corpus generator seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train one system")
    config_flags(t)
    t.add_argument("--system", required=True, choices=SYSTEMS)
    t.add_argument("--corpus", required=True)
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--dev", action="store_true", help="halve the learning rate on dev mAP plateaus")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="score and rank a corpus split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--direction", default="both", choices=("fws", "fvs", "both"))
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="compute metrics for ranked lists and/or proposals")
    e.add_argument("--ranked", action="append", help="ranked-list file (repeatable)")
    e.add_argument("--proposals", help="proposal file for AP@IoU")
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--metrics", help="comma-separated subset of " + ",".join(evalkit.RANK_METRICS))
    e.add_argument("--system", default="", help="name shown in the report")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the differentiable ops")
    c.add_argument("--seed", type=int)
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("experiment", help="train and evaluate systems over seeds")
    config_flags(x)
    x.add_argument("--corpus", required=True)
    x.add_argument("--systems", default=",".join(SYSTEMS))
    x.add_argument("--seeds", default="0,1,2")
    x.add_argument("--split", default="test")
    x.add_argument("--dev", action="store_true")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv=None) -> int:
    level = os.environ.get("FSS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES["usage"] if e.code else 0
    try:
        return args.func(args)
    except CliError as e:
        return _fail(e.kind, str(e))
    except ConfigError as e:
        return _fail("config", str(e))
    except synthcorpus.CorpusFormatError as e:
        return _fail("corpus_format", str(e))
    except FileNotFoundError as e:
        return _fail("missing_file", str(e))
    except ValueError as e:
        return _fail("input", str(e))


if __name__ == "__main__":
    sys.exit(main())
