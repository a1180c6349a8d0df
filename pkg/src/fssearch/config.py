"""Run configuration: one YAML document covering corpus, model, loss and training knobs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from .synthcorpus import CorpusConfig

SYSTEMS = ("fssnet", "recognizer", "wholeclip", "attnkws", "extdet")


class ConfigError(ValueError):
    """Invalid configuration document or override."""


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    embed_dim: int = 64
    seg_layers: int = 1
    text_layers: int = 1
    conv_channels: int = 64
    n_proposals: int = 50
    nms_iou: float = 0.7
    beam_width: int = 10
    prune: float = 1e-3
    attn_tau: float = 0.5
    attn_negatives: int = 5


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.45
    n_neg_v: int = 5
    n_neg_w: int = 5
    lambda_det: float = 0.1
    beta: float = 1.0
    delta_iou: float = 0.8
    delta_is: float = 0.8
    k: int = 4
    use_generator: bool = True


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 5e-3
    batch_size: int = 8
    epochs: int = 10
    detector_epochs: int = 10
    patience: int = 3


_SECTIONS = {"corpus": CorpusConfig, "model": ModelConfig, "loss": LossConfig, "train": TrainConfig}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run.  ``seed`` drives model initialisation and sampling;
    the corpus carries its own generator seed."""

    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{name: asdict(getattr(self, name)) for name in _SECTIONS}}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"seed", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        if "seed" in d:
            kw["seed"] = _coerce("seed", d["seed"], int)
        for name, typ in _SECTIONS.items():
            kw[name] = _section(name, typ, d.get(name) or {})
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(doc)

    def with_overrides(self, assignments: Sequence[str]) -> "RunConfig":
        """Apply ``section.key=value`` (or ``seed=value``) assignments."""
        d = self.to_dict()
        for a in assignments:
            key, sep, raw = a.partition("=")
            if not sep:
                raise ConfigError(f"override {a!r} is not of the form key=value")
            value = yaml.safe_load(raw) if raw else ""
            parts = key.strip().split(".")
            if parts == ["seed"]:
                d["seed"] = value
            elif len(parts) == 2 and parts[0] in _SECTIONS:
                if parts[1] not in d[parts[0]]:
                    raise ConfigError(f"unknown config key {key!r}")
                d[parts[0]][parts[1]] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return RunConfig.from_dict(d)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _coerce(key: str, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    return value


def _section(name: str, typ, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name: f for f in fields(typ)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    kw = {}
    for k, v in values.items():
        # annotations are strings under postponed evaluation
        kw[k] = _coerce(f"{name}.{k}", v, _TYPES[known[k].type])
    try:
        return typ(**kw)
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from None


def make_estimator(system: str, cfg: RunConfig, **overrides):
    """Unfitted estimator for ``system`` configured from ``cfg``."""
    from .baselines import AttnKWS, Recognizer, WholeClip
    from .fssnet import ExtDet, FSSNet

    m, l, t = cfg.model, cfg.loss, cfg.train
    common = dict(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, optimizer=t.optimizer,
                  patience=t.patience, random_state=cfg.seed)
    if system == "fssnet":
        est = FSSNet(hidden_dim=m.hidden_dim, embed_dim=m.embed_dim, seg_layers=m.seg_layers,
                     text_layers=m.text_layers, conv_channels=m.conv_channels, margin=l.margin, n_neg_v=l.n_neg_v,
                     n_neg_w=l.n_neg_w, lambda_det=l.lambda_det, beta=l.beta, delta_iou=l.delta_iou,
                     delta_is=l.delta_is, k=l.k, n_proposals=m.n_proposals, nms_iou=m.nms_iou,
                     use_generator=l.use_generator, **common)
    elif system == "extdet":
        est = ExtDet(hidden_dim=m.hidden_dim, embed_dim=m.embed_dim, seg_layers=m.seg_layers,
                     text_layers=m.text_layers, conv_channels=m.conv_channels, margin=l.margin, n_neg_v=l.n_neg_v,
                     n_neg_w=l.n_neg_w, beta=l.beta, delta_iou=l.delta_iou, delta_is=l.delta_is, k=l.k,
                     n_proposals=m.n_proposals, nms_iou=m.nms_iou, detector_epochs=t.detector_epochs, **common)
    elif system == "recognizer":
        est = Recognizer(hidden_dim=m.hidden_dim, beam_width=m.beam_width, prune=m.prune, **common)
    elif system == "wholeclip":
        est = WholeClip(hidden_dim=m.hidden_dim, embed_dim=m.embed_dim, text_layers=m.text_layers,
                        margin=l.margin, n_neg_v=l.n_neg_v, n_neg_w=l.n_neg_w, **common)
    elif system == "attnkws":
        est = AttnKWS(hidden_dim=m.hidden_dim, embed_dim=m.embed_dim, text_layers=m.text_layers,
                      n_neg=m.attn_negatives, tau=m.attn_tau, **common)
    else:
        raise ConfigError(f"unknown system {system!r}; choose from {', '.join(SYSTEMS)}")
    return est.set_params(**overrides) if overrides else est


def registry() -> dict[str, type]:
    from .baselines import AttnKWS, Recognizer, WholeClip
    from .fssnet import ExtDet, FSSNet

    return {c.system: c for c in (FSSNet, ExtDet, Recognizer, WholeClip, AttnKWS)}
