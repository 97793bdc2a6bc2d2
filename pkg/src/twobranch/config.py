"""YAML run configuration with task-dependent defaults.

Sections: ``model``, ``loss``, ``sampling``, ``train``, ``eval``. Unknown
keys are rejected. Values left unset take the default for the task kind
(localization or retrieval) and network kind; see ``resolve``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from importlib import resources

import yaml

from .branches import ModelDims
from .geometry import RegionLabeling
from .losses import LossWeights
from .optim import ConfigError, SamplingOptions, TrainSchedule


@dataclass
class ModelConfig:
    network: str = "embedding"
    image_hidden: int = 1024
    text_hidden: int = 1024
    embed: int = 512
    head_hidden: list = field(default_factory=lambda: [512, 256])
    nonlinear: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    init_seed: int | None = None


@dataclass
class LossConfig:
    margin: float = 0.05
    lambdas: list | None = None
    lambdas_after: list | None = None


@dataclass
class SamplingConfig:
    batch_pairs: int | None = None
    k: int | None = None
    augment: bool = True
    neighborhood: bool | None = None
    positive_threshold: float = 0.7
    negative_threshold: float = 0.3
    eval_threshold: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 10
    activation_epoch: int | None = 8
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float | None = None
    grad_clip: float | None = None
    seed: int = 0


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [1, 5, 10])
    alpha: float = 0.3
    max_proposals: int = 200


@dataclass
class RunConfig:
    task: str = "localization"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """sha256 of the canonical JSON form of the resolved config."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "sampling": SamplingConfig,
             "train": TrainConfig, "eval": EvalConfig}

# Task defaults. Localization: lr 1e-3, shards of 100 pairs, K=30, no dropout,
# lambdas (1, 4) then (1, 4, 0.1, 0.1). Retrieval: lr 1e-4, shards of 500,
# K=10, dropout 0.5, lambdas (1, 1.5) then (1, 1.5, 0, 0.05).
TASK_DEFAULTS = {
    "localization": dict(lr=1e-3, batch_pairs=100, k=30, dropout=0.0,
                         lambdas=[1.0, 4.0, 0.0, 0.0], lambdas_after=[1.0, 4.0, 0.1, 0.1]),
    "retrieval": dict(lr=1e-4, batch_pairs=500, k=10, dropout=0.5,
                      lambdas=[1.0, 1.5, 0.0, 0.0], lambdas_after=[1.0, 1.5, 0.0, 0.05]),
}


def _section(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"config section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    for f in fields(cls):
        if f.name in data:
            _check_type(f, data[f.name], f"{where}.{f.name}")
    return cls(**data)


def _check_type(f, value, where: str) -> None:
    default = f.default if f.default_factory is MISSING else f.default_factory()
    if value is None or default is None:
        if isinstance(value, (str, dict)):
            raise ConfigError(f"{where}: expected a number, list or null, got {value!r}")
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def from_dict(data: dict | None) -> RunConfig:
    """Parse a (possibly partial) config mapping; unresolved values stay ``None``."""
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - {"task"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    cfg = RunConfig(task=data.get("task", "localization"),
                    **{name: _section(cls, data.get(name), name) for name, cls in _SECTIONS.items()})
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return from_dict(data)


def load_preset(name: str) -> RunConfig:
    """Bundled config (e.g. ``desk-retrieval``) tuned for the synthetic datasets."""
    try:
        text = resources.files("twobranch").joinpath("presets", f"{name}.yaml").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return from_dict(yaml.safe_load(text))


def _weights(margin: float, lams, what: str) -> LossWeights:
    if lams is None:
        return None
    if len(lams) != 4:
        raise ConfigError(f"{what} needs four values (x2y, y2x, xx, yy), got {lams}")
    try:
        return LossWeights(margin, *map(float, lams))
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def resolve(cfg: RunConfig, task: str | None = None, network: str | None = None) -> RunConfig:
    """Fill task- and network-dependent defaults; returns a new config.

    The similarity network has no neighborhood terms: unless set explicitly,
    its ``lambdas_after`` and neighborhood sampling stay off, and setting
    them is a configuration error.
    """
    task = task or cfg.task
    if task not in TASK_DEFAULTS:
        raise ConfigError(f"unknown task kind {task!r}")
    network = network or cfg.model.network
    if network not in ("embedding", "similarity"):
        raise ConfigError(f"unknown network kind {network!r}")
    d = TASK_DEFAULTS[task]
    similarity = network == "similarity"
    loss = replace(cfg.loss,
                   lambdas=cfg.loss.lambdas if cfg.loss.lambdas is not None else d["lambdas"],
                   lambdas_after=(cfg.loss.lambdas_after if cfg.loss.lambdas_after is not None
                                  else (None if similarity else d["lambdas_after"])))
    neighborhood = cfg.sampling.neighborhood
    if neighborhood is None:
        neighborhood = not similarity
    sampling = replace(cfg.sampling,
                       batch_pairs=cfg.sampling.batch_pairs or d["batch_pairs"],
                       k=cfg.sampling.k or d["k"], neighborhood=neighborhood)
    train = replace(cfg.train,
                    lr=cfg.train.lr if cfg.train.lr is not None else d["lr"],
                    dropout=cfg.train.dropout if cfg.train.dropout is not None else d["dropout"])
    out = replace(cfg, task=task, model=replace(cfg.model, network=network), loss=loss,
                  sampling=sampling, train=train)
    schedule(out)  # validates
    return out


def model_dims(cfg: RunConfig, image_in: int, text_in: int) -> ModelDims:
    m = cfg.model
    try:
        return ModelDims(image_in, text_in, m.image_hidden, m.text_hidden, m.embed,
                         tuple(m.head_hidden), m.nonlinear)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def labeling(cfg: RunConfig) -> RegionLabeling:
    s = cfg.sampling
    try:
        return RegionLabeling(s.positive_threshold, s.negative_threshold, s.eval_threshold)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def sampling_options(cfg: RunConfig) -> SamplingOptions:
    s = cfg.sampling
    if s.batch_pairs is None or s.batch_pairs < 1 or s.k is None or s.k < 1:
        raise ConfigError("batch_pairs and k must be positive integers")
    return SamplingOptions(batch_pairs=int(s.batch_pairs), k=int(s.k), augment=bool(s.augment),
                           neighborhood=bool(s.neighborhood), labeling=labeling(cfg))


def schedule(cfg: RunConfig) -> TrainSchedule:
    t, loss = cfg.train, cfg.loss
    before = _weights(loss.margin, loss.lambdas, "loss.lambdas")
    after = _weights(loss.margin, loss.lambdas_after, "loss.lambdas_after")
    if cfg.model.network == "similarity":
        for w in (before, after):
            if w is not None and w.uses_neighborhood:
                raise ConfigError("neighborhood terms (lambda3/lambda4) are undefined for the similarity network")
        if cfg.sampling.neighborhood:
            raise ConfigError("neighborhood sampling only applies to the embedding network")
    if cfg.task == "retrieval" and any(w is not None and w.l3 > 0 for w in (before, after)):
        raise ConfigError("image-image constraints (lambda3) cannot be applied to image-sentence data")
    activation = t.activation_epoch if after is not None else None
    return TrainSchedule(total_epochs=t.epochs, activation_epoch=activation,
                         weights_before=before, weights_after=after, seed=t.seed,
                         dropout=t.dropout, lr=t.lr, beta1=t.beta1, beta2=t.beta2,
                         adam_eps=t.adam_eps, grad_clip=t.grad_clip)
