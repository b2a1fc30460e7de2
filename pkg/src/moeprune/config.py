"""Run configuration: dataclass sections loaded from an INI file.

Every field has a default; unknown sections or keys raise ``ConfigError``.
See ``configs/default.ini`` for the annotated reference file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import asdict, dataclass, field

from .artifacts import stable_hash
from .data import DatasetSpec
from .moe import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3


@dataclass
class PruneConfig:
    attribution_mode: str = "soft"
    strategy: str = "topk_layerwise"
    k: int = 2
    tau: float = 0.1
    strict: bool = False


@dataclass
class ALConfig:
    budget: int = 200
    batch_size: int = 10
    strategy: str = "entropy"
    scope: str = "retained_experts_plus_router"
    steps_per_round: int = 200
    learning_rate: float = 1e-3
    finetune_batch_size: int = 64
    recovery_target: float = 0.95


@dataclass
class PipelineConfig:
    # subtasks the adversary targets; the full model is trained on all of them
    target_subtasks: list = field(default_factory=lambda: [0, 1])
    arms: list = field(default_factory=lambda: ["none", "random", "active"])
    defense_lambda_ent: float = 1.0
    defense_prune_k: int = 4
    curve_strategy: str = "topk_layerwise"


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(cluster_separation=8.0))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    al: ALConfig = field(default_factory=ALConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the master seed applied to the dataset and model seeds."""
        cfg = dataclasses.replace(
            self,
            seed=seed,
            dataset=dataclasses.replace(self.dataset, seed=seed),
            model=dataclasses.replace(self.model, seed=seed),
        )
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def experiment_dict(self) -> dict:
        """Everything that affects results; the output directory is left out."""
        doc = self.to_dict()
        doc.pop("out_dir")
        return doc

    def config_hash(self) -> str:
        return stable_hash(self.experiment_dict())


SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "prune": PruneConfig,
    "al": ALConfig,
    "pipeline": PipelineConfig,
}
RUN_KEYS = {"seed": int, "out_dir": str}


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return [int(s) for s in items]
            return items
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    for section in parser.sections():
        items = dict(parser.items(section, raw=True))
        if section == "run":
            for key, raw in items.items():
                if key not in RUN_KEYS:
                    raise ConfigError(f"unknown key [run] {key}")
                setattr(cfg, key, _coerce(raw, RUN_KEYS[key](), f"[run] {key}"))
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(target)}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(target, key, _coerce(raw, getattr(target, key), f"[{section}] {key}"))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def validate(cfg: RunConfig) -> None:
    try:
        cfg.dataset.validate()
        cfg.model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.dataset.input_dim != cfg.model.input_dim:
        raise ConfigError("dataset.input_dim and model.input_dim differ")
    if cfg.dataset.num_classes != cfg.model.num_classes:
        raise ConfigError("dataset.num_classes and model.num_classes differ")
    if cfg.prune.attribution_mode not in ("hard", "soft"):
        raise ConfigError(f"prune.attribution_mode must be hard or soft")
    bad = [s for s in cfg.pipeline.target_subtasks if not 0 <= s < cfg.dataset.num_subtasks]
    if bad or not cfg.pipeline.target_subtasks:
        raise ConfigError(f"pipeline.target_subtasks out of range: {cfg.pipeline.target_subtasks}")
    unknown_arms = set(cfg.pipeline.arms) - {"none", "random", "active"}
    if unknown_arms:
        raise ConfigError(f"unknown pipeline arms {sorted(unknown_arms)}")
    if cfg.train.epochs < 0 or cfg.train.batch_size < 1:
        raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
