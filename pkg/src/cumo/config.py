"""JSON run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .aux_loss import AuxLossConfig
from .model import ConnectorConfig, DecoderConfig, EncoderConfig, ModelConfig
from .moe import ConfigError
from .train import STAGES, StageConfig, TextPretrainConfig
from .upcycle import UpcycleSpec


@dataclass
class DataConfig:
    n_train: int = 4000
    n_eval: int = 256
    seed: int | None = None  # defaults to the run seed

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("data.n_train and data.n_eval must be >= 1")


def default_stages() -> list[StageConfig]:
    return [StageConfig.preset(s) for s in STAGES]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: list[StageConfig] = field(default_factory=default_stages)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str | None = None
    text_pretrain: TextPretrainConfig | None = None

    def __post_init__(self):
        names = [s.stage for s in self.stages]
        if names != list(STAGES[:len(names)]):
            raise ConfigError(f"stages must follow the order {list(STAGES)}, got {names}")

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed


def _check_keys(doc, allowed, where: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    extra = set(doc) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return doc


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _build(cls, doc, where: str, nested=None):
    """Instantiate a flat dataclass from ``doc``; ``nested`` maps field name to a loader."""
    doc = dict(_check_keys(doc, _fields(cls), where))
    for name, loader in (nested or {}).items():
        if name in doc and doc[name] is not None:
            doc[name] = loader(doc[name], f"{where}.{name}")
    try:
        return cls(**doc)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _spec(doc, where):
    return _build(UpcycleSpec, doc, where)


def _aux(doc, where):
    return _build(AuxLossConfig, doc, where)


def model_from_dict(doc, where: str = "model") -> ModelConfig:
    _check_keys(doc, _fields(ModelConfig), where)
    return ModelConfig(
        encoder=_build(EncoderConfig, doc.get("encoder", {}), f"{where}.encoder", {"moe": _spec}),
        connector=_build(ConnectorConfig, doc.get("connector", {}), f"{where}.connector", {"moe": _spec}),
        decoder=_build(DecoderConfig, doc.get("decoder", {}), f"{where}.decoder", {"moe": _spec}),
    )


def stage_from_dict(doc, where: str = "stage") -> StageConfig:
    doc = dict(_check_keys(doc, _fields(StageConfig), where))
    if "stage" not in doc:
        raise ConfigError(f"{where}: missing 'stage'")
    if "aux" in doc:
        doc["aux"] = _aux(doc["aux"], f"{where}.aux")
    stage = doc.pop("stage")
    if stage not in STAGES:
        raise ConfigError(f"{where}: unknown stage {stage!r}")
    return StageConfig.preset(stage, **doc)


def run_from_dict(doc) -> RunConfig:
    _check_keys(doc, _fields(RunConfig), "config")
    kw = {}
    if "model" in doc:
        kw["model"] = model_from_dict(doc["model"])
    if "stages" in doc:
        if not isinstance(doc["stages"], list):
            raise ConfigError("config.stages: expected a list")
        kw["stages"] = [stage_from_dict(s, f"stages[{i}]") for i, s in enumerate(doc["stages"])]
    if "data" in doc:
        kw["data"] = _build(DataConfig, doc["data"], "data")
    if doc.get("text_pretrain") is not None:
        kw["text_pretrain"] = _build(TextPretrainConfig, doc["text_pretrain"], "text_pretrain", {"aux": _aux})
    for key in ("seed", "output_dir"):
        if key in doc:
            kw[key] = doc[key]
    if not isinstance(kw.get("seed", 0), int):
        raise ConfigError("config.seed must be an integer")
    return RunConfig(**kw)


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return run_from_dict(doc)


def to_jsonable(obj):
    """Dataclass tree to plain JSON types (frozensets become sorted lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (frozenset, set)):
        return sorted(obj)
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    return obj
