"""
Run configuration: documented defaults, JSON config files and flag overrides.

Precedence is flags > file > defaults. A config file is a JSON object with up
to four sections (``encoder``, ``train``, ``loss``, ``benchmark``); every key
and type is checked, and problems raise ``ConfigError`` naming the offending
key as ``section.key``.
"""
import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from utils.data_synth import BenchmarkSpec
from utils.encoders import CLASS_PLACEHOLDER, DEFAULT_TEMPLATES, EncoderConfig
from utils.errors import ConfigError
from utils.objectives import LossWeights

logger = logging.getLogger(__name__)

VARIANTS = ("stage1-only", "stage2-only", "joint", "two-stage")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    eps: float = 1e-8
    warmup_epochs: int = 2
    warmup_floor_lr: float = 2e-5
    epochs_stage1: int = 5
    epochs_stage2: int = 5
    batch_size: int = 32
    seed: int = 0
    backbone_seed: int = 0
    pool_size: int = 16
    k: int = 4
    tau_pool: float = 0.07
    variant: str = "two-stage"
    verb_template: str = DEFAULT_TEMPLATES["verb"]
    noun_template: str = DEFAULT_TEMPLATES["noun"]

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be positive")
        if not 0 <= self.warmup_floor_lr <= self.lr:
            raise ConfigError("train.warmup_floor_lr", "must lie in [0, lr]")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(f"train.{key}", "must lie in [0, 1)")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ConfigError("train.weight_decay" if self.weight_decay < 0 else "train.eps", "out of range")
        for key in ("epochs_stage1", "epochs_stage2", "warmup_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"train.{key}", "must be >= 0")
        for key in ("epochs_stage1", "epochs_stage2"):
            epochs = getattr(self, key)
            if epochs > 0 and self.warmup_epochs >= epochs:
                raise ConfigError("train.warmup_epochs",
                                  f"warmup_epochs={self.warmup_epochs} must be below {key}={epochs}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.pool_size < 1:
            raise ConfigError("train.pool_size", "must be >= 1")
        if not 1 <= self.k <= self.pool_size:
            raise ConfigError("train.k", f"k={self.k} must lie in [1, pool_size={self.pool_size}]")
        if not self.tau_pool > 0:
            raise ConfigError("train.tau_pool", "must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError("train.variant", f"expected one of {VARIANTS}, got {self.variant!r}")
        for key in ("verb_template", "noun_template"):
            if CLASS_PLACEHOLDER not in getattr(self, key):
                raise ConfigError(f"train.{key}", f"template must contain {CLASS_PLACEHOLDER}")
        return self

    def template(self, component: str) -> str:
        return self.verb_template if component == "verb" else self.noun_template


SECTIONS = {
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "benchmark": BenchmarkSpec,
}


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)

    def validate(self) -> "RunConfig":
        self.encoder.validate()
        self.train.validate()
        self.loss.validate(pool_size=self.train.pool_size)
        self.benchmark.validate()
        for enc_key, bench_key in (("frames", "frames"), ("patches", "patches"), ("width", "width")):
            if getattr(self.encoder, enc_key) != getattr(self.benchmark, bench_key):
                raise ConfigError(
                    f"benchmark.{bench_key}",
                    f"{getattr(self.benchmark, bench_key)} does not match encoder.{enc_key}={getattr(self.encoder, enc_key)}",
                )
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return parse_config_dict(data)

    def with_updates(self, updates: Mapping[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides (``{"train.k": 2}``), validated."""
        sections = {name: getattr(self, name) for name in SECTIONS}
        grouped: Dict[str, Dict[str, Any]] = {}
        for dotted, value in updates.items():
            section, key = _split_key(dotted)
            grouped.setdefault(section, {})[key] = _coerce(dotted, value, _field_types(SECTIONS[section])[key])
        for section, values in grouped.items():
            sections[section] = dataclasses.replace(sections[section], **values)
        return RunConfig(**sections).validate()


def _field_types(cls) -> Dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _split_key(dotted: str):
    section, _, key = dotted.partition(".")
    if section not in SECTIONS:
        raise ConfigError(dotted, f"unknown section {section!r}")
    if key not in _field_types(SECTIONS[section]):
        raise ConfigError(dotted, "unknown key")
    return section, key


def _coerce(key: str, value: Any, annotation: Any) -> Any:
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {type(value).__name__}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {type(value).__name__}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {type(value).__name__}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {type(value).__name__}")
        return value
    # Optional matrix (benchmark.compat)
    if value is not None and not (isinstance(value, list) and all(isinstance(row, list) for row in value)):
        raise ConfigError(key, "expected null or a list of lists")
    return value


def parse_config_dict(data: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "config must be a JSON object")
    explicit = set()
    sections: Dict[str, Any] = {}
    for section, cls in SECTIONS.items():
        values = data.get(section, {})
        if not isinstance(values, Mapping):
            raise ConfigError(section, "section must be a JSON object")
        types = _field_types(cls)
        kwargs = {}
        for key, value in values.items():
            dotted = f"{section}.{key}"
            if key not in types:
                raise ConfigError(dotted, "unknown key")
            kwargs[key] = _coerce(dotted, value, types[key])
            explicit.add(dotted)
        sections[section] = kwargs
    for section in data:
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")

    for dotted, value in (overrides or {}).items():
        section, key = _split_key(dotted)
        sections[section][key] = _coerce(dotted, value, _field_types(SECTIONS[section])[key])
        explicit.add(dotted)

    if "loss.k_freq" not in explicit and "train.k" in explicit:
        sections["loss"]["k_freq"] = sections["train"]["k"]
    config = RunConfig(**{name: SECTIONS[name](**kwargs) for name, kwargs in sections.items()})
    return config.validate()


def parse_config(path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve defaults, an optional JSON file and dotted-key flag overrides.

    File values override the defaults and ``overrides`` (``{"train.k": 2}``)
    override both. The merged result is validated as a whole, so a
    cross-field error names the key that broke it.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(str(path), "config file not found") from exc
        except ValueError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    config = parse_config_dict(data, overrides)
    logger.debug("config resolved from %s with %d overrides", path or "defaults", len(overrides or {}))
    return config
