"""Experiment configuration: JSON file, validated against a schema before any run."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import jsonschema

from .trainer import TaskSpec, TrainConfig

ENV_OUT = "MOR_KIT_OUT"
ENV_SEED = "MOR_KIT_SEED"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the first offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    dims: list[int] = field(default_factory=lambda: [16, 16])
    n_experts: int = 8
    n_routers: int = 2
    k_experts: int = 2
    k_routers: int | None = None
    rank: int = 8
    alpha: float = 16.0
    mode: str = "mor"
    temperature: float = 1.0
    base_from_task: bool = True


@dataclass
class SweepConfig:
    routers: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    epochs: list[int] = field(default_factory=list)


@dataclass
class BenchConfig:
    n_tokens: int = 2048
    warmup: int = 3
    repeats: int = 30


@dataclass
class FaultConfig:
    sigmas: list[float] = field(default_factory=lambda: [0.5, 1.0])
    mode: str = "logit_noise"
    target_router: int = 0
    n_inputs: int = 10000
    n_seeds: int = 20
    train_first: bool = False


@dataclass
class OutputConfig:
    directory: str = "runs/default"
    formats: list[str] = field(default_factory=lambda: ["json", "csv"])


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    fault: FaultConfig = field(default_factory=FaultConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mor-kit experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": _section({
            "dims": {"type": "array", "items": _INT, "minItems": 2},
            "n_experts": _INT,
            "n_routers": _INT,
            "k_experts": _INT,
            "k_routers": {"anyOf": [_INT, {"type": "null"}]},
            "rank": _INT,
            "alpha": _POS,
            "mode": {"enum": ["single", "mor"]},
            "temperature": _POS,
            "base_from_task": {"type": "boolean"},
        }),
        "train": _section({
            "epochs": {"type": "integer", "minimum": 0},
            "batch_size": _INT,
            "lr": _NONNEG,
            "optimizer": {"enum": ["sgd", "adam"]},
            "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "eps": _POS,
            "weight_decay": _NONNEG,
            "lambda_expert": _NONNEG,
            "lambda_router": _NONNEG,
            "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        }),
        "task": _section({
            "n_clusters": _INT,
            "center_scale": _NONNEG,
            "offset_scale": _NONNEG,
            "delta_rank": _INT,
            "delta_scale": _NONNEG,
            "shared_scale": _NONNEG,
            "noise_sigma": _NONNEG,
            "n_samples": _INT,
        }),
        "sweep": _section({
            "routers": {"type": "array", "items": _INT, "minItems": 1},
            "epochs": {"type": "array", "items": _INT},
        }),
        "bench": _section({"n_tokens": _INT, "warmup": _INT, "repeats": _INT}),
        "fault": _section({
            "sigmas": {"type": "array", "items": _NONNEG, "minItems": 1},
            "mode": {"enum": ["logit_noise", "weight_zero"]},
            "target_router": {"type": "integer", "minimum": 0},
            "n_inputs": _INT,
            "n_seeds": _INT,
            "train_first": {"type": "boolean"},
        }),
        "output": _section({
            "directory": {"type": "string"},
            "formats": {"type": "array", "items": {"enum": ["json", "csv"]}},
        }),
    },
}

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "task": TaskSpec, "sweep": SweepConfig,
             "bench": BenchConfig, "fault": FaultConfig, "output": OutputConfig}


def _error_key(err: jsonschema.ValidationError) -> str:
    path = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = set(err.instance) - set(err.schema.get("properties", {}))
        path.append(sorted(extra)[0])
    return ".".join(path) or "<root>"


def parse_config(data: dict) -> ExperimentConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise ConfigError(_error_key(err), err.message)
    cfg = ExperimentConfig(**{name: cls(**data.get(name, {})) for name, cls in _SECTIONS.items()})
    _check_cross_fields(cfg)
    return cfg


def _check_cross_fields(cfg: ExperimentConfig) -> None:
    m = cfg.model
    if m.k_experts > m.n_experts:
        raise ConfigError("model.k_experts", f"{m.k_experts} exceeds n_experts {m.n_experts}")
    if m.k_routers is not None and m.k_routers > m.n_routers:
        raise ConfigError("model.k_routers", f"{m.k_routers} exceeds n_routers {m.n_routers}")
    if m.mode == "single" and m.n_routers != 1:
        raise ConfigError("model.n_routers", "single mode uses exactly one router")
    if m.rank > min(m.dims):
        raise ConfigError("model.rank", f"{m.rank} exceeds the smallest layer width {min(m.dims)}")
    if cfg.fault.target_router >= max(m.n_routers, 1) and m.mode == "mor":
        raise ConfigError("fault.target_router", f"{cfg.fault.target_router} out of range")


def load_config(path, environ=None) -> ExperimentConfig:
    """Read, validate and apply environment overrides (output directory, seed)."""
    environ = os.environ if environ is None else environ
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON at offset {e.pos}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = parse_config(data)
    if environ.get(ENV_OUT):
        cfg.output.directory = environ[ENV_OUT]
    if environ.get(ENV_SEED):
        try:
            cfg.train.seed = int(environ[ENV_SEED])
        except ValueError as e:
            raise ConfigError(ENV_SEED, f"not an integer: {environ[ENV_SEED]!r}") from e
    return cfg


