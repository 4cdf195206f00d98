"""Configuration records and their canonical serialization.

Configs serialize to JSON with sorted keys and fixed separators so that the
SHA-256 of the text is a stable identity for a run. Infinity (used for the
unconstrained Gaussian block) is written as the string ``"inf"``.
"""
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

DEFAULT_SIGMAS = (0.1, 0.5, 1.0, 3.0, 5.0, 8.0, 10.0, math.inf)
AGGREGATIONS = ("tcm", "avg", "weighted", "dynamic")
CONSTRAINT_KINDS = ("gaussian", "boxcar", "bartlett")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    d_in_video: int = 32
    d_in_text: int = 32
    max_frames: int = 32
    n_clips: int = 8
    max_words: int = 8
    heads: int = 4
    ffn_mult: int = 2
    sigmas: tuple = DEFAULT_SIGMAS
    kind: str = "gaussian"
    aggregation: str = "tcm"
    tau: float = 0.6
    alpha_frame: float = 0.3
    alpha_clip: float = 0.7
    frame_branch: bool = True
    clip_branch: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}")
        if not self.sigmas or any(not s > 0 for s in self.sigmas):
            raise ConfigError("sigma list must be nonempty and positive")
        if self.kind not in CONSTRAINT_KINDS:
            raise ConfigError(f"unknown constraint kind {self.kind!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.n_clips < 1 or self.max_frames < 1 or self.max_words < 1:
            raise ConfigError("branch lengths must be positive")
        if not (0 <= self.alpha_frame <= 1 and 0 <= self.alpha_clip <= 1):
            raise ConfigError("interpolation weights must lie in [0, 1]")
        if not math.isclose(self.alpha_frame + self.alpha_clip, 1.0, abs_tol=1e-12):
            raise ConfigError("interpolation weights must sum to 1")
        if not (self.frame_branch or self.clip_branch):
            raise ConfigError("at least one video branch must be enabled")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    gamma: float = 1.0
    alpha: float = 32.0
    delta: float = 0.2
    lambda_clip_nce: float = 2e-2
    lambda_frame_nce: float = 4e-2
    lambda_div: float = 3e-3
    lambda_om: float = 1.1e-1
    nce_temperature: float = 0.07

    def __post_init__(self):
        if not (self.gamma > 0 and self.alpha > 0 and self.delta > 0):
            raise ConfigError("gamma, alpha and delta must be positive")
        if self.margin < 0:
            raise ConfigError("margin must be nonnegative")
        for name in ("lambda_clip_nce", "lambda_frame_nce", "lambda_div", "lambda_om"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not self.nce_temperature > 0:
            raise ConfigError("InfoNCE temperature must be positive")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    plateau_patience: int = 3
    lr_factor: float = 0.5
    lr_floor: float = 1e-6
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")


def _encode(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, (list, tuple)):
        return [_encode(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    return obj


def _decode_float(x):
    if x == "inf":
        return math.inf
    if x == "-inf":
        return -math.inf
    return x


def to_dict(cfg) -> dict:
    return _encode(dataclasses.asdict(cfg))


def canonical_json(obj) -> str:
    if dataclasses.is_dataclass(obj):
        obj = to_dict(obj)
    return json.dumps(_encode(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _build(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def model_config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    if "sigmas" in data:
        data["sigmas"] = tuple(_decode_float(s) for s in data["sigmas"])
    return _build(ModelConfig, data)


def train_config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    if "model" in data:
        data["model"] = model_config_from_dict(data["model"])
    if "loss" in data:
        data["loss"] = _build(LossConfig, data["loss"])
    return _build(TrainConfig, data)


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict merge; ``overrides`` wins."""
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out
