"""JSON configuration with a strict schema.

Every section is a frozen dataclass. Loading rejects unknown keys and
ill-typed or out-of-range values with a message naming the offending field
(``encoder.steps: expected an integer``). The file carries a ``version``
field; only :data:`CONFIG_VERSION` is accepted.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field

from ..encoder import ProgressiveSchedule
from ..errors import ConfigError, E4EError
from ..objectives import LossWeights
from ..scenes import FIELD_NAMES

CONFIG_VERSION = 1
CONFIGURATIONS = ("A", "B", "C", "D")
# Table of which editability terms each configuration trains with.
GATES = {
    "A": {"dreg": False, "disc": False},
    "B": {"dreg": True, "disc": False},
    "C": {"dreg": False, "disc": True},
    "D": {"dreg": True, "disc": True},
}


@dataclass(frozen=True)
class ModelConfig:
    z_dim: int = 32
    latent_dim: int = 64
    num_layers: int = 6
    resolution: int = 32
    gen_channels: int = 32
    mapping_layers: int = 3
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256)
    latent_disc_hidden: int = 256
    image_disc_widths: tuple[int, ...] = (32, 64, 128, 128)
    embed_dim: int = 64


@dataclass(frozen=True)
class DataConfig:
    train_size: int = 8192
    eval_size: int = 512
    seed: int = 2024


@dataclass(frozen=True)
class EmbedderConfig:
    steps: int = 1500
    batch_size: int = 128
    lr: float = 1e-3


@dataclass(frozen=True)
class GanConfig:
    steps: int = 6000
    max_steps: int = 12000
    batch_size: int = 32
    lr: float = 2e-3
    mapping_lr_mult: float = 0.1
    betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 1.0
    r1_every: int = 4
    ema_beta: float = 0.998
    fd_gate: float = 1.5
    gate_every: int = 1000
    gate_samples: int = 2048
    log_every: int = 100


@dataclass(frozen=True)
class EncoderTrainConfig:
    steps: int = 12000
    batch_size: int = 32
    lr: float = 1e-4
    disc_lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eval_every: int = 1000
    eval_samples: int = 64
    checkpoint_every: int = 2000
    log_every: int = 50


@dataclass(frozen=True)
class EditSpec:
    """Target edit ``attribute += amount``.

    ``band`` optionally restricts calibration and the equivariance set to
    scenes whose attribute lies in ``[lo, hi]``; a linear latent direction
    cannot rotate a circular attribute such as hue consistently around the
    whole circle.
    """

    attribute: str
    amount: float
    band: tuple[float, ...] = ()

    def __post_init__(self):
        if self.attribute not in FIELD_NAMES:
            raise ConfigError(f"attribute: unknown scene field {self.attribute!r}")
        if not math.isfinite(self.amount):
            raise ConfigError("amount: must be finite")
        if self.band and (len(self.band) != 2 or not self.band[0] < self.band[1]):
            raise ConfigError("band: expected [lo, hi] with lo < hi")


@dataclass(frozen=True)
class ExperimentConfig:
    configurations: tuple[str, ...] = ("A", "D")
    seeds: tuple[int, ...] = (0, 1, 2)
    metrics: tuple[str, ...] = (
        "l2", "perceptual", "variation", "roundtrip", "fd_recon", "swd_recon",
        "fd_edit", "swd_edit", "fd_edit_recon", "lec", "equivariance",
    )
    edits: tuple[EditSpec, ...] = (
        EditSpec("radius", 0.02), EditSpec("cx", 0.03), EditSpec("hue", 0.4, (0.5 * math.pi, 1.5 * math.pi)),
    )
    equivariance_attribute: str = "hue"
    calibration_samples: int = 2000
    roundtrip_samples: int = 512
    n_proj: int = 128
    t_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    version: int = CONFIG_VERSION
    configuration: str = "D"
    seed: int = 0
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: ProgressiveSchedule = field(default_factory=ProgressiveSchedule)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    encoder: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {self.version!r}")
        if self.configuration not in CONFIGURATIONS:
            raise ConfigError(f"configuration: must be one of {CONFIGURATIONS}, got {self.configuration!r}")
        for c in self.experiment.configurations:
            if c not in CONFIGURATIONS:
                raise ConfigError(f"experiment.configurations: unknown configuration {c!r}")

    @property
    def gates(self) -> dict[str, bool]:
        return GATES[self.configuration]

    def with_overrides(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self, exclude: tuple[str, ...] = ()) -> str:
        d = self.to_dict()
        for key in exclude:
            d.pop(key, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for name in known:
        if name in data:
            where = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(hints[name], data[name], where)
    try:
        return cls(**kwargs)
    except (E4EError, TypeError, ValueError) as exc:
        raise ConfigError(_qualify(str(exc), path, known)) from exc


def _qualify(msg: str, path: str, fields) -> str:
    """Prefix a dataclass validation message with the dotted path of the offending field."""
    prefix = path + "." if path else ""
    for sep in (":", " "):
        head, _, rest = msg.partition(sep)
        if head in fields and rest:
            return f"{prefix}{head}: {rest.strip()}"
    return f"{path or 'config'}: {msg}"


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _check_ranges(cfg: TrainConfig) -> None:
    positive = {
        "model.z_dim": cfg.model.z_dim, "model.latent_dim": cfg.model.latent_dim,
        "model.num_layers": cfg.model.num_layers, "model.resolution": cfg.model.resolution,
        "data.train_size": cfg.data.train_size, "data.eval_size": cfg.data.eval_size,
        "embedder.steps": cfg.embedder.steps, "embedder.batch_size": cfg.embedder.batch_size,
        "gan.batch_size": cfg.gan.batch_size, "gan.r1_every": cfg.gan.r1_every,
        "gan.gate_every": cfg.gan.gate_every, "encoder.batch_size": cfg.encoder.batch_size,
        "encoder.eval_every": cfg.encoder.eval_every, "encoder.checkpoint_every": cfg.encoder.checkpoint_every,
    }
    for name, value in positive.items():
        if value < 1:
            raise ConfigError(f"{name}: must be >= 1, got {value}")
    for name, value in {"encoder.steps": cfg.encoder.steps, "gan.steps": cfg.gan.steps}.items():
        if value < 0:
            raise ConfigError(f"{name}: must be >= 0, got {value}")
    if cfg.gan.max_steps < cfg.gan.steps:
        raise ConfigError("gan.max_steps: must be >= gan.steps")
    for name, value in {"encoder.lr": cfg.encoder.lr, "encoder.disc_lr": cfg.encoder.disc_lr,
                        "gan.lr": cfg.gan.lr, "embedder.lr": cfg.embedder.lr}.items():
        if not value > 0:
            raise ConfigError(f"{name}: must be > 0, got {value}")
    if not cfg.gan.fd_gate > 0:
        raise ConfigError(f"gan.fd_gate: must be > 0, got {cfg.gan.fd_gate}")
    if not 0.0 <= cfg.gan.ema_beta < 1.0:
        raise ConfigError(f"gan.ema_beta: must be in [0, 1), got {cfg.gan.ema_beta}")


def config_from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    if "version" not in data:
        raise ConfigError("version: required field missing")
    cfg = _build(TrainConfig, data, "")
    _check_ranges(cfg)
    return cfg


def load_config(path: str) -> TrainConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(cfg.to_json())
