"""Model and run configuration, loaded from YAML."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .layers import ConvSpec

MODES = ("full", "codecnet_only", "skip_only", "residual_skip")

# lambda values addressable from the bitstream header; index 255 means "unlisted"
LAMBDA_TABLE = (0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28)
UNLISTED_LAMBDA = 255


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def lambda_index(lam: float) -> int:
    for i, v in enumerate(LAMBDA_TABLE):
        if abs(v - lam) <= 1e-9 * max(1.0, v):
            return i
    return UNLISTED_LAMBDA


def _conv(f, k, s=1, act="none"):
    return ConvSpec(f, k, s, nonlinearity=act)


def _tconv(f, k, s=2, act="none"):
    return ConvSpec(f, k, s, transposed=True, nonlinearity=act)


def default_layers(f: int, n: int) -> dict[str, list[ConvSpec]]:
    """Per-subnetwork layer lists for internal width ``f`` and latent width ``n``."""
    lrelu = "LeakyReLU"
    hyper_analysis = [_conv(f, 3, 1, lrelu), _conv(f, 5, 2, lrelu), _conv(f, 5, 2)]
    hyper_synthesis = [_tconv(f, 5, 2, lrelu), _tconv(f, 5, 2, lrelu), _conv(2 * n, 3, 1)]
    context = [ConvSpec(2 * n, 5, 1, masked=True)]
    entropy_params = [_conv(2 * n, 1, 1, lrelu), _conv(2 * n, 1, 1, lrelu), _conv(2 * n, 1, 1)]
    return {
        # MOFNet: everything LeakyReLU, 3 outputs = 2 flow + 1 raw alpha
        "mof_analysis": [_conv(f, 5, 2, lrelu), _conv(f, 5, 2, lrelu), _conv(f, 5, 2, lrelu), _conv(n, 5, 2)],
        "mof_synthesis": [_tconv(f, 5, 2, lrelu), _tconv(f, 5, 2, lrelu), _tconv(f, 5, 2, lrelu), _tconv(3, 5, 2)],
        "mof_hyper_analysis": hyper_analysis,
        "mof_hyper_synthesis": hyper_synthesis,
        # CodecNet: GDN main transforms; first stage split per input, merged by concatenation
        "codec_stage1_current": [_conv(f, 5, 2, "GDN")],
        "codec_stage1_prediction": [_conv(f, 5, 2, "GDN")],
        "codec_analysis_tail": [_conv(f, 5, 2, "GDN"), _conv(f, 5, 2, "GDN"), _conv(n, 5, 2)],
        "codec_prediction_analysis": [_conv(f, 5, 2, "GDN"), _conv(f, 5, 2, "GDN"), _conv(f, 5, 2, "GDN"), _conv(n, 5, 2)],
        "codec_synthesis": [_tconv(f, 5, 2, "IGDN"), _tconv(f, 5, 2, "IGDN"), _tconv(f, 5, 2, "IGDN"), _tconv(3, 5, 2)],
        "codec_hyper_analysis": hyper_analysis,
        "codec_hyper_synthesis": hyper_synthesis,
        "codec_context": context,
        "codec_entropy_params": entropy_params,
        # residual codec used by the residual_skip ablation
        "residual_analysis": [_conv(f, 5, 2, "GDN"), _conv(f, 5, 2, "GDN"), _conv(f, 5, 2, "GDN"), _conv(n, 5, 2)],
        "residual_synthesis": [_tconv(f, 5, 2, "IGDN"), _tconv(f, 5, 2, "IGDN"), _tconv(f, 5, 2, "IGDN"), _tconv(3, 5, 2)],
        "residual_hyper_analysis": hyper_analysis,
        "residual_hyper_synthesis": hyper_synthesis,
        "residual_context": context,
        "residual_entropy_params": entropy_params,
    }


@dataclass
class ModelConfig:
    internal_features: int = 64
    latent_features: int = 96
    mode: str = "full"
    lam: float = 0.04
    layers: dict[str, list[ConvSpec]] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.layers is None:
            self.layers = default_layers(self.internal_features, self.latent_features)
        else:
            base = default_layers(self.internal_features, self.latent_features)
            for name, specs in self.layers.items():
                if name not in base:
                    raise ConfigError(f"unknown subnetwork {name!r}")
                base[name] = [s if isinstance(s, ConvSpec) else ConvSpec.from_dict(s) for s in specs]
            self.layers = base

    @property
    def residual(self) -> bool:
        return self.mode == "residual_skip"

    @classmethod
    def desk_scale(cls, **kw) -> "ModelConfig":
        kw.setdefault("internal_features", 32)
        kw.setdefault("latent_features", 48)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "internal_features": self.internal_features,
            "latent_features": self.latent_features,
            "mode": self.mode,
            "lam": self.lam,
            "layers": {k: [s.to_dict() for s in v] for k, v in self.layers.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


# 64x64 desk setup: 12 epochs over ~500 pairs only converge with many small,
# fast steps, so the batch is 1 and the rates are 5x the full-scale ones
DESK_SCHEDULE = dict(phase1_epochs=2, phase2_epochs=6, phase3_epochs=4, batch_size=1, crop=64,
                     lr_initial=5e-4, lr_final=2e-5)


@dataclass
class TrainSchedule:
    phase1_epochs: int = 5
    phase2_epochs: int = 45
    phase3_epochs: int = 20
    lr_initial: float = 1e-4
    lr_final: float = 4e-6
    # MOFNet's optimizer runs at this multiple of the scheduled rate
    mofnet_lr_scale: float = 1.0
    lam: float = 0.04
    batch_size: int = 8
    crop: int = 256
    desk_scale: bool = False

    def __post_init__(self):
        if min(self.phase1_epochs, self.phase2_epochs, self.phase3_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.lr_final > self.lr_initial:
            raise ConfigError("lr_final must not exceed lr_initial")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mofnet_lr_scale <= 0:
            raise ConfigError("mofnet_lr_scale must be positive")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs + self.phase3_epochs

    @classmethod
    def desk(cls, **kw) -> "TrainSchedule":
        base = dict(DESK_SCHEDULE, desk_scale=True)
        base.update(kw)
        return cls(**base)


@dataclass
class DataConfig:
    kind: str = "synthetic"  # "synthetic" or "frames"
    root: str | None = None
    count: int = 500
    size: int = 64
    max_shift: float = 3.0
    validation_count: int = 32


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output: str = "runs"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "data": asdict(self.data),
            "seed": self.seed,
            "output": self.output,
        }


def _build(cls, d: dict | None, what: str):
    d = d or {}
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown {what} keys: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    extra = set(doc) - {"model", "schedule", "data", "seed", "output"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    schedule_doc = dict(doc.get("schedule") or {})
    desk = bool(schedule_doc.get("desk_scale", False))
    model_doc = dict(doc.get("model") or {})
    if desk:
        model_doc.setdefault("internal_features", 32)
        model_doc.setdefault("latent_features", 48)
        for key, value in DESK_SCHEDULE.items():
            schedule_doc.setdefault(key, value)
    model = _build(ModelConfig, model_doc, "model")
    schedule = _build(TrainSchedule, schedule_doc, "schedule")
    if "lam" not in schedule_doc:
        schedule.lam = model.lam
    model.lam = schedule.lam
    data = _build(DataConfig, doc.get("data"), "data")
    if data.kind not in ("synthetic", "frames"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'frames', got {data.kind!r}")
    return RunConfig(model=model, schedule=schedule, data=data,
                     seed=int(doc.get("seed", 0)), output=str(doc.get("output", "runs")))


def load_run_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return run_config_from_dict(doc or {})
