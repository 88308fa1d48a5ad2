"""Dataclass configs for every stage, plus TOML load/validate/dump.

One TOML file drives the whole pipeline; `load_config` rejects unknown
keys with their full path, and `dumps_config` round-trips exactly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

import tomli

from .errors import ConfigurationError, ValidationError


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 20
    utt_seconds: tuple = (3.0, 5.0)
    sample_rate: int = 16000
    n_noise: int = 4
    n_music: int = 3
    n_babble: int = 3
    n_rir: int = 4
    bank_seconds: float = 5.0

    def validate(self):
        if self.n_speakers < 2:
            raise ConfigurationError("corpus.n_speakers must be >= 2")
        if self.utts_per_speaker < 1:
            raise ConfigurationError("corpus.utts_per_speaker must be >= 1")
        lo, hi = self.utt_seconds
        if lo < 1.0:
            raise ConfigurationError("corpus.utt_seconds minimum must be >= 1.0 s")
        if hi < lo:
            raise ConfigurationError("corpus.utt_seconds range must be nondecreasing")
        if self.sample_rate <= 0:
            raise ConfigurationError("corpus.sample_rate must be positive")
        for name in ("n_noise", "n_music", "n_babble", "n_rir"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"corpus.{name} must be >= 0")


@dataclass(frozen=True)
class TrialConfig:
    n_target: int = 500
    n_nontarget: int = 500

    def validate(self):
        if self.n_target < 1 or self.n_nontarget < 1:
            raise ConfigurationError("trials counts must be >= 1")


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    norm_window_ms: float = 150.0
    fmin: float = 20.0
    fmax: float = 0.0  # 0 means Nyquist
    log_floor: float = 1e-10

    def validate(self, sample_rate: int | None = None):
        if not self.win_ms > self.hop_ms > 0:
            raise ConfigurationError("features require win_ms > hop_ms > 0")
        if self.n_mels < 1:
            raise ConfigurationError("features.n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ConfigurationError("features.log_floor must be > 0")
        if self.norm_window_ms <= 0:
            raise ConfigurationError("features.norm_window_ms must be > 0")
        if sample_rate is not None:
            fmax = self.fmax or sample_rate / 2
            if fmax > sample_rate / 2:
                raise ConfigurationError("features.fmax must be <= sample_rate/2")
            if not 0 <= self.fmin < fmax:
                raise ConfigurationError("features require 0 <= fmin < fmax")


@dataclass(frozen=True)
class CropConfig:
    n_global: int = 2
    n_local: int = 4
    global_seconds: float = 3.0
    local_seconds: float = 2.0

    def validate(self):
        if self.n_global < 2:
            raise ConfigurationError("crop.n_global must be >= 2")
        if self.n_local < 0:
            raise ConfigurationError("crop.n_local must be >= 0")
        if not self.global_seconds > self.local_seconds > 0:
            raise ConfigurationError("crop requires global_seconds > local_seconds > 0")


@dataclass(frozen=True)
class AugmentConfig:
    p_noise: float = 0.5
    snr_db: tuple = (0.0, 15.0)
    p_rir: float = 0.25

    def validate(self):
        for name in ("p_noise", "p_rir"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"augment.{name} must lie in [0, 1]")
        if self.snr_db[1] < self.snr_db[0]:
            raise ConfigurationError("augment.snr_db range must be nondecreasing")


@dataclass(frozen=True)
class NetworkConfig:
    trunk_channels: tuple = (48, 48)
    embed_dim: int = 256
    frame_kernel: int = 3

    def validate(self):
        if len(self.trunk_channels) == 0:
            raise ConfigurationError("network.trunk_channels must be nonempty")
        if self.embed_dim < 2:
            raise ConfigurationError("network.embed_dim must be >= 2")
        if self.frame_kernel < 1 or self.frame_kernel % 2 == 0:
            raise ConfigurationError("network.frame_kernel must be a positive odd count")


@dataclass(frozen=True)
class ProjectionConfig:
    hidden_dim: int = 128
    bottleneck_dim: int = 64
    k: int = 256

    def validate(self):
        if self.k < 2:
            raise ConfigurationError("projection.k must be >= 2")
        if not self.hidden_dim >= self.bottleneck_dim >= 1:
            raise ConfigurationError("projection requires hidden_dim >= bottleneck_dim >= 1")


@dataclass(frozen=True)
class DinoConfig:
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    center_momentum: float = 0.9
    ema_lambda: float = 0.996
    epochs: int = 10
    batch_size: int = 16
    lr: float = 2e-3
    lr_warmup_epochs: int = 1
    lr_min_ratio: float = 0.1
    seed: int = 0
    crop: CropConfig = field(default_factory=CropConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.tau_student <= 0 or self.tau_teacher <= 0:
            raise ConfigurationError("dino temperatures must be positive")
        if not self.tau_teacher < self.tau_student:
            raise ConfigurationError("dino.tau_teacher must be < tau_student (sharpening)")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ConfigurationError("dino.center_momentum must lie in [0, 1]")
        if not 0.0 <= self.ema_lambda <= 1.0:
            raise ConfigurationError("dino.ema_lambda must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("dino.epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("dino.lr must be positive")
        self.crop.validate()
        self.augment.validate()


@dataclass(frozen=True)
class AamConfig:
    n_classes: int = 0  # 0 means infer from the label set
    scale: float = 30.0
    margin_max: float = 0.3
    warmup_epochs: int = 20
    large_margin: float = 0.5

    def validate(self):
        if self.scale <= 0:
            raise ConfigurationError("aam.scale must be positive")
        for name in ("margin_max", "large_margin"):
            m = getattr(self, name)
            if not 0.0 <= m < math.pi / 2:
                raise ConfigurationError(f"aam.{name} must lie in [0, pi/2)")
        if self.warmup_epochs < 0:
            raise ConfigurationError("aam.warmup_epochs must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 2e-3
    lr_warmup_epochs: int = 1
    lr_min_ratio: float = 0.1
    chunk_seconds: float = 2.0
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("supervised.epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("supervised.lr must be positive")
        if self.chunk_seconds <= 0:
            raise ConfigurationError("supervised.chunk_seconds must be positive")
        self.augment.validate()


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 2
    lr: float = 5e-4
    chunk_seconds: float = 3.0
    chunk_sweep: tuple = (2.0, 3.0, 4.0)

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError("finetune.epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("finetune.lr must be positive")
        if self.chunk_seconds <= 0:
            raise ConfigurationError("finetune.chunk_seconds must be positive")
        if any(c <= 0 for c in self.chunk_sweep):
            raise ConfigurationError("finetune.chunk_sweep lengths must be positive")


@dataclass(frozen=True)
class IterationPlan:
    k: int = 40
    max_iters: int = 3
    reassign_epsilon: float = 0.01
    kmeans_iters: int = 100

    def validate(self):
        if self.k < 2:
            raise ConfigurationError("clustering.k must be >= 2")
        if self.max_iters < 1:
            raise ConfigurationError("clustering.max_iters must be >= 1")
        if not 0.0 <= self.reassign_epsilon <= 1.0:
            raise ConfigurationError("clustering.reassign_epsilon must lie in [0, 1]")
        if self.kmeans_iters < 1:
            raise ConfigurationError("clustering.kmeans_iters must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    out_dir: str = "runs/desk"
    corpus_dir: str = ""  # empty means <out_dir>/corpus
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    trials: TrialConfig = field(default_factory=TrialConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    dino: DinoConfig = field(default_factory=DinoConfig)
    aam: AamConfig = field(default_factory=AamConfig)
    supervised: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    clustering: IterationPlan = field(default_factory=IterationPlan)

    def validate(self):
        self.corpus.validate()
        self.trials.validate()
        self.features.validate(self.corpus.sample_rate)
        self.network.validate()
        self.projection.validate()
        self.dino.validate()
        self.aam.validate()
        self.supervised.validate()
        self.finetune.validate()
        self.clustering.validate()


_TOP_LEVEL = ("seed", "out_dir", "corpus_dir")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValidationError(f"section {path or cls.__name__} must be a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ValidationError(f"unknown key in config: {where}")
        ftype = known[key].type
        default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING else known[key].default
        if dataclasses.is_dataclass(default.__class__) and isinstance(value, dict):
            kwargs[key] = _build(default.__class__, value, where)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        elif ftype in ("float", float) and isinstance(value, int) and not isinstance(value, bool):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> PipelineConfig:
    raw = dict(raw)
    top = {k: raw.pop(k) for k in list(raw) if k in _TOP_LEVEL}
    pipe_tbl = raw.pop("pipeline", {})
    if not isinstance(pipe_tbl, dict):
        raise ValidationError("section pipeline must be a table")
    for key, value in pipe_tbl.items():
        if key not in _TOP_LEVEL:
            raise ValidationError(f"unknown key in config: pipeline.{key}")
        top[key] = value
    sections = {}
    known = {f.name for f in fields(PipelineConfig)}
    for key, value in raw.items():
        if key not in known:
            raise ValidationError(f"unknown key in config: {key}")
        sections[key] = value
    merged = dict(top)
    merged.update(sections)
    cfg = _build(PipelineConfig, merged, "")
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    return config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        r = repr(v)
        # TOML floats need a dot or exponent
        if "." not in r and "e" not in r and "E" not in r:
            r += ".0"
        return r
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ValidationError(f"cannot serialize config value {v!r}")


def _emit_section(lines, name, obj):
    scalars, subs = [], []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            subs.append((f.name, v))
        else:
            scalars.append((f.name, v))
    lines.append(f"[{name}]")
    for key, v in scalars:
        lines.append(f"{key} = {_toml_value(v)}")
    lines.append("")
    for sub_name, sub in subs:
        _emit_section(lines, f"{name}.{sub_name}", sub)


def dumps_config(cfg: PipelineConfig) -> str:
    lines = ["[pipeline]"]
    for key in _TOP_LEVEL:
        lines.append(f"{key} = {_toml_value(getattr(cfg, key))}")
    lines.append("")
    for f in fields(PipelineConfig):
        if f.name in _TOP_LEVEL:
            continue
        _emit_section(lines, f.name, getattr(cfg, f.name))
    return "\n".join(lines)
