"""Dataclass configs and the flat ``key = value`` text format.

One parser serves CLI config files, dataset manifests and metric reports:
dotted keys (``sara.tau_g = 0.07``), ``#`` comments, unknown keys rejected.
Floats round-trip via ``repr`` so serialized configs are lossless.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

FORMAT_VERSION = 1


@dataclass
class SynthSpec:
    """Geometry and seeding of the synthetic dataset.

    ``n_samples`` counts distinct stimuli; every stimulus is recorded once
    per subject, so the dataset holds n_samples * n_subjects voxel vectors.
    """

    n_subjects: int = 3
    n_samples: int = 128
    n_voxels: int = 64
    h_input: int = 32
    w_input: int = 32
    frame_count: int = 8
    img_size: int = 32
    seg_size: int = 16
    k_cls: int = 64
    vocab_size: int = 32
    max_caption_len: int = 8
    l_clip: int = 16
    c_clip: int = 16
    latent_channels: int = 4
    latent_size: int = 8
    semantic_dim: int = 12
    subject_dim: int = 4
    noise_sigma: float = 0.1
    subject_bias_scale: float = 1.0
    subject_mix_strength: float = 0.4
    tr_seconds: float = 2.0
    delay_seconds: float = 6.0
    run_frames: int = 8
    runs_per_stimulus: int = 2
    run_noise_sigma: float = 0.5
    emit_raw: bool = True
    seed: int = -1

    def validate(self) -> None:
        dims = (
            self.n_subjects, self.n_samples, self.n_voxels, self.h_input,
            self.w_input, self.frame_count, self.img_size, self.seg_size,
            self.k_cls, self.vocab_size, self.l_clip, self.c_clip,
            self.latent_channels, self.latent_size, self.semantic_dim,
            self.subject_dim,
        )
        if any(d < 1 for d in dims):
            raise ConfigError("all synth dimensions must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_voxels > self.h_input * self.w_input:
            raise ConfigError("n_voxels exceeds surface grid capacity")


@dataclass
class ModelConfig:
    """Architecture knobs for the encoders, prior, adapter and heads."""

    d_latent: int = 32
    patch_size: int = 8
    vit_layers: int = 2
    vit_heads: int = 2
    mlp_ratio: int = 2
    stream_hidden: int = 64
    prior_blocks: int = 2
    attn_dim: int = 16
    n_kv_tokens: int = 8
    l_redis: int = 4
    redis_mlp_ratio: int = 2
    caption_dim: int = 32
    use_bias: bool = True
    prior_target: str = "clip_high"  # or "video_embed"
    use_sara_semantics: bool = True
    embedder_layers: int = 8
    embedder_low_layer: int = 2


@dataclass
class SaraWeights:
    lambda_align: float = 1.0
    lambda_subj: float = 0.5
    lambda_generic: float = 0.5


@dataclass
class HedWeights:
    lambda_caption: float = 1.0
    lambda_cls: float = 1.0
    lambda_seg: float = 1.0
    lambda_motion: float = 1.0


@dataclass
class ScheduleSpec:
    """Active window of one cyclic loss-weight schedule."""

    start_epoch: int = 0
    period_epochs: int = 4
    batches_per_epoch: int = 1

    @property
    def total_batches(self) -> int:
        return self.period_epochs * self.batches_per_epoch

    def validate(self) -> None:
        if self.start_epoch < 0:
            raise ConfigError("start_epoch must be >= 0")
        if self.period_epochs < 1 or self.batches_per_epoch < 1:
            raise ConfigError("period_epochs and batches_per_epoch must be >= 1")


@dataclass
class TrialConfig:
    """N-way top-K trial protocol."""

    n_way: int = 2
    top_k: int = 1
    repeats: int = 100
    rng_seed: int = -1

    def validate(self) -> None:
        if self.n_way < 2:
            raise ConfigError("n_way must be >= 2")
        if not 1 <= self.top_k <= self.n_way:
            raise ConfigError("top_k must be in [1, n_way]")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


@dataclass
class TrainConfig:
    stage: str = "all"  # hcam | sara | hed | all
    hcam_epochs: int = 6
    sara_epochs: int = 6
    hed_epochs: int = 6
    batch_size: int = 16
    lr: float = 1e-3
    hed_lr: float = 1e-2
    seed: int = -1
    temperature: float = 0.1
    tau_g: float = 0.07
    beta_a: float = 0.15
    beta_b: float = 0.15
    mixco: bool = True
    sara_mixco: bool = False
    joint_prior: bool = True
    dorsal_align: bool = True
    sara_freeze_upstream: bool = True
    hed_freeze_upstream: bool = True
    schedule_period: int = 4
    sara: SaraWeights = field(default_factory=SaraWeights)
    hed: HedWeights = field(default_factory=HedWeights)
    holdout_subject: int = -1  # -1: train on all subjects
    dump_pgm: bool = False

    def validate(self) -> None:
        if self.stage not in ("hcam", "sara", "hed", "all"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if min(self.hcam_epochs, self.sara_epochs, self.hed_epochs) < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.temperature <= 0 or self.tau_g <= 0:
            raise ConfigError("temperatures must be > 0")


@dataclass
class CliConfig:
    """Merged view of all pipeline configuration."""

    seed: int = 0
    out_dir: str = "out"
    scheme_id: str = "A"
    train_ratio: float = 0.75
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    trial: TrialConfig = field(default_factory=TrialConfig)

    def resolved(self) -> "CliConfig":
        """Copy with -1 sub-seeds replaced by values derived from the base seed."""
        cfg = copy_config(self)
        if cfg.synth.seed < 0:
            cfg.synth.seed = cfg.seed
        if cfg.train.seed < 0:
            cfg.train.seed = cfg.seed + 1
        if cfg.trial.rng_seed < 0:
            cfg.trial.rng_seed = cfg.seed + 2
        return cfg

    def validate(self) -> None:
        if self.scheme_id not in ("A", "B"):
            raise ConfigError(f"scheme_id must be A or B, got {self.scheme_id!r}")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError("train_ratio must lie strictly between 0 and 1")
        self.synth.validate()
        self.train.validate()
        self.trial.validate()


def copy_config(cfg):
    return dataclasses.replace(
        cfg,
        **{
            f.name: copy_config(getattr(cfg, f.name))
            if dataclasses.is_dataclass(getattr(cfg, f.name))
            else getattr(cfg, f.name)
            for f in dataclasses.fields(cfg)
        },
    )


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, typ):
    text = text.strip()
    if typ is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {typ.__name__}") from exc
    return text


def flatten_config(cfg, prefix: str = "") -> dict[str, str]:
    flat: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            flat.update(flatten_config(value, prefix=f"{key}."))
        else:
            flat[key] = _format_value(value)
    return flat


def _field_types(cfg, prefix: str = "") -> dict[str, type]:
    types: dict[str, type] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            types.update(_field_types(value, prefix=f"{key}."))
        else:
            types[key] = type(value)
    return types


def apply_overrides(cfg, flat: dict[str, str]):
    """Return a copy of cfg with dotted-key overrides applied.

    Unknown keys raise ConfigError so typos never pass silently.
    """
    cfg = copy_config(cfg)
    types = _field_types(cfg)
    for key, raw in flat.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse_value(raw, types[key])
        target = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            target = getattr(target, part)
        setattr(target, parts[-1], value)
    return cfg


def parse_flat_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        flat[key.strip()] = value.strip()
    return flat


def format_flat_text(flat: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None,
                seed: int | None = None,
                out_dir: str | None = None) -> CliConfig:
    cfg = CliConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        cfg = apply_overrides(cfg, parse_flat_text(text))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    cfg.validate()
    return cfg


def save_config(cfg: CliConfig, path: str | Path) -> None:
    Path(path).write_text(format_flat_text(flatten_config(cfg)))
