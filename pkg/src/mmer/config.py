"""Pipeline configuration: one INI file with a section per module, presets and flag overrides."""

from __future__ import annotations

import configparser
import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field

from .audio_encoder import AudioEncoderConfig
from .corpus import ToyCorpusConfig
from .frontend import FrontendConfig, SpecAugmentConfig
from .model import FusionConfig, ModelConfig
from .train import TrainConfig
from .video_encoder import VideoEncoderConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending ``section.key``."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class PipelineSection:
    seed: int = 0
    jobs: int = 1


@dataclass
class AcousticsSection:
    sample_rate_hz: int = 16000
    mic_count: int = 3
    rooms: int = 7
    duration_s: float | None = None
    absorption: str = "calibrated"


@dataclass
class SynthSection:
    snr_db: float = 20.0
    noise_coeff: float = 0.9
    subtype: str = "float32"


@dataclass
class PipelineConfig:
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    acoustics: AcousticsSection = field(default_factory=AcousticsSection)
    synth: SynthSection = field(default_factory=SynthSection)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    specaugment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    audio_encoder: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    video_encoder: VideoEncoderConfig = field(default_factory=VideoEncoderConfig.full)
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(audio_dim=768, video_dim=768))
    train: TrainConfig = field(default_factory=TrainConfig)
    toy: ToyCorpusConfig = field(default_factory=ToyCorpusConfig)

    def model_config(self, mode: str | None = None, audio_fusion: str | None = None, channels: int | None = None) -> ModelConfig:
        audio = self.audio_encoder
        if audio_fusion is not None or channels is not None:
            fm = audio_fusion or audio.fusion_mode
            audio = dataclasses.replace(audio, fusion_mode=fm, channels=1 if fm == "single" else (channels or audio.channels))
        fusion = dataclasses.replace(self.fusion, mode=mode or self.fusion.mode)
        return ModelConfig(dataclasses.replace(audio), dataclasses.replace(self.video_encoder), fusion)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.pipeline.seed, specaugment=self.specaugment)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: v for k, v in section.items() if (f.name, k) not in _HIDDEN}
        return out

    def to_ini(self) -> str:
        lines = []
        for name, section in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in section.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


# keys derived elsewhere and therefore not settable from a file
_HIDDEN = {("train", "specaugment"), ("train", "seed"), ("fusion", "audio_dim"), ("fusion", "video_dim")}

PRESETS = {
    "full": {},
    "toy": {
        "audio_encoder": {"embed_dim": 24, "heads": [1, 2, 4, 8], "frames": 32},
        "video_encoder": {"widths": [8, 16, 32, 64], "blocks": [1, 1, 1, 1], "resize": 28, "crop": 24, "embed_dim": 192},
        "fusion": {"hidden_dim": 64, "class_count": 4},
        "train": {"lr": 3e-4, "max_epochs": 30, "patience": 5, "warmup_steps": 50, "augment": False},
    },
}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _parse(raw, args[0], key)
    if origin in (list, tuple):
        (item,) = set(typing.get_args(hint)) - {Ellipsis}
        items = [_parse(x, item, key) for x in raw.split(",") if x.strip()]
        return items if origin is list else tuple(items)
    try:
        if hint is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        if hint in (int, float, str):
            return hint(raw)
    except (KeyError, ValueError):
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(key, f"unsupported field type {hint}")


def _apply(cfg: PipelineConfig, section: str, values: dict[str, str | object], source: str) -> PipelineConfig:
    if section not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError(section, f"unknown section in {source}")
    current = getattr(cfg, section)
    hints = typing.get_type_hints(type(current))
    names = {f.name for f in dataclasses.fields(current)}
    changes = {}
    for k, v in values.items():
        key = f"{section}.{k}"
        if k not in names or (section, k) in _HIDDEN:
            raise ConfigError(key, f"unknown key in {source}")
        changes[k] = _parse(v, hints[k], key) if isinstance(v, str) else v
    try:
        updated = dataclasses.replace(current, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}.{next(iter(changes), '')}", str(exc)) from None
    return dataclasses.replace(cfg, **{section: updated})


def load_config(path=None, preset: str = "full", overrides: list[str] | None = None) -> PipelineConfig:
    """Preset, then the INI file, then ``section.key=value`` overrides; later wins."""
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PipelineConfig()
    for section, values in PRESETS[preset].items():
        cfg = _apply(cfg, section, values, f"preset {preset}")
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
        for section in parser.sections():
            cfg = _apply(cfg, section, dict(parser.items(section)), str(path))
    grouped: dict[str, dict[str, str]] = {}
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        grouped.setdefault(section, {})[key] = value
    # one replace per section so cross-field checks see every override together
    for section, values in grouped.items():
        cfg = _apply(cfg, section, values, "command line")
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    if cfg.pipeline.jobs < 1:
        raise ConfigError("pipeline.jobs", "must be >= 1")
    if cfg.audio_encoder.mel_bands != cfg.frontend.mel_bands:
        raise ConfigError("audio_encoder.mel_bands", f"must equal frontend.mel_bands ({cfg.frontend.mel_bands})")
    if cfg.acoustics.absorption not in ("calibrated", "sabine"):
        try:
            float(cfg.acoustics.absorption)
        except ValueError:
            raise ConfigError("acoustics.absorption", "must be 'calibrated', 'sabine' or a number") from None
    if cfg.synth.subtype not in ("float32", "pcm16", "pcm24"):
        raise ConfigError("synth.subtype", "must be float32, pcm16 or pcm24")
    try:
        cfg.model_config()
    except ValueError as exc:
        raise ConfigError("fusion", str(exc)) from None


def dumps(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
