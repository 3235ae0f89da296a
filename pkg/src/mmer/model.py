"""Late fusion of audio and video embeddings and the two-layer classification head."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch
from torch import nn

from .audio_encoder import AudioEncoder, AudioEncoderConfig
from .nncore import concat
from .video_encoder import VideoEncoder, VideoEncoderConfig

HEAD_MODES = ("audio_only", "video_only", "multimodal")


class Modality(str, Enum):
    AUDIO = "audio"
    VIDEO = "video"


@dataclass
class FusionConfig:
    audio_dim: int = 192
    video_dim: int = 192
    hidden_dim: int = 512
    class_count: int = 8
    mode: str = "multimodal"

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ValueError(f"mode must be one of {HEAD_MODES}, got {self.mode!r}")

    @property
    def input_dim(self) -> int:
        return {
            "audio_only": self.audio_dim,
            "video_only": self.video_dim,
            "multimodal": self.audio_dim + self.video_dim,
        }[self.mode]


def fuse(f_v: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """Concatenate video then audio embeddings along the last axis."""
    if not (torch.isfinite(f_v).all() and torch.isfinite(f_s).all()):
        raise ValueError("fuse: non-finite embedding")
    return concat([f_v, f_s], dim=-1)


def split_fused(fused: torch.Tensor, video_dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    return fused[..., :video_dim], fused[..., video_dim:]


class FusionHead(nn.Module):
    """fc1 -> ReLU -> fc2."""

    def __init__(self, in_dim: int, hidden_dim: int, class_count: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise ValueError(f"classify: input dim {x.shape[-1]} != fc1 input {self.fc1.in_features}")
        return self.fc2(torch.relu(self.fc1(x)))


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Arg-max class; ties go to the lowest index."""
    return torch.argmax(logits, dim=-1)


@dataclass
class ModelConfig:
    audio: AudioEncoderConfig = field(default_factory=AudioEncoderConfig.toy)
    video: VideoEncoderConfig = field(default_factory=VideoEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.fusion.mode == "multimodal" and self.audio.output_dim != self.video.embed_dim:
            raise ValueError(
                f"audio embedding ({self.audio.output_dim}) and video embedding ({self.video.embed_dim}) must match"
            )
        self.fusion.audio_dim = self.audio.output_dim
        self.fusion.video_dim = self.video.embed_dim

    @property
    def uses_audio(self) -> bool:
        return self.fusion.mode != "video_only"

    @property
    def uses_video(self) -> bool:
        return self.fusion.mode != "audio_only"

    def to_dict(self) -> dict:
        return {
            "audio": self.audio.to_dict(),
            "video": self.video.to_dict(),
            "fusion": {k: getattr(self.fusion, k) for k in ("hidden_dim", "class_count", "mode")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            audio=AudioEncoderConfig(**d["audio"]),
            video=VideoEncoderConfig(**d["video"]),
            fusion=FusionConfig(**d["fusion"]),
        )


class MERModel(nn.Module):
    """Audio and/or video encoder followed by the fusion head.

    Parameter namespaces: ``audio.*``, ``video.*``, ``head.*``. Unimodal
    modes build only the encoder they use and a head sized to it.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.audio = AudioEncoder(cfg.audio) if cfg.uses_audio else None
        self.video = VideoEncoder(cfg.video) if cfg.uses_video else None
        self.head = FusionHead(cfg.fusion.input_dim, cfg.fusion.hidden_dim, cfg.fusion.class_count)

    def embed(self, mel: torch.Tensor | None = None, frames: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        out = {}
        if self.audio is not None:
            if mel is None:
                raise ValueError(f"{self.cfg.fusion.mode} model needs mel input")
            out["audio"] = self.audio(mel)
        if self.video is not None:
            if frames is None:
                raise ValueError(f"{self.cfg.fusion.mode} model needs video frames")
            out["video"] = self.video(frames)
        if self.audio is not None and self.video is not None:
            out["fused"] = fuse(out["video"], out["audio"])
        else:
            out["fused"] = out["audio"] if self.audio is not None else out["video"]
        return out

    def forward(self, mel: torch.Tensor | None = None, frames: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.embed(mel, frames)["fused"])
