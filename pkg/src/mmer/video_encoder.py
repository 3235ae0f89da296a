"""Frame sampling, clip-consistent augmentation and a (2+1)D residual video encoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import VideoClip


@dataclass
class VideoEncoderConfig:
    frames_per_clip: int = 8
    crop: int = 180
    resize: int = 224
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    embed_dim: int = 192
    hflip_p: float = 0.3
    vflip_p: float = 0.3
    max_rotation_deg: float = 30.0

    def __post_init__(self):
        if self.frames_per_clip < 1:
            raise ValueError("frames_per_clip must be >= 1")
        if self.crop > self.resize:
            raise ValueError(f"crop {self.crop} larger than resize {self.resize}")
        if len(self.widths) != len(self.blocks):
            raise ValueError("widths and blocks must have one entry per stage")

    @classmethod
    def full(cls, **overrides) -> "VideoEncoderConfig":
        base = dict(widths=[64, 128, 256, 512], embed_dim=768)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# -- sampling and augmentation -------------------------------------------------


@dataclass
class AugmentParams:
    top: int
    left: int
    hflip: bool = False
    vflip: bool = False
    angle_deg: float = 0.0


def sample_frame_indices(n_frames: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if n_frames < count:
        raise ValueError(f"clip has {n_frames} frames, need at least {count}")
    return np.sort(rng.choice(n_frames, size=count, replace=False))


def resize_frames(frames: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of (N, 3, H, W) float frames to (N, 3, size, size)."""
    if frames.shape[-2:] == (size, size):
        return frames
    return F.interpolate(frames, size=(size, size), mode="bilinear", align_corners=False)


def rotate_frames(frames: torch.Tensor, angle_deg: float) -> torch.Tensor:
    """Rotate about the frame center, bilinear, zero fill."""
    if angle_deg == 0.0:
        return frames
    a = math.radians(angle_deg)
    theta = torch.tensor([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0]], dtype=frames.dtype)
    grid = F.affine_grid(theta.expand(frames.shape[0], 2, 3), list(frames.shape), align_corners=False)
    return F.grid_sample(frames, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def augment_frames(frames: torch.Tensor, crop: int, params: AugmentParams) -> torch.Tensor:
    """Apply one crop/flip/rotation to every frame of a (N, 3, H, W) clip."""
    out = frames[..., params.top : params.top + crop, params.left : params.left + crop]
    if params.hflip:
        out = out.flip(-1)
    if params.vflip:
        out = out.flip(-2)
    return rotate_frames(out, params.angle_deg)


def sample_and_augment(clip: VideoClip, cfg: VideoEncoderConfig, train: bool, rng_seed: int) -> torch.Tensor:
    """Pick ``frames_per_clip`` sorted frames, resize, crop (+ augment in training).

    Returns a float32 tensor (frames, 3, crop, crop) in [0, 1].
    """
    rng = np.random.default_rng(rng_seed)
    idx = sample_frame_indices(len(clip), cfg.frames_per_clip, rng)
    frames = torch.from_numpy(clip.frames[idx]).permute(0, 3, 1, 2).to(torch.float32) / 255.0
    frames = resize_frames(frames, cfg.resize)
    slack = cfg.resize - cfg.crop
    if train:
        params = AugmentParams(
            top=int(rng.integers(0, slack + 1)),
            left=int(rng.integers(0, slack + 1)),
            hflip=bool(rng.random() < cfg.hflip_p),
            vflip=bool(rng.random() < cfg.vflip_p),
            angle_deg=float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
        )
    else:
        params = AugmentParams(top=slack // 2, left=slack // 2)
    return augment_frames(frames, cfg.crop, params).contiguous()


# -- network -------------------------------------------------------------------


def midplanes(n_in: int, n_out: int, t: int = 3, d: int = 3) -> int:
    """Intermediate width that keeps a (2+1)D conv at the parameter count of a t x d x d 3D conv."""
    return (t * d * d * n_in * n_out) // (d * d * n_in + t * n_out)


class ChannelNorm(nn.Module):
    """Layer norm across channels at every (t, h, w) location of a (B, C, T, H, W) tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        y = F.layer_norm(x.movedim(1, -1), (x.shape[1],), self.weight, self.bias, self.eps)
        return y.movedim(-1, 1)


class Conv2Plus1D(nn.Module):
    """Spatial (1 x k x k) conv, norm, ReLU, then temporal (3 x 1 x 1) conv."""

    def __init__(self, n_in: int, n_out: int, mid: int, stride: int = 1, spatial_stride: int | None = None, kernel: int = 3):
        super().__init__()
        s = stride if spatial_stride is None else spatial_stride
        self.spatial = nn.Conv3d(n_in, mid, (1, kernel, kernel), stride=(1, s, s), padding=(0, kernel // 2, kernel // 2), bias=False)
        self.norm = ChannelNorm(mid)
        self.temporal = nn.Conv3d(mid, n_out, (3, 1, 1), stride=(stride, 1, 1), padding=(1, 0, 0), bias=False)

    def forward(self, x):
        return self.temporal(torch.relu(self.norm(self.spatial(x))))


class R2Plus1DBlock(nn.Module):
    def __init__(self, n_in: int, n_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2Plus1D(n_in, n_out, midplanes(n_in, n_out), stride)
        self.norm1 = ChannelNorm(n_out)
        self.conv2 = Conv2Plus1D(n_out, n_out, midplanes(n_out, n_out))
        self.norm2 = ChannelNorm(n_out)
        if stride != 1 or n_in != n_out:
            self.shortcut = nn.Sequential(nn.Conv3d(n_in, n_out, 1, stride=stride, bias=False), ChannelNorm(n_out))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.conv1.spatial.in_channels:
            raise ValueError(
                f"r2plus1d_block: input {tuple(x.shape)} incompatible with {self.conv1.spatial.in_channels} input channels"
            )
        y = torch.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return torch.relu(y + self.shortcut(x))


class VideoEncoder(nn.Module):
    def __init__(self, cfg: VideoEncoderConfig):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = nn.Sequential(
            Conv2Plus1D(3, w0, midplanes(3, w0, d=7), stride=1, spatial_stride=2, kernel=7),
            ChannelNorm(w0),
            nn.ReLU(),
        )
        self.stages = nn.ModuleList()
        n_in = w0
        for i, (width, count) in enumerate(zip(cfg.widths, cfg.blocks)):
            blocks = [R2Plus1DBlock(n_in if j == 0 else width, width, (2 if i > 0 and j == 0 else 1)) for j in range(count)]
            self.stages.append(nn.Sequential(*blocks))
            n_in = width
        self.fc = nn.Linear(n_in, cfg.embed_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, frames, 3, H, W) in [0, 1] -> (B, embed_dim)."""
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise ValueError(f"expected (B, frames, 3, H, W), got {tuple(frames.shape)}")
        x = self.stem(frames.permute(0, 2, 1, 3, 4))
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after video stage {i}")
        return self.fc(x.mean(dim=(2, 3, 4)))
