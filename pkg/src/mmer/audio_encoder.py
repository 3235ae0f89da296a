"""Hierarchical shifted-window transformer over log-mel spectrograms.

Three input modes share one architecture:

* ``single``  -- one microphone, input (B, 1, F, T)
* ``avg_mel`` -- log-mels averaged over microphones before the encoder
* ``sum_pe``  -- one shared patch embedding applied to every microphone,
  token grids summed, positional embedding added once
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .nncore import WindowAttention, init_linear_, shifted_window_mask, window_partition, window_reverse

FUSION_MODES = ("single", "avg_mel", "sum_pe")


@dataclass
class AudioEncoderConfig:
    embed_dim: int = 96
    depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    patch_size: int = 4
    window_size: int = 8
    mlp_ratio: float = 4.0
    mel_bands: int = 64
    frames: int = 256
    fusion_mode: str = "single"
    channels: int = 1

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have one entry per group")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h:
                raise ValueError(f"group {i}: dim {self.embed_dim * 2**i} not divisible by {h} heads")
        if self.fusion_mode == "single" and self.channels != 1:
            raise ValueError("single-channel mode needs channels == 1")

    @classmethod
    def toy(cls, **overrides) -> "AudioEncoderConfig":
        base = dict(embed_dim=24, heads=[1, 2, 4, 8])
        base.update(overrides)
        return cls(**base)

    @property
    def groups(self) -> int:
        return len(self.depths)

    @property
    def pad_multiple(self) -> int:
        return self.patch_size * 2 ** (self.groups - 1)

    @property
    def padded_shape(self) -> tuple[int, int]:
        m = self.pad_multiple
        return math.ceil(self.mel_bands / m) * m, math.ceil(self.frames / m) * m

    @property
    def output_dim(self) -> int:
        return self.embed_dim * 2 ** (self.groups - 1)

    def stage_grids(self) -> list[tuple[int, int]]:
        fp, tp = self.padded_shape
        h, w = fp // self.patch_size, tp // self.patch_size
        return [(h >> i, w >> i) for i in range(self.groups)]

    def to_dict(self) -> dict:
        return asdict(self)


def largest_window(size: int, limit: int) -> int:
    """Largest divisor of ``size`` not exceeding ``limit``."""
    return max(d for d in range(1, min(size, limit) + 1) if size % d == 0)


def reflect_pad(x: torch.Tensor, length: int, dim: int) -> torch.Tensor:
    """Extend ``x`` along ``dim`` to ``length`` by mirroring (repeats the mirror when needed)."""
    while x.shape[dim] < length:
        need = min(length - x.shape[dim], x.shape[dim] - 1)
        if need <= 0:
            x = torch.cat([x, x], dim=dim)
            continue
        tail = x.narrow(dim, x.shape[dim] - 1 - need, need).flip(dim)
        x = torch.cat([x, tail], dim=dim)
    return x.narrow(dim, 0, length)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(1, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, F, T) -> (B, F/p, T/p, D)."""
        if x.numel() == 0:
            raise ValueError("patch_embed: empty input")
        return self.proj(x).permute(0, 2, 3, 1)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, grid: tuple[int, int], window: tuple[int, int], shift: tuple[int, int], mlp_ratio: float):
        super().__init__()
        self.grid, self.window, self.shift = grid, window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.register_buffer("attn_mask", shifted_window_mask(*grid, window, shift), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        y = self.norm1(x)
        sh, sw = self.shift
        if sh or sw:
            y = torch.roll(y, shifts=(-sh, -sw), dims=(1, 2))
        y = window_reverse(self.attn(window_partition(y, self.window), self.attn_mask), self.window, h, w)
        if sh or sw:
            y = torch.roll(y, shifts=(sh, sw), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat, layer norm, linear 4d -> 2d."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class BinNorm(nn.Module):
    """Batch norm over mel bins with float running stats only (no step counter)."""

    def __init__(self, bins: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = nn.Parameter(torch.ones(bins))
        self.bias = nn.Parameter(torch.zeros(bins))
        self.register_buffer("running_mean", torch.zeros(bins))
        self.register_buffer("running_var", torch.ones(bins))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, bins, ...) -> same shape."""
        return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                            self.training, self.momentum, self.eps)


class AudioEncoder(nn.Module):
    def __init__(self, cfg: AudioEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        grids = cfg.stage_grids()
        # per-mel-bin input normalization; raw log-mel offsets between bins dwarf class cues
        self.bn0 = BinNorm(cfg.mel_bands)
        self.patch_embed = PatchEmbed(cfg.patch_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, *grids[0], d))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.embed_norm = nn.LayerNorm(d)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
            dim = d * 2**i
            h, w = grids[i]
            window = (largest_window(h, cfg.window_size), largest_window(w, cfg.window_size))
            half = (window[0] // 2 if window[0] < h else 0, window[1] // 2 if window[1] < w else 0)
            blocks = [
                SwinBlock(dim, heads, (h, w), window, half if j % 2 else (0, 0), cfg.mlp_ratio)
                for j in range(depth)
            ]
            self.stages.append(nn.ModuleList(blocks))
            if i < cfg.groups - 1:
                self.merges.append(PatchMerging(dim))
        self.norm = nn.LayerNorm(cfg.output_dim)
        init_linear_(self)
        self.last_grids: list[tuple[int, int]] = []

    def fit_input(self, mel: torch.Tensor) -> torch.Tensor:
        """Check a (B, C, F, T) mel batch and crop it to the configured frame count."""
        if mel.dim() != 4:
            raise ValueError(f"expected (B, C, F, T) mel batch, got shape {tuple(mel.shape)}")
        if mel.shape[2] != self.cfg.mel_bands:
            raise ValueError(f"expected {self.cfg.mel_bands} mel bands, got {mel.shape[2]}")
        return mel[..., : self.cfg.frames]

    def pad_input(self, mel: torch.Tensor) -> torch.Tensor:
        """Reflect-pad bins and frames up to the patch grid."""
        fp, tp = self.cfg.padded_shape
        return reflect_pad(reflect_pad(mel, fp, 2), tp, 3)

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        """Batch-normalize each mel bin of a (B, C, F, T) batch, channels treated alike."""
        b, c, f, t = mel.shape
        x = mel.reshape(b * c, 1, f, t).transpose(1, 2)
        return self.bn0(x).transpose(1, 2).reshape(b, c, f, t)

    def channel_tokens(self, mel: torch.Tensor) -> torch.Tensor:
        """Patch projection (no positional term) after channel fusion: (B, H, W, D)."""
        mel = self.fit_input(mel)
        b, c = mel.shape[:2]
        mode = self.cfg.fusion_mode
        if mode == "single":
            if c != 1:
                raise ValueError(f"single-channel encoder got {c} channels")
            return self.patch_embed(self.pad_input(self.normalize(mel)))
        if mode == "avg_mel":
            avg = mel.to(torch.float64).mean(dim=1, keepdim=True).to(mel.dtype)
            return self.patch_embed(self.pad_input(self.normalize(avg)))
        x = self.pad_input(self.normalize(mel))
        tokens = self.patch_embed(x.reshape(b * c, 1, *x.shape[2:]))
        return tokens.reshape(b, c, *tokens.shape[1:]).sum(dim=1)

    def tokens(self, mel: torch.Tensor) -> torch.Tensor:
        return self.channel_tokens(mel) + self.pos_embed

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, C, F, T) log-mel batch -> (B, 8D) embedding."""
        x = self.embed_norm(self.tokens(mel))
        self.last_grids = []
        for i, blocks in enumerate(self.stages):
            self.last_grids.append(tuple(x.shape[1:3]))
            for j, block in enumerate(blocks):
                x = block(x)
                if not torch.isfinite(x).all():
                    raise FloatingPointError(f"non-finite activations after audio group {i} block {j}")
            if i < len(self.merges):
                x = self.merges[i](x)
        x = self.norm(x)
        return x.mean(dim=(1, 2))
