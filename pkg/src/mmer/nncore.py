"""Differentiable building blocks, loss, Adam and a finite-difference gradient checker.

Tensors and reverse-mode differentiation come from torch; this module adds
shape-checked ops, the windowed attention used by the audio encoder, and the
optimizer state that checkpoints serialize.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


def _fail(op: str, *shapes) -> None:
    raise ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


# -- ops -----------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        _fail("matmul", a.shape, b.shape)
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        _fail("linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias=None, stride=1, padding=0) -> torch.Tensor:
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        _fail("conv2d", x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias=None, stride=1, padding=0) -> torch.Tensor:
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        _fail("conv1d", x.shape, weight.shape)
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    if weight is not None and weight.shape[0] != x.shape[-1]:
        _fail("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def mean_pool(x: torch.Tensor, dims) -> torch.Tensor:
    return x.mean(dim=dims)


def concat(tensors, dim: int = -1) -> torch.Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != dim % len(ref)
        ):
            _fail("concat", ref, t.shape)
    return torch.cat(list(tensors), dim=dim)


# -- windowed attention --------------------------------------------------------


def window_partition(x: torch.Tensor, window: tuple[int, int]) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, wh * ww, C)."""
    b, h, w, c = x.shape
    wh, ww = window
    if h % wh or w % ww:
        _fail("window_partition", x.shape, window)
    x = x.view(b, h // wh, wh, w // ww, ww, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, wh * ww, c)


def window_reverse(windows: torch.Tensor, window: tuple[int, int], h: int, w: int) -> torch.Tensor:
    wh, ww = window
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // wh) * (w // ww))
    x = windows.view(b, h // wh, w // ww, wh, ww, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def relative_position_index(window: tuple[int, int]) -> torch.Tensor:
    wh, ww = window
    coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel[:, :, 0] += wh - 1
    rel[:, :, 1] += ww - 1
    rel[:, :, 0] *= 2 * ww - 1
    return rel.sum(-1)


def shifted_window_mask(h: int, w: int, window: tuple[int, int], shift: tuple[int, int]) -> torch.Tensor | None:
    """Additive mask (nW, N, N) blocking attention across wrapped-around regions."""
    if shift == (0, 0):
        return None
    region = torch.zeros(1, h, w, 1)
    (wh, ww), (sh, sw) = window, shift

    def slices(size, s):
        return [slice(None)] if s == 0 else [slice(0, -size), slice(-size, -s), slice(-s, None)]

    label = 0
    for hs in slices(wh, sh):
        for ws in slices(ww, sw):
            region[:, hs, ws, :] = label
            label += 1
    ids = window_partition(region, window).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside (wh, ww) windows with a learned relative position bias."""

    def __init__(self, dim: int, window: tuple[int, int], num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim, self.window, self.num_heads = dim, tuple(window), num_heads
        self.scale = (dim // num_heads) ** -0.5
        wh, ww = self.window
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.register_buffer("relative_position_index", relative_position_index(self.window), persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention: torch.Tensor | None = None

    def forward(self, windows: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = windows.shape
        if c != self.dim or n != self.window[0] * self.window[1]:
            _fail("window_attention", windows.shape, (None, self.window[0] * self.window[1], self.dim))
        qkv = self.qkv(windows).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = matmul(q * self.scale, k.transpose(-2, -1))
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        attn = attn + bias.reshape(n, n, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(-1, self.num_heads, n, n)
        attn = softmax(attn, dim=-1)
        self.last_attention = attn.detach()
        out = matmul(attn, v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


# -- loss ----------------------------------------------------------------------


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Batch mean of -log softmax(logits)[label], stabilized by max subtraction."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or labels.shape != (logits.shape[0],):
        _fail("cross_entropy", logits.shape, labels.shape)
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)].tolist()
        raise ValueError(f"cross_entropy: labels {bad} outside [0, {k})")
    shifted = logits - logits.amax(dim=1, keepdim=True).detach()
    log_probs = shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    return -log_probs.gather(1, labels[:, None]).mean()


# -- optimizer -----------------------------------------------------------------


class ParamStore:
    """Named parameters plus Adam moments and step count."""

    def __init__(self, params: "OrderedDict[str, torch.Tensor] | dict"):
        self.params = OrderedDict(params)
        self.step = 0
        self.exp_avg = OrderedDict((n, torch.zeros_like(p)) for n, p in self.params.items())
        self.exp_avg_sq = OrderedDict((n, torch.zeros_like(p)) for n, p in self.params.items())

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(OrderedDict(module.named_parameters()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of every parameter in ``store``, in place."""
    missing = [n for n, p in store.params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing)}")
    store.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    with torch.no_grad():
        for name, p in store.params.items():
            g = p.grad
            m, v = store.exp_avg[name], store.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    coords_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f, inputs, tol: float = 1e-4, h: float = 1e-3, max_coords: int | None = None, seed: int = 0, floor: float = 1e-3) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f(*inputs)`` with central differences.

    Everything runs in float64 (callers pass float64 tensors and modules).
    Relative error per coordinate is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``; ``floor`` keeps near-zero gradients from producing
    meaningless ratios. ``max_coords`` samples that many coordinates per
    input instead of all of them.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("grad_check expects float64 inputs")
        t.grad = None
        t.requires_grad_(True)
    out = f(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = 0.0
    count = 0
    with torch.no_grad():
        for t, g in zip(inputs, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and idx.size > max_coords:
                idx = rng.choice(idx, size=max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                plus = f(*inputs).item()
                flat[i] = orig - h
                minus = f(*inputs).item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * h)
                a = g.reshape(-1)[i].item()
                err = abs(a - numeric)
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(a), abs(numeric), floor))
                count += 1
    return GradCheckReport(worst_rel, worst_abs, count, tol)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def finite_or_raise(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values after {where}")


def init_linear_(module: nn.Module) -> None:
    """Swin-style init: truncated normal (std 0.02) linears, zero biases, unit norms."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

