"""Global attention: shifted-window self-attention fused with a channel gate.

The spatial branch runs window multi-head self-attention, cyclically shifts
the map by half a window, runs a second masked pass so tokens only attend to
neighbours from their own pre-shift region, and shifts back. The channel
branch is an SE-style gate computed from the block input. The two branches
are fused by an elementwise product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import tensor_core as tc
from .blocks import Conv2d, GamMarker, Linear, SEBlock
from .errors import ConfigError, ShapeError

MASK_LARGE = 1e9


@dataclass(frozen=True)
class GamConfig:
    channels: int
    window_size: int = 7
    num_heads: int = 4
    shift_size: int | None = None
    se_reduction: int = 4

    def __post_init__(self):
        if self.shift_size is None:
            object.__setattr__(self, "shift_size", self.window_size // 2)
        if self.channels % self.num_heads:
            raise ConfigError(f"GAM channels {self.channels} not divisible by num_heads {self.num_heads}")
        if not 0 < self.shift_size < self.window_size:
            raise ConfigError(f"GAM shift {self.shift_size} must lie in (0, window {self.window_size})")
        if self.channels % self.se_reduction:
            raise ConfigError(f"GAM channels {self.channels} not divisible by se_reduction {self.se_reduction}")


def _check_geometry(h: int, w: int, window: int) -> None:
    if h % window or w % window:
        raise ConfigError(f"feature map {h}x{w} not divisible by window size {window}")


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """[N,C,H,W] -> [N*(H/w)*(W/w), w*w, C]; windows in row-major order."""
    n, c, h, w = x.shape
    _check_geometry(h, w, window)
    x = x.reshape(n, c, h // window, window, w // window, window)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(n * (h // window) * (w // window), window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    _check_geometry(h, w, window)
    nw = (h // window) * (w // window)
    b, _, c = windows.shape
    n = b // nw
    x = windows.reshape(n, h // window, w // window, window, window, c)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(n, c, h, w)


def cyclic_shift(x: torch.Tensor, shift: int) -> torch.Tensor:
    return torch.roll(x, shifts=(-shift, -shift), dims=(2, 3))


def reverse_shift(x: torch.Tensor, shift: int) -> torch.Tensor:
    return torch.roll(x, shifts=(shift, shift), dims=(2, 3))


def shift_region_ids(h: int, w: int, window: int, shift: int) -> torch.Tensor:
    """Region label of every position of the shifted map, [H, W].

    After rolling by -shift, the last ``window`` rows (columns) hold content
    from two different places of the original map; positions from different
    places get different labels.
    """
    _check_geometry(h, w, window)
    if not 0 < shift < window:
        raise ConfigError(f"shift {shift} must lie in (0, {window})")
    ids = torch.zeros(h, w, dtype=torch.long)
    spans = ((0, -window), (-window, -shift), (-shift, None))
    label = 0
    for rs in spans:
        for cs in spans:
            ids[slice(*rs), slice(*cs)] = label
            label += 1
    return ids


def build_shift_mask(h: int, w: int, window: int, shift: int, large: float = MASK_LARGE,
                     dtype=None) -> torch.Tensor:
    """Additive masks for every window of the shifted map, [nW, w*w, w*w] of 0 / -large."""
    ids = shift_region_ids(h, w, window, shift)
    win = window_partition(ids[None, None].to(torch.float64), window)[..., 0]
    diff = win[:, :, None] != win[:, None, :]
    mask = torch.zeros(diff.shape, dtype=dtype or torch.get_default_dtype())
    return mask.masked_fill(diff, -large)


def mhsa_window_forward(windows: torch.Tensor, qkv_weight, qkv_bias, proj_weight, proj_bias,
                        num_heads: int, mask: torch.Tensor | None = None, return_attention: bool = False):
    """softmax(Q K^T / sqrt(d) + mask) V per window and head, then output projection.

    ``windows`` is [B*nW, N, C]; ``mask`` is [nW, N, N] and is tiled over B.
    """
    bw, n, c = windows.shape
    if c % num_heads:
        raise ShapeError(f"channel axis 2 = {c} not divisible by num_heads={num_heads}")
    d = c // num_heads
    qkv = tc.linear(windows, qkv_weight, qkv_bias).reshape(bw, n, 3, num_heads, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = (q * (1.0 / math.sqrt(d))) @ k.transpose(-2, -1)
    if mask is not None:
        nw = mask.shape[0]
        if mask.shape[1:] != (n, n) or bw % nw:
            raise ShapeError(f"mask shape {tuple(mask.shape)} incompatible with windows {tuple(windows.shape)}")
        logits = logits.reshape(bw // nw, nw, num_heads, n, n) + mask[None, :, None]
        logits = logits.reshape(bw, num_heads, n, n)
    attn = tc.softmax(logits, axis=-1)
    out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
    out = tc.linear(out, proj_weight, proj_bias)
    return (out, attn) if return_attention else out


class WindowAttention(nn.Module):
    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = Linear(channels, 3 * channels)
        self.proj = Linear(channels, channels)
        self.keep_attention = False
        self.last_attention = None
        self.last_macs = 0

    def forward(self, windows, mask=None):
        out, attn = mhsa_window_forward(windows, self.qkv.weight, self.qkv.bias, self.proj.weight,
                                        self.proj.bias, self.num_heads, mask, return_attention=True)
        bw, n, c = windows.shape
        # qkv and output projections plus QK^T and attn @ V
        self.last_macs = bw * n * c * 4 * c + 2 * bw * n * n * c
        self.last_attention = attn.detach() if self.keep_attention else None
        return out


class GAM(nn.Module):
    def __init__(self, cfg: GamConfig):
        super().__init__()
        self.cfg = cfg
        self.attn = WindowAttention(cfg.channels, cfg.num_heads)
        self.shifted_attn = WindowAttention(cfg.channels, cfg.num_heads)
        self.channel = SEBlock(cfg.channels, cfg.se_reduction)
        self._masks: dict = {}

    def mask_for(self, h, w, dtype):
        key = (h, w, dtype)
        if key not in self._masks:
            self._masks[key] = build_shift_mask(h, w, self.cfg.window_size, self.cfg.shift_size, dtype=dtype)
        return self._masks[key]

    def spatial(self, x):
        _, c, h, w = x.shape
        ws, shift = self.cfg.window_size, self.cfg.shift_size
        if c != self.cfg.channels:
            raise ShapeError(f"GAM expects {self.cfg.channels} channels (axis 1), got {c}")
        _check_geometry(h, w, ws)
        x = x + window_reverse(self.attn(window_partition(x, ws)), ws, h, w)
        s = cyclic_shift(x, shift)
        s = s + window_reverse(self.shifted_attn(window_partition(s, ws), self.mask_for(h, w, x.dtype)), ws, h, w)
        return reverse_shift(s, shift)

    def forward(self, x):
        gate = self.channel.gate(x)
        return self.spatial(x) * gate[:, :, None, None]


class CBAM(nn.Module):
    """Channel gate from avg+max pooled shared MLP, then a 7x7 spatial gate."""

    def __init__(self, channels: int, reduction: int = 4, kernel: int = 7):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"CBAM channels {channels} not divisible by reduction {reduction}")
        self.fc1 = Linear(channels, channels // reduction)
        self.fc2 = Linear(channels // reduction, channels)
        self.spatial_conv = Conv2d(2, 1, kernel, 1, kernel // 2, bias=False)
        self.spatial_bn = tc.BatchNorm2d(1)

    def forward(self, x):
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        ch = tc.sigmoid(self.fc2(tc.relu(self.fc1(avg))) + self.fc2(tc.relu(self.fc1(mx))))
        x = x * ch[:, :, None, None]
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * tc.sigmoid(self.spatial_bn(self.spatial_conv(pooled)))


ATTENTION_KINDS = ("gam", "none", "se", "cbam")


def make_attention(kind: str, channels: int, marker: GamMarker | None = None) -> nn.Module:
    marker = marker or GamMarker()
    if kind == "gam":
        return GAM(GamConfig(channels, marker.window, marker.heads, marker.window // 2, marker.reduction))
    if kind == "se":
        return SEBlock(channels, marker.reduction)
    if kind == "cbam":
        return CBAM(channels, marker.reduction)
    if kind == "none":
        return nn.Identity()
    raise ConfigError(f"unknown attention kind {kind!r}; choose from {ATTENTION_KINDS}")
