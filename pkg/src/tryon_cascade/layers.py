"""Building blocks shared by the denoiser networks."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import NUM_KEYPOINTS


def group_count(channels: int) -> int:
    """min(32, C // 4), never below 1."""
    return max(1, min(32, channels // 4))


def group_norm(channels: int) -> nn.GroupNorm:
    # fall back to a divisor of C when C // 4 groups do not tile the channels
    return nn.GroupNorm(math.gcd(channels, group_count(channels)), channels)


def swish(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def timestep_encoding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Transformer-style sinusoidal encoding of ``scale * t``; returns (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = scale * t[:, None] * freqs[None]
    enc = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


class FiLM(nn.Module):
    """h * (1 + scale) + shift, with (scale, shift) projected from the embedding."""

    def __init__(self, emb_dim: int, channels: int):
        super().__init__()
        self.proj = zero_module(nn.Linear(emb_dim, 2 * channels))

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(swish(emb)).chunk(2, dim=-1)
        return film_modulate(h, scale, shift)


def film_modulate(h: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


class ResBlock(nn.Module):
    """GroupNorm -> FiLM -> swish -> conv, twice, plus a 1x1 convolution on the skip path."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.norm1 = group_norm(in_ch)
        self.film1 = FiLM(emb_dim, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = group_norm(out_ch)
        self.film2 = FiLM(emb_dim, out_ch)
        self.conv2 = zero_module(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        if h.shape[1] != self.in_ch:
            raise ValueError(f"residual block expects {self.in_ch} channels, got {h.shape[1]}")
        x = self.conv1(swish(self.film1(self.norm1(h), emb)))
        x = self.conv2(swish(self.film2(self.norm2(x), emb)))
        return x + self.skip(h)


# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """softmax(q k^T / sqrt(d)) v over the last two dims.

    Args:
        q: (..., M, d) queries.
        k: (..., N, d) keys.
        v: (..., N, dv) values.
        mask: optional boolean (..., N) or (..., M, N); True marks keys to ignore.
        return_weights: also return the (..., M, N) attention matrix.
    """
    d = q.shape[-1]
    if d == 0 or k.shape[-2] == 0:
        raise ValueError("attention needs d > 0 and at least one key")
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        if mask.ndim == logits.ndim - 1:
            mask = mask.unsqueeze(-2)
        logits = logits.masked_fill(mask, float("-inf"))
    w = torch.softmax(logits, dim=-1)
    out = w @ v
    return (out, w) if return_weights else out


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def _flatten(h: torch.Tensor) -> torch.Tensor:
    return h.flatten(2).transpose(1, 2)  # (B, H*W, C)


class PoseSelfAttention(nn.Module):
    """Multi-head self attention whose keys and values also include projected pose tokens.

    Pose tokens flagged in ``pose_mask`` (invisible keypoints) are excluded from the softmax.
    """

    def __init__(self, channels: int, heads: int, pose_dim: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = group_norm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.pose_kv = nn.Linear(pose_dim, 2 * channels)
        self.out = zero_module(nn.Linear(channels, channels))

    def forward(self, h, pose_tokens=None, pose_mask=None, return_weights=False):
        b, c, hh, ww = h.shape
        q, k, v = self.qkv(_flatten(self.norm(h))).chunk(3, dim=-1)
        mask = None
        if pose_tokens is not None:
            pk, pv = self.pose_kv(pose_tokens).chunk(2, dim=-1)
            k = torch.cat([k, pk], dim=1)
            v = torch.cat([v, pv], dim=1)
            if pose_mask is not None:
                feat_keep = torch.zeros(b, hh * ww, dtype=torch.bool, device=h.device)
                mask = torch.cat([feat_keep, pose_mask], dim=1)[:, None, :]
        q, k, v = (_split_heads(x, self.heads) for x in (q, k, v))
        o, w = scaled_dot_attention(q, k, v, mask, return_weights=True)
        o = self.out(_merge_heads(o)).transpose(1, 2).reshape(b, c, hh, ww)
        return (h + o, w) if return_weights else h + o


class CrossAttention(nn.Module):
    """Queries from the person stream, keys and values from the garment stream, residual output."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm_q = group_norm(channels)
        self.norm_kv = group_norm(channels)
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(channels, 2 * channels)
        self.out = zero_module(nn.Linear(channels, channels))

    def forward(self, person, garment, return_weights=False):
        b, c, hh, ww = person.shape
        if garment.shape[1] != c:
            raise ValueError(f"garment stream has {garment.shape[1]} channels, person stream {c}")
        q = self.q(_flatten(self.norm_q(person)))
        k, v = self.kv(_flatten(self.norm_kv(garment))).chunk(2, dim=-1)
        q, k, v = (_split_heads(x, self.heads) for x in (q, k, v))
        o, w = scaled_dot_attention(q, k, v, return_weights=True)
        o = self.out(_merge_heads(o)).transpose(1, 2).reshape(b, c, hh, ww)
        return (person + o, w) if return_weights else person + o


# ---------------------------------------------------------------------------
# pose


class PoseEncoder(nn.Module):
    """Per-keypoint embedding: MLP on (x, y, v) plus a learned keypoint-index vector."""

    def __init__(self, dim: int, num_keypoints: int = NUM_KEYPOINTS):
        super().__init__()
        self.fc1 = nn.Linear(3, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.index = nn.Parameter(torch.randn(num_keypoints, dim) * 0.02)

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        return self.fc2(swish(self.fc1(pose))) + self.index


class AttentionPool1d(nn.Module):
    """Pool (B, K, e) rows to (B, out_dim) with one attention step from the mean row."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, out_dim)

    def forward(self, rows: torch.Tensor, return_weights: bool = False):
        if rows.shape[-2] < 1:
            raise ValueError("attention pooling needs at least one row")
        query = self.q(rows.mean(dim=-2, keepdim=True))
        pooled, w = scaled_dot_attention(query, self.k(rows), self.v(rows), return_weights=True)
        out = self.proj(pooled.squeeze(-2))
        return (out, w.squeeze(-2)) if return_weights else out


def mlp(in_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))
