"""Denoiser networks.

Three variants share one UNet trunk:

* ``parallel``: person-UNet on concat(z_t, I_a[, low_res]) plus a garment-UNet on
  I_c, coupled by cross attention at the attention resolutions. The garment
  decoder stops once it has produced the last feature map the person side needs.
* ``concat``: a single UNet on concat(z_t, I_a, I_c[, low_res]); self attention
  with pose tokens kept, no garment stream and no cross attention.
* ``efficient``: residual blocks only, conditioned on an upsampled low-res image.
  Fully convolutional, so it runs at any resolution divisible through its pyramid.

All variants are called as ``model(z_t, t, cond) -> eps_hat``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import NUM_KEYPOINTS, ConditioningBundle
from .layers import (
    AttentionPool1d,
    CrossAttention,
    PoseEncoder,
    PoseSelfAttention,
    ResBlock,
    group_norm,
    mlp,
    swish,
    timestep_encoding,
    zero_module,
)

VARIANTS = ("parallel", "concat", "efficient")


@dataclass(frozen=True)
class UNetConfig:
    resolutions: tuple = (32, 16, 8, 4)
    channels: tuple = (64, 128, 256, 512)
    block_repeats: tuple = (2, 2, 2, 2)
    attention_resolutions: tuple = (8, 4)
    garment_unet_stop_resolution: int = 8
    num_heads: int = 4
    pose_embed_dim: int = 64
    emb_dim: int = 256
    time_encoding_dim: int = 64
    variant: str = "parallel"
    use_agnostic: bool = True
    low_res: bool = False

    def __post_init__(self):
        for name in ("resolutions", "channels", "block_repeats", "attention_resolutions"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        problems = self.violations()
        if problems:
            raise ValueError("invalid UNetConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        r = self.resolutions
        if not r or list(r) != sorted(r, reverse=True) or len(set(r)) != len(r):
            out.append("resolutions must be strictly descending")
        if len(self.channels) != len(r) or len(self.block_repeats) != len(r):
            out.append("channels and block_repeats need one entry per resolution")
        if any(c < 1 for c in self.channels) or any(n < 1 for n in self.block_repeats):
            out.append("channels and block repeats must be positive")
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}")
        if self.variant == "efficient":
            if self.attention_resolutions:
                out.append("the efficient variant has no attention")
            if not self.low_res:
                out.append("the efficient variant needs low_res conditioning")
            return out
        if not set(self.attention_resolutions) <= set(r):
            out.append("attention_resolutions must be a subset of resolutions")
        if self.garment_unet_stop_resolution not in r:
            out.append("garment_unet_stop_resolution must be one of the resolutions")
        elif self.attention_resolutions and self.garment_unet_stop_resolution < max(self.attention_resolutions):
            out.append("garment UNet must not stop below the highest attention resolution")
        for res, c in zip(r, self.channels):
            if res in self.attention_resolutions and c % self.num_heads:
                out.append(f"channels {c} at resolution {res} not divisible by num_heads")
        return out

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    def scaled(self, width: float) -> "UNetConfig":
        return dataclasses.replace(self, channels=tuple(int(c * width) for c in self.channels))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def noise_aug_keys(cfg: UNetConfig) -> tuple:
    """Conditioning images the model receives, each with its own t_na embedding."""
    if cfg.variant == "efficient":
        return ("low_res",)
    keys = (("agnostic_rgb",) if cfg.use_agnostic else ()) + ("garment",)
    return keys + (("low_res",) if cfg.low_res else ())


class LevelBlock(nn.Module):
    """One UNet block: residual block, then optional pose self attention and cross attention."""

    def __init__(self, in_ch, out_ch, cfg: UNetConfig, self_attn: bool, cross_attn: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.emb_dim)
        self.self_attn = PoseSelfAttention(out_ch, cfg.num_heads, cfg.pose_embed_dim) if self_attn else None
        self.cross_attn = CrossAttention(out_ch, cfg.num_heads) if cross_attn else None

    def forward(self, h, emb, pose_tokens=None, pose_mask=None, garment=None):
        h = self.res(h, emb)
        if self.self_attn is not None:
            h = self.self_attn(h, pose_tokens, pose_mask)
        if self.cross_attn is not None:
            if garment is None:
                raise ValueError("cross attention block received no garment features")
            h = self.cross_attn(h, garment)
        return h


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, h):
        return self.conv(h)


class Upsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, h):
        return self.conv(F.interpolate(h, scale_factor=2, mode="nearest"))


class UNetTrunk(nn.Module):
    """Encoder-decoder over ``cfg.resolutions``.

    Args:
        cfg: architecture config.
        in_ch: input channels of the first convolution.
        self_attn: add pose self attention at the attention resolutions.
        cross_attn: add cross attention at the attention resolutions.
        stop_resolution: if set, the decoder ends after the blocks at this
            resolution and the trunk returns its per-block features instead of
            an output image.
    """

    def __init__(self, cfg: UNetConfig, in_ch: int, self_attn: bool, cross_attn: bool, stop_resolution=None):
        super().__init__()
        self.cfg = cfg
        self.stop_resolution = stop_resolution
        res, ch, rep = cfg.resolutions, cfg.channels, cfg.block_repeats
        attn = set(cfg.attention_resolutions)
        self.input_conv = nn.Conv2d(in_ch, ch[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for i in range(cfg.levels):
            a = res[i] in attn
            blocks = nn.ModuleList()
            for j in range(rep[i]):
                blocks.append(LevelBlock(prev if j == 0 else ch[i], ch[i], cfg, self_attn and a, cross_attn and a))
            prev = ch[i]
            self.down.append(blocks)
            if i < cfg.levels - 1:
                self.downsample.append(Downsample(ch[i]))

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        self.up_levels = []
        for i in reversed(range(cfg.levels)):
            a = res[i] in attn
            blocks = nn.ModuleList()
            for j in range(rep[i]):
                blocks.append(LevelBlock(2 * ch[i] if j == 0 else ch[i], ch[i], cfg, self_attn and a, cross_attn and a))
            self.up.append(blocks)
            self.up_levels.append(i)
            if stop_resolution is not None and res[i] == stop_resolution:
                break
            if i > 0:
                self.upsample.append(Upsample(ch[i], ch[i - 1]))

        if stop_resolution is None:
            self.head = nn.Sequential(group_norm(ch[0]), nn.SiLU(), zero_module(nn.Conv2d(ch[0], 3, 3, padding=1)))
        else:
            self.head = None

    def forward(self, x, emb, pose_tokens=None, pose_mask=None, garment_feats: Optional[dict] = None):
        res = self.cfg.resolutions
        collect = self.head is None
        emit = set(self.cfg.attention_resolutions)
        feats = {}
        garment_feats = garment_feats or {}

        def run(blocks, h, phase, i):
            for j, blk in enumerate(blocks):
                key = (phase, res[i], j)
                h = blk(h, emb, pose_tokens, pose_mask, garment_feats.get(key))
                if collect and res[i] in emit:
                    feats[key] = h
            return h

        f = 2 ** (self.cfg.levels - 1)
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"input size {tuple(x.shape[-2:])} does not divide through {self.cfg.levels} levels")
        h = self.input_conv(x)
        skips = []
        for i, blocks in enumerate(self.down):
            h = run(blocks, h, "down", i)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        for k, (i, blocks) in enumerate(zip(self.up_levels, self.up)):
            h = run(blocks, torch.cat([h, skips[i]], dim=1), "up", i)
            if k < len(self.upsample):
                h = self.upsample[k](h)
        return feats if collect else self.head(h)


class ConditionEmbedding(nn.Module):
    """Sum of encoded t, encoded noise-augmentation levels and pooled pose embeddings.

    Also returns the per-keypoint pose tokens (person then garment) and a mask
    marking invisible keypoints, for the pose self-attention layers.
    """

    def __init__(self, cfg: UNetConfig, use_pose: bool):
        super().__init__()
        self.cfg = cfg
        self.keys = noise_aug_keys(cfg)
        self.t_mlp = mlp(cfg.time_encoding_dim, cfg.emb_dim)
        self.t_na_mlp = nn.ModuleDict({k: mlp(cfg.time_encoding_dim, cfg.emb_dim) for k in self.keys})
        self.use_pose = use_pose
        if use_pose:
            e = cfg.pose_embed_dim
            self.person_pose = PoseEncoder(e)
            self.garment_pose = PoseEncoder(e)
            self.person_pool = AttentionPool1d(e, cfg.emb_dim)
            self.garment_pool = AttentionPool1d(e, cfg.emb_dim)

    def forward(self, t: torch.Tensor, cond: Optional[ConditioningBundle], batch: int, dtype):
        t = torch.as_tensor(t, dtype=dtype)
        if t.ndim == 0:
            t = t.expand(batch)
        d = self.cfg.time_encoding_dim
        emb = self.t_mlp(timestep_encoding(t, d))
        levels = cond.noise_aug_levels if cond is not None else {}
        for k in self.keys:
            lvl = levels.get(k)
            lvl = torch.zeros(batch, dtype=dtype) if lvl is None else torch.as_tensor(lvl, dtype=dtype).expand(batch)
            emb = emb + self.t_na_mlp[k](timestep_encoding(lvl, d))
        if not self.use_pose:
            return emb, None, None
        jp = cond.person_pose.to(dtype)
        jg = cond.garment_pose.to(dtype)
        tok_p, tok_g = self.person_pose(jp), self.garment_pose(jg)
        emb = emb + self.person_pool(tok_p) + self.garment_pool(tok_g)
        tokens = torch.cat([tok_p, tok_g], dim=1)
        mask = torch.cat([jp[..., 2] <= 0, jg[..., 2] <= 0], dim=1)
        return emb, tokens, mask


class TryOnUNet(nn.Module):
    """Try-on denoiser in the ``parallel`` or ``concat`` layout."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        if cfg.variant not in ("parallel", "concat"):
            raise ValueError(f"TryOnUNet does not build variant {cfg.variant!r}")
        self.cfg = cfg
        in_ch = 3 + 3 * cfg.use_agnostic + 3 * cfg.low_res + 3 * (cfg.variant == "concat")
        self.in_channels = in_ch
        self.embed = ConditionEmbedding(cfg, use_pose=True)
        parallel = cfg.variant == "parallel"
        self.person_unet = UNetTrunk(cfg, in_ch, self_attn=True, cross_attn=parallel)
        self.garment_unet = (
            UNetTrunk(cfg, 3, self_attn=False, cross_attn=False, stop_resolution=cfg.garment_unet_stop_resolution)
            if parallel
            else None
        )

    def person_input(self, z_t, cond: ConditioningBundle) -> torch.Tensor:
        parts = [z_t]
        if self.cfg.use_agnostic:
            parts.append(cond.agnostic_rgb)
        if self.cfg.variant == "concat":
            parts.append(cond.garment)
        if self.cfg.low_res:
            if cond.low_res is None:
                raise ValueError("super-resolution stage called without low_res conditioning")
            parts.append(F.interpolate(cond.low_res, size=z_t.shape[-2:], mode="bilinear", align_corners=False))
        return torch.cat([p.to(z_t.dtype) for p in parts], dim=1)

    def garment_features(self, garment, emb) -> dict:
        return self.garment_unet(garment, emb)

    def forward(self, z_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
        emb, tokens, mask = self.embed(t, cond, z_t.shape[0], z_t.dtype)
        garment_feats = None
        if self.garment_unet is not None:
            garment_feats = self.garment_features(cond.garment.to(z_t.dtype), emb)
        return self.person_unet(self.person_input(z_t, cond), emb, tokens, mask, garment_feats)


class EfficientSRUNet(nn.Module):
    """Attention-free super-resolution denoiser on concat(z_t, upsampled low_res)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        if cfg.variant != "efficient":
            raise ValueError("EfficientSRUNet needs variant 'efficient'")
        self.cfg = cfg
        self.embed = ConditionEmbedding(cfg, use_pose=False)
        self.unet = UNetTrunk(cfg, 6, self_attn=False, cross_attn=False)

    def forward(self, z_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
        if cond is None or cond.low_res is None:
            raise ValueError("super-resolution stage called without low_res conditioning")
        emb, _, _ = self.embed(t, cond, z_t.shape[0], z_t.dtype)
        up = F.interpolate(cond.low_res.to(z_t.dtype), size=z_t.shape[-2:], mode="bilinear", align_corners=False)
        return self.unet(torch.cat([z_t, up], dim=1), emb)


def build_model(cfg: UNetConfig) -> nn.Module:
    return EfficientSRUNet(cfg) if cfg.variant == "efficient" else TryOnUNet(cfg)


def _shape_count(cfg: UNetConfig) -> tuple[int, int]:
    """(total, conv-only) parameter counts computed from layer shapes."""
    E, e = cfg.emb_dim, cfg.pose_embed_dim
    conv = 0
    total = 0

    def conv2d(cin, cout, k):
        nonlocal conv, total
        n = k * k * cin * cout + cout
        conv += n
        total += n

    def dense(cin, cout):
        nonlocal total
        total += cin * cout + cout

    def norm(c):
        nonlocal total
        total += 2 * c

    def res_block(cin, cout):
        norm(cin), dense(E, 2 * cin), conv2d(cin, cout, 3)
        norm(cout), dense(E, 2 * cout), conv2d(cout, cout, 3), conv2d(cin, cout, 1)

    def trunk(in_ch, self_attn, cross_attn, stop=None):
        res, ch, rep = cfg.resolutions, cfg.channels, cfg.block_repeats
        attn = set(cfg.attention_resolutions)

        def block(cin, cout, a):
            res_block(cin, cout)
            if self_attn and a:
                norm(cout), dense(cout, 3 * cout), dense(e, 2 * cout), dense(cout, cout)
            if cross_attn and a:
                norm(cout), norm(cout), dense(cout, cout), dense(cout, 2 * cout), dense(cout, cout)

        conv2d(in_ch, ch[0], 3)
        prev = ch[0]
        for i in range(cfg.levels):
            for j in range(rep[i]):
                block(prev if j == 0 else ch[i], ch[i], res[i] in attn)
            prev = ch[i]
            if i < cfg.levels - 1:
                conv2d(ch[i], ch[i], 3)
        for i in reversed(range(cfg.levels)):
            for j in range(rep[i]):
                block(2 * ch[i] if j == 0 else ch[i], ch[i], res[i] in attn)
            if stop is not None and res[i] == stop:
                return
            if i > 0:
                conv2d(ch[i], ch[i - 1], 3)
        norm(ch[0]), conv2d(ch[0], 3, 3)

    for _ in range(1 + len(noise_aug_keys(cfg))):
        dense(cfg.time_encoding_dim, E), dense(E, E)
    if cfg.variant == "efficient":
        trunk(6, False, False)
        return total, conv
    for _ in range(2):
        dense(3, e), dense(e, e)
        total += NUM_KEYPOINTS * e
        for _ in range(3):
            dense(e, e)
        dense(e, E)
    in_ch = 3 + 3 * cfg.use_agnostic + 3 * cfg.low_res + 3 * (cfg.variant == "concat")
    trunk(in_ch, True, cfg.variant == "parallel")
    if cfg.variant == "parallel":
        trunk(3, False, False, stop=cfg.garment_unet_stop_resolution)
    return total, conv


def param_count(cfg: UNetConfig, variant: Optional[str] = None, conv_only: bool = False) -> int:
    """Trainable parameters of the network ``cfg`` describes, from layer shapes alone."""
    if variant is not None and variant != cfg.variant:
        cfg = dataclasses.replace(cfg, variant=variant)
    total, conv = _shape_count(cfg)
    return conv if conv_only else total


def built_param_count(cfg: UNetConfig, conv_only: bool = False) -> int:
    """Same count taken from a network instantiated on the meta device (no storage)."""
    with torch.device("meta"):
        model = build_model(cfg)
    if conv_only:
        return sum(p.numel() for m in model.modules() if isinstance(m, nn.Conv2d) for p in m.parameters())
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def param_breakdown(cfg: UNetConfig) -> dict:
    """Per-submodule parameter totals (top-level children)."""
    with torch.device("meta"):
        model = build_model(cfg)
    out = {name: sum(p.numel() for p in child.parameters()) for name, child in model.named_children()}
    out["total"] = sum(out.values())
    return out
