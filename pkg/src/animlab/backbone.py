"""Denoising UNet with spatial (hybrid) and temporal attention.

The same :class:`UNet` class backs three networks:

* the temporal denoising backbone (``temporal=True``),
* the appearance encoder (a 2D copy, see :mod:`animlab.appearance`),
* the pose conditioner's encoder half (see :mod:`animlab.pose_control`).

Feature maps travel through the network with frames folded into the batch
axis, ``[(B*K), C, H, W]``. Temporal layers unfold them to
``[B, C, K, H, W]`` and attend along ``K`` at every spatial location.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from animlab.errors import ConfigError

__all__ = [
    "BackboneConfig",
    "SpatialAttention",
    "TemporalAttention",
    "UNet",
    "sinusoidal_position_encoding",
    "timestep_embedding",
]


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    num_res_blocks_per_level: int = 1
    attention_resolutions: tuple[int, ...] = (16,)
    temporal_pe_max_len: int = 32
    image_size: int = 32
    in_channels: int = 3
    pose_channels: int = 6
    norm_groups: int = 8
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.base_channels < 8:
            raise ConfigError("base_channels must be >= 8")
        mults = tuple(self.channel_multipliers)
        if not mults or any(b < a for a, b in zip(mults, mults[1:])):
            raise ConfigError("channel_multipliers must be non-empty and nondecreasing")
        if self.num_res_blocks_per_level < 1:
            raise ConfigError("num_res_blocks_per_level must be >= 1")
        if self.image_size % (2 ** len(mults)) != 0:
            raise ConfigError("image_size must be divisible by 2**levels")
        if self.temporal_pe_max_len < 1:
            raise ConfigError("temporal_pe_max_len must be >= 1")
        if self.base_channels % self.norm_groups != 0:
            raise ConfigError("base_channels must be divisible by norm_groups")
        object.__setattr__(self, "channel_multipliers", mults)
        object.__setattr__(self, "attention_resolutions", tuple(self.attention_resolutions))

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.channel_multipliers[level]

    def level_resolution(self, level: int) -> int:
        return self.image_size // (2**level)

    @property
    def mid_resolution(self) -> int:
        return self.image_size // (2**self.num_levels)

    @property
    def time_embed_dim(self) -> int:
        return 4 * self.base_channels

    def has_attention(self, level: int) -> bool:
        return self.level_resolution(level) in self.attention_resolutions

    def skip_shapes(self) -> list[tuple[int, int]]:
        """(channels, resolution) of every skip connection, in push order."""
        shapes = [(self.base_channels, self.image_size)]
        for level in range(self.num_levels):
            ch, res = self.level_channels(level), self.level_resolution(level)
            shapes += [(ch, res)] * self.num_res_blocks_per_level
            if level != self.num_levels - 1:
                shapes.append((ch, res // 2))
        return shapes

    def residual_sites(self) -> dict[str, tuple[int, int]]:
        """Pose-residual sites: every skip feeding the up path, plus the middle block."""
        sites = {f"skip{i}": shape for i, shape in enumerate(self.skip_shapes())}
        sites["mid"] = (self.level_channels(self.num_levels - 1), self.mid_resolution)
        return sites

    def attention_sites(self) -> dict[str, tuple[int, int]]:
        """Every spatial-attention site as name -> (channels, resolution)."""
        sites = {}
        for level in range(self.num_levels):
            if self.has_attention(level):
                for b in range(self.num_res_blocks_per_level):
                    sites[f"down{level}.{b}"] = (self.level_channels(level), self.level_resolution(level))
        sites["mid"] = (self.level_channels(self.num_levels - 1), self.mid_resolution)
        for level in reversed(range(self.num_levels)):
            if self.has_attention(level):
                for b in range(self.num_res_blocks_per_level + 1):
                    sites[f"up{level}.{b}"] = (self.level_channels(level), self.level_resolution(level))
        return sites

    def injection_sites(self) -> dict[str, tuple[int, int]]:
        """Appearance-injection sites: spatial attention in the middle and up blocks."""
        return {k: v for k, v in self.attention_sites().items() if not k.startswith("down")}


def sinusoidal_position_encoding(length: int, dim: int) -> Tensor:
    """Sinusoidal frame-position table of shape ``[length, dim]``.

    Column ``2i`` holds ``sin(p / 10000**(2i/dim))`` and column ``2i+1`` the
    matching cosine.
    """
    if length < 1 or dim < 2 or dim % 2:
        raise ValueError(f"need length >= 1 and even dim >= 2, got length={length}, dim={dim}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = 10000.0 ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.empty(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / freq)
    pe[:, 1::2] = torch.cos(pos / freq)
    return pe


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TemporalAttention(nn.Module):
    """Single-head self-attention along the frame axis.

    Input and output are ``[B, C, K, H, W]``. Each ``(b, h, w)`` location is
    an independent length-``K`` sequence; a sinusoidal frame-position code is
    added before the projections. The output projection starts at zero so a
    freshly inserted layer is an identity map.
    """

    def __init__(self, channels: int, max_len: int = 32):
        super().__init__()
        self.channels = channels
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)
        self.register_buffer("pe", sinusoidal_position_encoding(max_len, channels), persistent=False)

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 5 or f.shape[1] != self.channels:
            raise ValueError(f"expected [N, {self.channels}, K, H, W], got {tuple(f.shape)}")
        n, c, k, h, w = f.shape
        if k > self.pe.shape[0]:
            raise ValueError(f"segment length {k} exceeds positional table length {self.pe.shape[0]}")
        seq = f.permute(0, 3, 4, 2, 1).reshape(n * h * w, k, c)
        x = seq + self.pe[:k].to(seq.dtype)
        q, key, v = self.to_q(x), self.to_k(x), self.to_v(x)
        attn = torch.softmax(q @ key.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.to_out(attn @ v)
        out = out.reshape(n, h, w, k, c).permute(0, 4, 3, 1, 2)
        return f + out


class SpatialAttention(nn.Module):
    """Single-head spatial self-attention with optional reference tokens.

    With ``ref`` given, keys and values are computed over the concatenation
    of the feature map's own tokens and the reference tokens; queries come
    from the feature map only.
    """

    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.channels = channels
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def tokens(self, f: Tensor) -> Tensor:
        """Normalized ``[B, HW, C]`` tokens, i.e. what the projections see."""
        b, c, h, w = f.shape
        return self.norm(f).reshape(b, c, h * w).transpose(1, 2)

    def forward(self, f: Tensor, ref: Tensor | None = None, capture: list | None = None) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ValueError(f"expected [B, {self.channels}, H, W], got {tuple(f.shape)}")
        b, c, h, w = f.shape
        x = self.tokens(f)
        if capture is not None:
            capture.append(f.reshape(b, c, h * w).transpose(1, 2))
        ctx = x
        if ref is not None:
            if ref.ndim == 2:
                ref = ref.unsqueeze(0).expand(b, -1, -1)
            if ref.shape[-1] != c:
                raise ValueError(f"reference tokens have width {ref.shape[-1]}, features have {c}")
            if ref.shape[0] != b:
                raise ValueError(f"reference batch {ref.shape[0]} does not match feature batch {b}")
            ctx = torch.cat([x, ref.to(x.dtype)], dim=1)
        q, key, v = self.to_q(x), self.to_k(ctx), self.to_v(ctx)
        attn = torch.softmax(q @ key.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.to_out(attn @ v)
        return f + out.transpose(1, 2).reshape(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class _Stage(nn.Module):
    """One resolution level: res blocks, each optionally followed by attention."""

    def __init__(self, cfg: BackboneConfig, in_chs: list[int], out_ch: int, attn: bool, temporal: bool):
        super().__init__()
        g = cfg.norm_groups
        self.res = nn.ModuleList(ResBlock(c, out_ch, cfg.time_embed_dim, g) for c in in_chs)
        self.attn = nn.ModuleList(SpatialAttention(out_ch, g) for _ in in_chs) if attn else None
        self.temporal = (
            nn.ModuleList(TemporalAttention(out_ch, cfg.temporal_pe_max_len) for _ in in_chs)
            if attn and temporal
            else None
        )


class UNet(nn.Module):
    """Small UNet over frames folded into the batch axis.

    Args:
        cfg: architecture description.
        temporal: insert a temporal attention layer after every spatial one
            (and in the middle block).
        decoder: build the up path and output head. The pose conditioner
            only needs the encoder half.
        input_channels: channels of the network input (defaults to ``cfg.in_channels``).
    """

    def __init__(self, cfg: BackboneConfig, temporal: bool = False, decoder: bool = True,
                 input_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.temporal = temporal
        self.decoder = decoder
        base, g = cfg.base_channels, cfg.norm_groups
        temb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(input_channels or cfg.in_channels, base, 3, padding=1)

        skip_chs = [base]
        ch = base
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        nres = cfg.num_res_blocks_per_level
        for level in range(cfg.num_levels):
            out = cfg.level_channels(level)
            stage = _Stage(cfg, [ch] + [out] * (nres - 1), out, cfg.has_attention(level), temporal)
            self.down.append(stage)
            ch = out
            skip_chs += [ch] * nres
            self.downsample.append(Downsample(ch))
            if level != cfg.num_levels - 1:
                skip_chs.append(ch)

        self.mid_res1 = ResBlock(ch, ch, temb, g)
        self.mid_attn = SpatialAttention(ch, g)
        self.mid_temporal = TemporalAttention(ch, cfg.temporal_pe_max_len) if temporal else None
        self.mid_res2 = ResBlock(ch, ch, temb, g)

        if decoder:
            self.up = nn.ModuleList()
            self.upsample = nn.ModuleList()
            for level in reversed(range(cfg.num_levels)):
                out = cfg.level_channels(level)
                self.upsample.append(Upsample(ch))
                in_chs = []
                for _ in range(nres + 1):
                    in_chs.append(ch + skip_chs.pop())
                    ch = out
                self.up.append(_Stage(cfg, in_chs, out, cfg.has_attention(level), temporal))
            self.norm_out = nn.GroupNorm(g, ch)
            self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def time_embedding(self, t: Tensor, batch: int) -> Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        emb = timestep_embedding(t, self.cfg.base_channels).to(self.conv_in.weight.dtype)
        return self.time_mlp(emb)

    def _temporal(self, layer: TemporalAttention, h: Tensor, frames: int) -> Tensor:
        bk, c, hh, ww = h.shape
        f = h.reshape(bk // frames, frames, c, hh, ww).transpose(1, 2)
        return layer(f).transpose(1, 2).reshape(bk, c, hh, ww)

    def _block(self, stage: _Stage, i: int, h: Tensor, temb: Tensor, site: str, ctx: dict) -> Tensor:
        h = stage.res[i](h, temb)
        if stage.attn is not None:
            h = self._attend(stage.attn[i], h, site, ctx)
            if stage.temporal is not None and ctx["use_temporal"]:
                h = self._temporal(stage.temporal[i], h, ctx["frames"])
        return h

    def _attend(self, layer: SpatialAttention, h: Tensor, site: str, ctx: dict) -> Tensor:
        ref = None
        appearance = ctx["appearance"]
        if appearance is not None and site in appearance:
            ref = appearance[site]
            if ref.ndim == 2:
                ref = ref.unsqueeze(0)
            if ref.shape[0] != h.shape[0]:
                ref = ref.repeat_interleave(h.shape[0] // ref.shape[0], dim=0)
        captured = ctx["capture"]
        if captured is not None:
            buf = []
            out = layer(h, ref, capture=buf)
            captured[site] = buf[0]
            return out
        return layer(h, ref)

    def encode(self, x: Tensor, t: Tensor, frames: int = 1, extra_input: Tensor | None = None,
               appearance: Mapping[str, Tensor] | None = None, capture: dict | None = None,
               use_temporal: bool = True):
        """Run the encoder half and middle block.

        Returns ``(mid, skips, temb)`` where ``skips`` is a list of feature
        maps in push order.
        """
        temb = self.time_embedding(t, x.shape[0])
        if temb.shape[0] != x.shape[0]:
            temb = temb.repeat_interleave(x.shape[0] // temb.shape[0], dim=0)
        ctx = {"appearance": appearance, "capture": capture, "frames": frames,
               "use_temporal": use_temporal and self.temporal}
        h = self.conv_in(x)
        if extra_input is not None:
            h = h + extra_input
        skips = [h]
        for level, stage in enumerate(self.down):
            for i in range(len(stage.res)):
                h = self._block(stage, i, h, temb, f"down{level}.{i}", ctx)
                skips.append(h)
            h = self.downsample[level](h)
            if level != len(self.down) - 1:
                skips.append(h)
        h = self.mid_res1(h, temb)
        h = self._attend(self.mid_attn, h, "mid", ctx)
        if self.mid_temporal is not None and ctx["use_temporal"]:
            h = self._temporal(self.mid_temporal, h, frames)
        h = self.mid_res2(h, temb)
        return h, skips, temb, ctx

    def decode(self, h: Tensor, skips: list[Tensor], temb: Tensor, ctx: dict,
               stop_after: str | None = None) -> Tensor | None:
        skips = list(skips)
        nlev = len(self.up)
        for j, stage in enumerate(self.up):
            level = nlev - 1 - j
            h = self.upsample[j](h)
            for i in range(len(stage.res)):
                h = torch.cat([h, skips.pop()], dim=1)
                site = f"up{level}.{i}"
                h = self._block(stage, i, h, temb, site, ctx)
                if site == stop_after:
                    return None
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward_frames(self, x: Tensor, t: Tensor, frames: int = 1,
                       appearance: Mapping[str, Tensor] | None = None,
                       residuals: Mapping[str, Tensor] | None = None,
                       use_temporal: bool = True) -> Tensor:
        """Forward on frame-folded input ``[(B*K), C, H, W]``."""
        h, skips, temb, ctx = self.encode(x, t, frames, appearance=appearance, use_temporal=use_temporal)
        if residuals is not None:
            skips = [s + residuals[f"skip{i}"] for i, s in enumerate(skips)]
            h = h + residuals["mid"]
        return self.decode(h, skips, temb, ctx)

    def forward(self, z: Tensor, t, appearance: Mapping[str, Tensor] | None = None,
                pose_residuals: Mapping[str, Tensor] | None = None,
                use_temporal: bool = True) -> Tensor:
        """Noise prediction for a segment ``z`` of shape ``[B, C, K, H, W]``.

        Args:
            z: noisy segment.
            t: timestep, scalar or one per batch element.
            appearance: site -> ``[B, M, C]`` (or ``[M, C]``) reference tokens.
                Must cover every injection site when given.
            pose_residuals: site -> ``[B, C, K, h, w]`` residuals. Must cover
                every residual site when given.
            use_temporal: run temporal layers (stage-1 training disables them).
        """
        if z.ndim != 5:
            raise ValueError(f"expected [B, C, K, H, W], got {tuple(z.shape)}")
        b, c, k, h, w = z.shape
        if appearance is not None:
            missing = sorted(set(self.cfg.injection_sites()) - set(appearance))
            if missing:
                raise ConfigError(f"appearance embedding is missing injection sites: {missing}")
        flat_res = None
        if pose_residuals is not None:
            missing = sorted(set(self.cfg.residual_sites()) - set(pose_residuals))
            if missing:
                raise ConfigError(f"pose residuals are missing sites: {missing}")
            flat_res = {name: fold_frames(r) for name, r in pose_residuals.items()}
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == b and b > 1:
            t = t.repeat_interleave(k)
        out = self.forward_frames(fold_frames(z), t, k, appearance, flat_res, use_temporal)
        return unfold_frames(out, k)

    def temporal_parameters(self):
        return [p for n, p in self.named_parameters() if is_temporal_param(n)]


def is_temporal_param(name: str) -> bool:
    """True for parameters that belong to a temporal attention layer."""
    return ".temporal." in f".{name}" or name.startswith("mid_temporal.")


def fold_frames(z: Tensor) -> Tensor:
    """``[B, C, K, H, W] -> [(B*K), C, H, W]``."""
    b, c, k, h, w = z.shape
    return z.transpose(1, 2).reshape(b * k, c, h, w)


def unfold_frames(x: Tensor, frames: int) -> Tensor:
    """``[(B*K), C, H, W] -> [B, C, K, H, W]``."""
    bk, c, h, w = x.shape
    return x.reshape(bk // frames, frames, c, h, w).transpose(1, 2)
