"""Pose conditioner: dense part maps -> additive residuals for the backbone."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from animlab.backbone import BackboneConfig, UNet, fold_frames, unfold_frames

__all__ = ["PoseControlNet", "zero_conv"]


def zero_conv(in_ch: int, out_ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class PoseEmbedder(nn.Module):
    """Three convs from one-hot part channels to the UNet's base width."""

    def __init__(self, pose_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(pose_channels, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.conv3 = nn.Conv2d(32, out_channels, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, p: Tensor) -> Tensor:
        return self.conv3(F.silu(self.conv2(F.silu(self.conv1(p)))))


class PoseControlNet(nn.Module):
    """Encoder half + middle block of the UNet, driven by ``z_t`` and a pose map.

    Every output residual passes through a zero-initialized 1x1 conv, so an
    untrained conditioner contributes exactly zero.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(cfg, temporal=False, decoder=False)
        self.pose_embed = PoseEmbedder(cfg.pose_channels, cfg.base_channels)
        sites = cfg.residual_sites()
        self.site_names = tuple(sites)
        self.zero_convs = nn.ModuleDict({name: zero_conv(ch, ch) for name, (ch, _) in sites.items()})

    def forward(self, z_frames: Tensor, pose: Tensor, t) -> dict[str, Tensor]:
        """Residuals for a batch of single frames.

        Args:
            z_frames: ``[B, 3, H, W]`` noisy frames.
            pose: ``[B, P, H, W]`` one-hot part maps.
            t: timestep(s).

        Returns:
            site -> ``[B, C, h, w]`` residual.
        """
        if z_frames.ndim == 3:
            z_frames = z_frames.unsqueeze(0)
        if pose.ndim == 3:
            pose = pose.unsqueeze(0)
        if pose.shape[-2:] != z_frames.shape[-2:]:
            raise ValueError(
                f"pose map spatial size {tuple(pose.shape[-2:])} does not match latent {tuple(z_frames.shape[-2:])}"
            )
        if pose.shape[1] != self.cfg.pose_channels:
            raise ValueError(f"expected {self.cfg.pose_channels} pose channels, got {pose.shape[1]}")
        extra = self.pose_embed(pose.to(z_frames.dtype))
        h, skips, _, _ = self.unet.encode(z_frames, t, extra_input=extra)
        out = {f"skip{i}": self.zero_convs[f"skip{i}"](s) for i, s in enumerate(skips)}
        out["mid"] = self.zero_convs["mid"](h)
        return out

    def encode_sequence(self, z: Tensor, poses: Tensor | Sequence[Tensor], t) -> dict[str, Tensor]:
        """Frame-wise residuals for a segment, stacked on the frame axis.

        Args:
            z: ``[B, 3, K, H, W]`` noisy segment.
            poses: ``[B, K, P, H, W]`` (or a length-K list of ``[P, H, W]`` maps when B == 1).
            t: timestep(s), scalar or one per batch element.

        Returns:
            site -> ``[B, C, K, h, w]``.
        """
        if not torch.is_tensor(poses):
            poses = torch.stack(list(poses)).unsqueeze(0)
        if poses.ndim == 4:
            poses = poses.unsqueeze(0)
        b, _, k = z.shape[:3]
        if poses.shape[1] != k:
            raise ValueError(f"pose sequence has {poses.shape[1]} frames, segment has {k}")
        if poses.shape[0] != b:
            raise ValueError(f"pose batch {poses.shape[0]} does not match segment batch {b}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == b and b > 1:
            t = t.repeat_interleave(k)
        flat_pose = poses.reshape(b * k, *poses.shape[2:])
        res = self(fold_frames(z), flat_pose, t)
        return {name: unfold_frames(r, k) for name, r in res.items()}
