"""Composed noise estimator, training losses and the single-segment sampler."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from animlab.appearance import AppearanceEmbedding, AppearanceEncoder
from animlab.backbone import BackboneConfig, UNet, is_temporal_param
from animlab.pose_control import PoseControlNet
from animlab.schedule import NoiseSchedule, forward_noise, reverse_step, sampling_timesteps

__all__ = ["AnimationModel", "stage1_loss", "stage2_loss", "sample_segment", "randn"]


def randn(shape, seed: int | None = None, generator: torch.Generator | None = None,
          dtype: torch.dtype = torch.float32) -> Tensor:
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed or 0))
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


class AnimationModel(nn.Module):
    """Temporal backbone + appearance encoder + pose conditioner.

    Args:
        cfg: shared architecture of all three networks.
        schedule: noise schedule used to noise the reference image.
        clean_reference: feed the clean reference (t = 0 path) to the
            appearance encoder instead of noising it to the current step.
        copy_init: initialize the appearance encoder and pose conditioner
            from the backbone's 2D weights.
        input_skip: return ``sqrt(1 - ab_t) * z + sqrt(ab_t) * unet(z)``
            instead of the raw UNet output. The target is still the noise,
            but the network's error no longer reaches the implied clean
            image amplified by ``1 / sqrt(ab_t)`` at high noise levels.
    """

    def __init__(self, cfg: BackboneConfig, schedule: NoiseSchedule, clean_reference: bool = True,
                 copy_init: bool = True, input_skip: bool = True):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule
        self.clean_reference = clean_reference
        self.input_skip = input_skip
        self.backbone = UNet(cfg, temporal=True)
        self.appearance = AppearanceEncoder(cfg)
        self.pose_net = PoseControlNet(cfg)
        if copy_init:
            spatial = {k: v for k, v in self.backbone.state_dict().items() if not is_temporal_param(k)}
            self.appearance.unet.load_state_dict(spatial)
            enc_keys = set(self.pose_net.unet.state_dict())
            self.pose_net.unet.load_state_dict({k: v for k, v in spatial.items() if k in enc_keys})

    @property
    def dtype(self) -> torch.dtype:
        return self.backbone.conv_in.weight.dtype

    def param_groups(self) -> dict[str, list[str]]:
        """Parameter names by role: temporal layers, 2D backbone, appearance, pose."""
        groups: dict[str, list[str]] = {"temporal": [], "spatial": [], "appearance": [], "pose": []}
        for name, _ in self.named_parameters():
            if name.startswith("backbone."):
                groups["temporal" if is_temporal_param(name[len("backbone."):]) else "spatial"].append(name)
            elif name.startswith("appearance."):
                groups["appearance"].append(name)
            else:
                groups["pose"].append(name)
        return groups

    def encode_appearance(self, i_ref: Tensor, t, noise_seed: int | None = 0,
                          noise: Tensor | None = None) -> AppearanceEmbedding:
        """Hidden states of the reference at step ``t``.

        The reference is q-sampled to ``t`` with ``noise`` (or noise drawn
        from ``noise_seed``). A model built with ``clean_reference`` instead
        encodes the clean image at step 0 for every ``t``.
        """
        if i_ref.ndim == 3:
            i_ref = i_ref.unsqueeze(0)
        i_ref = i_ref.to(self.dtype)
        t = torch.as_tensor(t)
        self.schedule.check(t)
        if self.clean_reference:
            x, t = i_ref, torch.zeros_like(t)
        else:
            if noise is None:
                noise = randn(i_ref.shape, noise_seed, dtype=self.dtype)
            x = forward_noise(self.schedule, i_ref, t, noise.to(self.dtype))
        return self.appearance(x, t)

    def stack_pose_sequence(self, poses: Tensor | Sequence[Tensor], z: Tensor, t) -> dict[str, Tensor]:
        return self.pose_net.encode_sequence(z, poses, t)

    def predict_noise(self, z: Tensor, t, i_ref: Tensor, poses: Tensor | Sequence[Tensor],
                      ref_noise: Tensor | None = None, noise_seed: int | None = 0,
                      use_temporal: bool = True, use_appearance: bool = True,
                      use_pose: bool = True) -> Tensor:
        """Noise prediction for a segment ``z`` of shape ``[B, 3, K, H, W]``."""
        self.schedule.check(t)
        y_a = self.encode_appearance(i_ref, t, noise_seed, ref_noise).states if use_appearance else None
        y_p = self.stack_pose_sequence(poses, z, t) if use_pose else None
        out = self.backbone(z, t, y_a, y_p, use_temporal=use_temporal)
        if not self.input_skip:
            return out
        ab = torch.as_tensor(self.schedule.alpha_bars, dtype=z.dtype)[torch.as_tensor(t)]
        ab = ab.reshape(-1, *([1] * (z.ndim - 1))) if ab.ndim else ab
        return (1.0 - ab).sqrt() * z + ab.sqrt() * out


def _mse(pred: Tensor, target: Tensor) -> Tensor:
    return F.mse_loss(pred, target)


def stage1_loss(model: AnimationModel, refs: Tensor, targets: Tensor, poses: Tensor, t: Tensor,
                eps: Tensor, ref_noise: Tensor | None = None) -> Tensor:
    """Noise-regression loss on single frames, temporal layers skipped.

    Args:
        refs: ``[B, 3, H, W]`` reference images.
        targets: ``[B, 3, H, W]`` frames to denoise.
        poses: ``[B, P, H, W]`` pose maps of the targets.
        t: ``[B]`` timesteps.
        eps: ``[B, 3, H, W]`` noise.
    """
    if targets.shape[0] == 0:
        raise ValueError("stage-1 batch is empty")
    x0 = targets.unsqueeze(2)
    z = forward_noise(model.schedule, x0, t, eps.unsqueeze(2))
    pred = model.predict_noise(z, t, refs, poses.unsqueeze(1), ref_noise=ref_noise, use_temporal=False)
    return _mse(pred, eps.unsqueeze(2))


def stage2_loss(model: AnimationModel, refs: Tensor, clips: Tensor, poses: Tensor, t: Tensor,
                eps: Tensor, frames: int, ref_noise: Tensor | None = None) -> Tensor:
    """Noise-regression loss on ``frames``-long clips through the temporal network.

    Args:
        clips: ``[B, 3, K, H, W]``.
        poses: ``[B, K, P, H, W]``.
        eps: same shape as ``clips``.
        frames: required clip length ``K``.
    """
    if clips.shape[0] == 0:
        raise ValueError("stage-2 batch is empty")
    if clips.shape[2] != frames:
        raise ValueError(f"clips must have exactly {frames} frames, got {clips.shape[2]}")
    z = forward_noise(model.schedule, clips, t, eps)
    pred = model.predict_noise(z, t, refs, poses, ref_noise=ref_noise, use_temporal=True)
    return _mse(pred, eps)


@torch.no_grad()
def sample_segment(model: AnimationModel, i_ref: Tensor, poses: Tensor, noise: Tensor, steps: int = 25,
                   mode: str = "ddim", seed: int = 0, clip_x0: bool = True,
                   use_temporal: bool = True,
                   predict: Callable[..., Tensor] | None = None) -> Tensor:
    """Denoise one ``K``-frame segment from ``noise`` (``[1, 3, K, H, W]``).

    Returns the final sample clamped to ``[-1, 1]``.
    """
    schedule = model.schedule
    g = torch.Generator().manual_seed(seed + 1)
    ref_noise = randn(i_ref.reshape(1, *i_ref.shape[-3:]).shape, seed, dtype=model.dtype)
    z = noise.to(model.dtype)
    ts = sampling_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        if predict is None:
            eps = model.predict_noise(z, t, i_ref, poses, ref_noise=ref_noise, use_temporal=use_temporal)
        else:
            eps = predict(z, t)
        step_noise = torch.randn(z.shape, generator=g, dtype=z.dtype) if mode == "ddpm" and t_prev >= 0 else None
        z = reverse_step(schedule, z, eps, t, mode, step_noise, t_prev=t_prev, clip_x0=clip_x0)
    return z.clamp(-1.0, 1.0)
