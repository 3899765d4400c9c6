"""Sliding-window long-video inference.

An ``N``-frame sequence is covered by ``n + 1`` windows of ``K`` frames whose
starts are ``K - s`` apart (consecutive windows share ``s`` frames). When the
last window would run past the end, its tail slots are filled with frames
``0, 1, ...``. At every denoising step each window predicts noise for its
``K`` slots; the predictions are averaged per frame into one ``N``-frame
noise estimate, a single reverse step is applied to the ``N``-frame latent,
and the result is re-sliced for the next step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import Tensor

from animlab.diffusion import AnimationModel, randn
from animlab.errors import ConfigError
from animlab.schedule import reverse_step, sampling_timesteps

__all__ = [
    "FusionConfig",
    "SegmentPlan",
    "animate_long",
    "animate_independent",
    "assign_initial_noise",
    "compose_initial_latent",
    "fuse_predictions",
    "plan_segments",
]

NOISE_MODES = ("shared", "partitioned")


@dataclass(frozen=True)
class SegmentPlan:
    N: int
    K: int
    s: int
    n: int
    starts: tuple[int, ...]
    pad_len: int

    @property
    def windows(self) -> list[list[int]]:
        """Source frame index of every slot of every window."""
        return [[(st + j) if st + j < self.N else (st + j - self.N) for j in range(self.K)]
                for st in self.starts]

    def coverage(self) -> list[int]:
        counts = [0] * self.N
        for w in self.windows:
            for j in w:
                counts[j] += 1
        return counts

    def boundary_pairs(self) -> list[int]:
        """Frames ``j`` such that the covering windows of ``j`` and ``j + 1`` differ."""
        cover = [set() for _ in range(self.N)]
        for wi, st in enumerate(self.starts):
            for j in range(st, min(st + self.K, self.N)):
                cover[j].add(wi)
        return [j for j in range(self.N - 1) if cover[j] != cover[j + 1]]


def plan_segments(N: int, K: int, s: int) -> SegmentPlan:
    """Overlapping window decomposition of ``N`` frames into ``K``-frame segments."""
    if N < 1 or K < 1:
        raise ValueError(f"N and K must be positive, got N={N}, K={K}")
    if K > N:
        raise ValueError(f"segment length K={K} exceeds sequence length N={N}")
    if N == K:
        if s < 0 or (K > 1 and s >= K):
            raise ValueError(f"s must satisfy 0 < s < K, got s={s}, K={K}")
        return SegmentPlan(N, K, s, 0, (0,), 0)
    if not 0 < s < K:
        raise ValueError(f"s must satisfy 0 < s < K, got s={s}, K={K}")
    stride = K - s
    n = math.ceil((N - K) / stride)
    starts = tuple(i * stride for i in range(n + 1))
    pad_len = max(0, starts[-1] + K - N)
    return SegmentPlan(N, K, s, n, starts, pad_len)


@dataclass(frozen=True)
class FusionConfig:
    noise_mode: str = "shared"
    steps: int = 25
    sampler: str = "ddim"
    seed: int = 0
    clip_x0: bool = True
    average_pad_slots: bool = True
    use_temporal: bool = True
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.sampler not in ("ddim", "ddpm"):
            raise ConfigError(f"sampler must be ddim or ddpm, got {self.sampler!r}")


def assign_initial_noise(plan: SegmentPlan, cfg: FusionConfig, channels: int = 3, size: int = 32,
                         dtype: torch.dtype = torch.float32) -> list[Tensor]:
    """Starting latent ``[1, C, K, H, W]`` of every window."""
    if cfg.noise_mode == "shared":
        z = randn((1, channels, plan.K, size, size), cfg.seed, dtype=dtype)
        return [z.clone() for _ in plan.starts]
    z = randn((1, channels, plan.N, size, size), cfg.seed, dtype=dtype)
    return [z[:, :, w] for w in plan.windows]


def compose_initial_latent(window_latents: Sequence[Tensor], plan: SegmentPlan, noise_mode: str) -> Tensor:
    """Fold per-window starting latents into one ``N``-frame latent.

    In partitioned mode every window agrees with the global noise, which is
    returned as is. In shared mode a frame covered by several windows gets
    different slots of the shared tensor; those are independent unit
    Gaussians, so their sum divided by ``sqrt(count)`` is again unit variance.
    """
    first = window_latents[0]
    b, c, _, h, w = first.shape
    out = torch.zeros(b, c, plan.N, h, w, dtype=first.dtype)
    counts = [0] * plan.N
    for lat, frames in zip(window_latents, plan.windows):
        for slot, j in enumerate(frames):
            if noise_mode == "partitioned":
                out[:, :, j] = lat[:, :, slot]
            else:
                out[:, :, j] += lat[:, :, slot]
            counts[j] += 1
    if noise_mode == "shared":
        scale = torch.tensor([1.0 / math.sqrt(k) for k in counts], dtype=first.dtype)
        out = out * scale.view(1, 1, -1, 1, 1)
    return out


def fuse_predictions(per_window_preds: Sequence[Tensor], plan: SegmentPlan,
                     average_pad_slots: bool = True) -> Tensor:
    """Average overlapping window predictions into one ``N``-frame tensor.

    Accumulation runs in ascending window order for every frame so the
    result does not depend on how the predictions were produced.
    """
    if len(per_window_preds) != len(plan.starts):
        raise ValueError(f"expected {len(plan.starts)} window predictions, got {len(per_window_preds)}")
    first = per_window_preds[0]
    if any(p.shape != first.shape for p in per_window_preds) or first.shape[2] != plan.K:
        raise ValueError(f"every prediction must have shape [B, C, {plan.K}, H, W]")
    b, c, _, h, w = first.shape
    total = torch.zeros(b, c, plan.N, h, w, dtype=first.dtype)
    counts = torch.zeros(plan.N, dtype=first.dtype)
    for pred, st, frames in zip(per_window_preds, plan.starts, plan.windows):
        for slot, j in enumerate(frames):
            if not average_pad_slots and st + slot >= plan.N:
                continue
            total[:, :, j] += pred[:, :, slot]
            counts[j] += 1
    return total / counts.view(1, 1, -1, 1, 1)


def _window_poses(poses: Tensor, plan: SegmentPlan) -> list[Tensor]:
    return [poses[:, w] for w in plan.windows]


def _as_pose_batch(p_seq) -> Tensor:
    if not torch.is_tensor(p_seq):
        p_seq = torch.stack([torch.as_tensor(p) for p in p_seq])
    if p_seq.ndim == 4:
        p_seq = p_seq.unsqueeze(0)
    return p_seq


def animate_long(model: AnimationModel | None, i_ref: Tensor, p_seq, cfg: FusionConfig, K: int = 8, s: int = 4,
                 predict: Callable[[Tensor, int, Tensor], Tensor] | None = None) -> Tensor:
    """Generate an ``N``-frame video ``[1, 3, N, H, W]`` in ``[-1, 1]``.

    Args:
        model: trained model (``None`` only when ``predict`` is supplied).
        i_ref: reference image ``[3, H, W]``.
        p_seq: ``N`` pose maps, ``[N, P, H, W]`` or a list.
        cfg: sampler and noise settings.
        K, s: segment length and overlap.
        predict: optional ``(z_window, t, pose_window) -> eps`` override.
    """
    if model is None and predict is None:
        raise ConfigError("animate_long needs a trained model")
    poses = _as_pose_batch(p_seq)
    N = poses.shape[1]
    plan = plan_segments(N, K, s)
    size = poses.shape[-1]
    dtype = model.dtype if model is not None else torch.float32
    if predict is None:
        ref_noise = randn((1, 3, size, size), cfg.seed, dtype=dtype)

        def predict(zw, t, pw):
            return model.predict_noise(zw, t, i_ref, pw, ref_noise=ref_noise, use_temporal=cfg.use_temporal)

    init = assign_initial_noise(plan, cfg, size=size, dtype=dtype)
    z = compose_initial_latent(init, plan, cfg.noise_mode)
    window_poses = _window_poses(poses, plan)
    schedule = model.schedule if model is not None else cfg.extra["schedule"]
    g = torch.Generator().manual_seed(cfg.seed + 1)
    ts = sampling_timesteps(schedule.T, cfg.steps)
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            windows = init if i == 0 else [z[:, :, w] for w in plan.windows]
            preds = [predict(zw, t, pw) for zw, pw in zip(windows, window_poses)]
            eps = fuse_predictions(preds, plan, cfg.average_pad_slots)
            step_noise = None
            if cfg.sampler == "ddpm" and t_prev >= 0:
                step_noise = torch.randn(z.shape, generator=g, dtype=z.dtype)
            z = reverse_step(schedule, z, eps, t, cfg.sampler, step_noise, t_prev=t_prev, clip_x0=cfg.clip_x0)
    return z.clamp(-1.0, 1.0)


def animate_independent(model: AnimationModel, i_ref: Tensor, p_seq, cfg: FusionConfig, K: int = 8) -> Tensor:
    """Baseline without fusion: disjoint ``K``-frame segments denoised separately.

    Every segment is sampled with the same settings and seed, so the only
    difference to :func:`animate_long` is the missing overlap averaging. The
    last segment is padded with the first frames, as in :func:`plan_segments`.
    """
    poses = _as_pose_batch(p_seq)
    N = poses.shape[1]
    if K > N:
        raise ValueError(f"K={K} exceeds N={N}")
    pieces = []
    for start in range(0, N, K):
        idx = [(start + j) % N if start + j >= N else start + j for j in range(K)]
        seg = animate_long(model, i_ref, poses[:, idx], cfg, K=K, s=max(1, K - 1))
        pieces.append(seg[:, :, : min(K, N - start)])
    return torch.cat(pieces, dim=2)
