"""Noise schedule, forward noising and single reverse steps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

__all__ = ["NoiseSchedule", "make_noise_schedule", "forward_noise", "reverse_step", "sampling_timesteps"]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t) -> Tensor:
        """``alpha_bar`` at ``t`` (float64); ``t < 0`` means the clean signal, i.e. 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t >= self.T).any():
            raise ValueError(f"timestep {t.tolist()} out of range for T={self.T}")
        padded = torch.cat([torch.ones(1, dtype=self.alpha_bars.dtype), self.alpha_bars])
        return padded[t.clamp(min=-1) + 1]

    def check(self, t) -> None:
        t = torch.as_tensor(t)
        if ((t < 0) | (t >= self.T)).any():
            raise ValueError(f"timestep {t.tolist()} outside [0, {self.T})")


def make_noise_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, torch.cumprod(alphas, dim=0))


def _bcast(v: Tensor, like: Tensor) -> Tensor:
    v = v.to(like.dtype)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def forward_noise(schedule: NoiseSchedule, x0: Tensor, t, eps: Tensor) -> Tensor:
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``; ``t`` may be a scalar or one per batch row."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != signal shape {tuple(x0.shape)}")
    ab = _bcast(schedule.alpha_bar(t), x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(schedule: NoiseSchedule, z_t: Tensor, eps: Tensor, t) -> Tensor:
    ab = _bcast(schedule.alpha_bar(t), z_t)
    return (z_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()


def reverse_step(
    schedule: NoiseSchedule,
    z_t: Tensor,
    eps_pred: Tensor,
    t: int,
    mode: str = "ddim",
    step_noise: Tensor | None = None,
    t_prev: int | None = None,
    eta: float = 0.0,
    clip_x0: bool = False,
) -> Tensor:
    """One reverse update from ``t`` to ``t_prev`` (default ``t - 1``).

    ``ddpm`` is the ancestral sampler (posterior mean plus posterior noise);
    ``ddim`` is the implicit sampler, deterministic at ``eta = 0``. Strided
    updates use ``alpha_bar_t / alpha_bar_prev`` as the effective step alpha.
    """
    schedule.check(t)
    t = int(t)
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not -1 <= t_prev < t:
        raise ValueError(f"t_prev must be in [-1, {t}), got {t_prev}")
    if mode not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    ab_t = schedule.alpha_bar(t).item()
    ab_prev = schedule.alpha_bar(t_prev).item()
    x0 = predict_x0(schedule, z_t, eps_pred, t)
    if clip_x0:
        x0 = x0.clamp(-1.0, 1.0)
        eps_pred = (z_t - ab_t**0.5 * x0) / (1.0 - ab_t) ** 0.5

    if mode == "ddpm":
        if t_prev < 0:
            return x0
        if step_noise is None:
            raise ValueError("ddpm mode needs step_noise for t > 0")
        alpha = ab_t / ab_prev
        beta = 1.0 - alpha
        coef_x0 = ab_prev**0.5 * beta / (1.0 - ab_t)
        coef_z = alpha**0.5 * (1.0 - ab_prev) / (1.0 - ab_t)
        var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
        return coef_x0 * x0 + coef_z * z_t + var**0.5 * step_noise

    sigma = 0.0
    if eta > 0 and t_prev >= 0:
        sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)) ** 0.5
    out = ab_prev**0.5 * x0 + max(1.0 - ab_prev - sigma**2, 0.0) ** 0.5 * eps_pred
    if sigma > 0:
        if step_noise is None:
            raise ValueError("ddim with eta > 0 needs step_noise")
        out = out + sigma * step_noise
    return out


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Descending, evenly strided timesteps starting at ``T - 1``."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    stride = T // steps
    return [T - 1 - i * stride for i in range(steps)]
