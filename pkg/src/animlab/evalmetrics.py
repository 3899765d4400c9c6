"""Pixel-level video metrics: L1, foreground L1, PSNR, SSIM and a flicker proxy.

Videos are arrays shaped ``[N, 3, H, W]`` (a leading batch axis is allowed).
PSNR and SSIM rescale inputs from ``value_range`` to ``[0, 1]`` first.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

__all__ = ["MetricReport", "flicker", "l1", "psnr", "ssim", "evaluate_clip", "write_report"]


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _unit(x: np.ndarray, value_range: tuple[float, float]) -> np.ndarray:
    lo, hi = value_range
    return (x - lo) / (hi - lo)


def l1(a, b, mask=None) -> float:
    """Mean absolute difference, optionally restricted to ``mask``.

    ``mask`` is broadcast against the trailing ``(H, W)`` axes (or any
    broadcastable shape); only elements where it is nonzero count.
    """
    a, b = _pair(a, b)
    diff = np.abs(a - b)
    if mask is None:
        return float(diff.mean())
    mask = np.asarray(mask).astype(bool)
    if mask.shape[-2:] != a.shape[-2:]:
        raise ValueError(f"mask spatial shape {mask.shape[-2:]} does not match {a.shape[-2:]}")
    if mask.ndim == a.ndim - 1 and mask.shape[0] == a.shape[0]:
        mask = mask[:, None]
    mask = np.broadcast_to(mask, a.shape)
    if not mask.any():
        return 0.0
    return float(diff[mask].mean())


def psnr(a, b, value_range: tuple[float, float] = (-1.0, 1.0)) -> float:
    """``10 log10(1 / MSE)`` on unit-range data, ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((_unit(a, value_range) - _unit(b, value_range)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(x: np.ndarray, y: np.ndarray, win: np.ndarray, c1: float, c2: float) -> float:
    def filt(img):
        return convolve2d(img, win, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, value_range: tuple[float, float] = (-1.0, 1.0), window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM averaged over every ``(H, W)`` plane (channels, frames)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or min(a.shape[-2:]) < window:
        raise ValueError(f"images must be at least {window}x{window}")
    x = _unit(a, value_range).reshape(-1, *a.shape[-2:])
    y = _unit(b, value_range).reshape(-1, *b.shape[-2:])
    win = _gaussian_window(window, sigma)
    c1, c2 = k1**2, k2**2
    return float(np.mean([_ssim_plane(xi, yi, win, c1, c2) for xi, yi in zip(x, y)]))


def flicker(video, axis: int = 0) -> float:
    """Mean over consecutive frame pairs of the mean absolute frame difference."""
    v = np.asarray(video, dtype=np.float64)
    if v.shape[axis] < 2:
        raise ValueError("flicker needs at least two frames")
    return float(np.abs(np.diff(v, axis=axis)).mean())


def boundary_discontinuity(video, pairs, axis: int = 0) -> float:
    """Mean ``|frame[j+1] - frame[j]|`` over the listed ``j``."""
    v = np.moveaxis(np.asarray(video, dtype=np.float64), axis, 0)
    return float(np.mean([np.abs(v[j + 1] - v[j]).mean() for j in pairs]))


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    KEYS = ("l1", "l1_fg", "psnr", "ssim", "flicker")

    def add(self, name: str, values: dict) -> None:
        self.rows.append({"clip": name, **values})

    def mean(self) -> dict:
        return {k: float(np.mean([r[k] for r in self.rows])) for k in self.KEYS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("clip",) + self.KEYS)
        for r in self.rows + [{"clip": "mean", **self.mean()}]:
            w.writerow([r["clip"]] + [f"{r[k]:.6f}" for k in self.KEYS])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'clip':<24}" + "".join(f"{k:>10}" for k in self.KEYS)
        lines = [head, "-" * len(head)]
        for r in self.rows + [{"clip": "mean", **self.mean()}]:
            lines.append(f"{r['clip']:<24}" + "".join(f"{r[k]:>10.4f}" for k in self.KEYS))
        return "\n".join(lines)


def evaluate_clip(pred, gt, pose=None) -> dict:
    """All metrics for one clip; ``pose`` ``[N, P, H, W]`` defines the foreground."""
    pred, gt = _pair(pred, gt)
    fg = None if pose is None else np.asarray(pose).any(axis=-3)
    return {
        "l1": l1(pred, gt),
        "l1_fg": l1(pred, gt, fg) if fg is not None else float("nan"),
        "psnr": psnr(pred, gt),
        "ssim": ssim(pred, gt),
        "flicker": flicker(pred) if pred.shape[0] > 1 else 0.0,
    }


def write_report(report: MetricReport, path: Path) -> None:
    Path(path).write_text(report.to_csv())
