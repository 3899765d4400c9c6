"""Appearance encoder: reference image -> per-site normalized hidden states."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from animlab.backbone import BackboneConfig, UNet

__all__ = ["AppearanceEmbedding", "AppearanceEncoder", "normalize_hidden"]


def normalize_hidden(h: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token layer normalization over the channel (last) axis, no affine."""
    mean = h.mean(dim=-1, keepdim=True)
    var = h.var(dim=-1, keepdim=True, unbiased=False)
    return (h - mean) / torch.sqrt(var + eps)


@dataclass
class AppearanceEmbedding:
    """Reference tokens for each injection site, ``site -> [B, M, C]``."""

    states: dict[str, Tensor]
    timestep: Tensor

    def __getitem__(self, site: str) -> Tensor:
        return self.states[site]

    def keys(self):
        return self.states.keys()

    def __contains__(self, site: str) -> bool:
        return site in self.states

    def __iter__(self):
        return iter(self.states)


class AppearanceEncoder(nn.Module):
    """A trainable 2D copy of the denoising UNet with independent parameters.

    The encoder runs on the (optionally noised) reference image and records
    the normalized tokens entering each middle and up-block spatial
    attention layer. Only the part of the network up to the last injection
    site is evaluated.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(cfg, temporal=False)
        sites = list(cfg.injection_sites())
        self.sites = tuple(sites)
        self._last_site = sites[-1]

    def forward(self, x: Tensor, t) -> AppearanceEmbedding:
        """Encode an already-noised (or clean) reference batch ``[B, 3, H, W]``."""
        if x.ndim == 3:
            x = x.unsqueeze(0)
        captured: dict[str, Tensor] = {}
        h, skips, temb, ctx = self.unet.encode(x, t, capture=captured)
        if self._last_site != "mid":
            self.unet.decode(h, skips, temb, ctx, stop_after=self._last_site)
        states = {site: normalize_hidden(captured[site]) for site in self.sites}
        return AppearanceEmbedding(states, torch.as_tensor(t))
