"""Adaptive multi-resolution fusion of the low-resolution multimodal map with
the level-2 visual features.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def pixel_shuffle(x: torch.Tensor) -> torch.Tensor:
    """[N, 4c, h, w] -> [N, c, 2h, 2w].

    Channels are read as 4 contiguous groups of ``c``; group ``g`` fills
    offset ``(g // 2, g % 2)`` of each output 2x2 block. So a single cell
    with channels [a, b, c, d] becomes [[a, b], [c, d]].
    """
    n, ch, h, w = x.shape
    if ch % 4:
        raise ValueError(f"channel count {ch} is not divisible by 4")
    c = ch // 4
    return x.reshape(n, 2, 2, c, h, w).permute(0, 3, 4, 1, 5, 2).reshape(n, c, 2 * h, 2 * w)


def pixel_unshuffle(x: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    n, c, hh, ww = x.shape
    if hh % 2 or ww % 2:
        raise ValueError(f"spatial size {(hh, ww)} is not divisible by 2")
    h, w = hh // 2, ww // 2
    return x.reshape(n, c, h, 2, w, 2).permute(0, 3, 5, 1, 2, 4).reshape(n, 4 * c, h, w)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class AdaptiveMultiResFusion(nn.Module):
    """Suppress referent-irrelevant regions of V2, then blend it with the
    upsampled multimodal map through a one-channel intensity gate.

    Parameters
    ----------
    d_m : width of the multimodal map.
    d_2 : width of the level-2 features (also the width of V2').
    c_hr : width of the pixel-shuffled guidance; defaults to ``d_2``.
    """

    def __init__(self, d_m: int = 64, d_2: int = 32, c_hr: int | None = None):
        super().__init__()
        c_hr = c_hr or d_2
        self.refine1 = nn.Conv2d(d_m, d_m, 3, padding=1)
        self.refine2 = nn.Conv2d(d_m, 4 * c_hr, 3, padding=1)
        # bias-free: the norm would cancel it
        self.suppress = nn.Conv2d(c_hr + d_2, d_2, 3, padding=1, bias=False)
        self.norm = nn.InstanceNorm2d(d_2, affine=True)
        self.intensity = nn.Conv2d(d_2 + d_m, 1, 3, padding=1)
        self.fuse = nn.Conv2d(d_m + d_2, d_m, 3, padding=1)

    def suppress_background(self, m_fine: torch.Tensor, v2: torch.Tensor) -> torch.Tensor:
        if v2.shape[-2:] != tuple(2 * s for s in m_fine.shape[-2:]):
            raise ValueError(
                f"V2 resolution {tuple(v2.shape[-2:])} must be twice the multimodal map's {tuple(m_fine.shape[-2:])}"
            )
        c_lr = self.refine2(F.relu(self.refine1(m_fine)))
        c_hr = pixel_shuffle(c_lr)
        return F.relu(self.norm(self.suppress(torch.cat([c_hr, v2], dim=1))))

    def intensity_fuse(self, m_fine: torch.Tensor, v2_prime: torch.Tensor, a2: torch.Tensor | None = None):
        """Returns ``(M_fine', A_2)``. Passing ``a2`` overrides the gate."""
        up = upsample2x(m_fine)
        if up.shape[-2:] != v2_prime.shape[-2:]:
            raise ValueError(f"shape mismatch: {tuple(up.shape)} vs {tuple(v2_prime.shape)}")
        if a2 is None:
            a2 = torch.sigmoid(self.intensity(torch.cat([v2_prime, up], dim=1)))
        return self.fuse(torch.cat([up, a2 * v2_prime], dim=1)), a2

    def forward(self, m_fine: torch.Tensor, v2: torch.Tensor, return_maps: bool = False):
        v2_prime = self.suppress_background(m_fine, v2)
        out, a2 = self.intensity_fuse(m_fine, v2_prime)
        if return_maps:
            return out, {"v2_prime": v2_prime, "intensity": a2}
        return out
