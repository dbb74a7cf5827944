"""Cross-image attention and gated enrichment over the low-resolution levels."""

from __future__ import annotations

import torch
import torch.nn as nn

from .core import FeaturePyramid

LR_LEVELS = (3, 4, 5)


def cross_image_attention(
    v_in: torch.Tensor, v_sim: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor, w3: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Embedded-Gaussian attention from input locations to retrieved ones.

    ``v_in``, ``v_sim``: [N, P, d] (P flattened locations); ``w*``: [d, d]
    applied position-wise as ``v @ w.T``. Returns ``(out, attn)`` with
    ``attn`` [N, P_in, P_sim], each row a softmax over the retrieved image.
    No 1/sqrt(d) scaling.
    """
    if v_in.shape[-1] != v_sim.shape[-1]:
        raise ValueError(f"width mismatch: {v_in.shape[-1]} vs {v_sim.shape[-1]}")
    q = v_in @ w1.T
    k = v_sim @ w2.T
    v = v_sim @ w3.T
    attn = torch.softmax(q @ k.transpose(1, 2), dim=-1)
    return attn @ v, attn


def gated_enrich(v_in: torch.Tensor, v_sim_prime: torch.Tensor, gate: nn.Conv2d) -> tuple[torch.Tensor, torch.Tensor]:
    """``V' = V_in + sigmoid(conv1x1(V_in)) * V_sim'`` on [N, d, h, w] maps.

    Returns ``(V', gate_values)``.
    """
    if v_in.shape != v_sim_prime.shape:
        raise ValueError(f"shape mismatch: {tuple(v_in.shape)} vs {tuple(v_sim_prime.shape)}")
    g = torch.sigmoid(gate(v_in))
    return v_in + g * v_sim_prime, g


def _flatten(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


class LevelEnrichment(nn.Module):
    """Attention + gate for one pyramid level of width ``d``."""

    def __init__(self, d: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d, d))
        self.w2 = nn.Parameter(torch.empty(d, d))
        self.w3 = nn.Parameter(torch.empty(d, d))
        self.gate = nn.Conv2d(d, d, 1)
        for w in (self.w1, self.w2, self.w3):
            nn.init.normal_(w, std=d**-0.5)

    def forward(self, v_in: torch.Tensor, v_sim: torch.Tensor, return_maps: bool = False):
        n, d, h, w = v_in.shape
        if v_sim.shape != v_in.shape:
            raise ValueError(f"input {tuple(v_in.shape)} and retrieved {tuple(v_sim.shape)} features differ")
        out, attn = cross_image_attention(_flatten(v_in), _flatten(v_sim), self.w1, self.w2, self.w3)
        v_sim_prime = out.transpose(1, 2).reshape(n, d, h, w)
        enriched, g = gated_enrich(v_in, v_sim_prime, self.gate)
        if return_maps:
            return enriched, {"attention": attn, "gate": g}
        return enriched


class Enrichment(nn.Module):
    """Independent :class:`LevelEnrichment` at levels 3, 4 and 5."""

    def __init__(self, widths: dict[int, int]):
        super().__init__()
        self.levels = nn.ModuleDict({str(l): LevelEnrichment(widths[l]) for l in LR_LEVELS})

    def forward(self, pyr_in: FeaturePyramid, pyr_sim: FeaturePyramid, return_maps: bool = False):
        """Returns enriched ``{3: V'_3, 4: V'_4, 5: V'_5}``; other levels are
        left to the caller unchanged.
        """
        out, maps = {}, {}
        for l in LR_LEVELS:
            res = self.levels[str(l)](pyr_in[l], pyr_sim[l], return_maps)
            if return_maps:
                out[l], maps[l] = res
            else:
                out[l] = res
        return (out, maps) if return_maps else out


def enrich_pyramid(pyr_in: FeaturePyramid, pyr_sim: FeaturePyramid, module: Enrichment) -> FeaturePyramid:
    levels = dict(pyr_in.levels)
    levels.update(module(pyr_in, pyr_sim))
    return FeaturePyramid(levels)
