"""Language-vision fusion per level, gated cross-level exchange, and
ConvLSTM aggregation of the three low-resolution levels.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .enrichment import LR_LEVELS

AGGREGATION_ORDER = (5, 4, 3)


def spatial_coords(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """8-channel coordinate map [8, h, w]:
    x_min, y_min, x_center, y_center, x_max, y_max, 1/w, 1/h.

    Positions are cell boundaries/centres normalised to [-1, 1].
    """
    if h < 1 or w < 1:
        raise ValueError("h and w must be >= 1")
    xs = torch.arange(w, dtype=dtype)
    ys = torch.arange(h, dtype=dtype)
    x_min, x_max = 2 * xs / w - 1, 2 * (xs + 1) / w - 1
    y_min, y_max = 2 * ys / h - 1, 2 * (ys + 1) / h - 1
    x_c, y_c = (x_min + x_max) / 2, (y_min + y_max) / 2

    def row(v):
        return v[None, :].expand(h, w)

    def col(v):
        return v[:, None].expand(h, w)

    return torch.stack(
        [
            row(x_min), col(y_min), row(x_c), col(y_c), row(x_max), col(y_max),
            torch.full((h, w), 1.0 / w, dtype=dtype), torch.full((h, w), 1.0 / h, dtype=dtype),
        ]
    )


def _tile(vec: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return vec[:, :, None, None].expand(-1, -1, *like.shape[-2:])


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch: int, hidden: int, kernel_size: int = 3):
        super().__init__()
        self.hidden = hidden
        self.conv = nn.Conv2d(in_ch + hidden, 4 * hidden, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor] | None = None):
        if state is None:
            zeros = x.new_zeros(x.shape[0], self.hidden, *x.shape[-2:])
            state = (zeros, zeros)
        h, c = state
        i, f, o, g = self.conv(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class CrossModalFusion(nn.Module):
    """Bilinear fusion of language with each enriched level, language-guided
    cross-level exchange and recurrent aggregation into one map.

    ``widths`` maps level -> channel width of the incoming visual features.
    """

    def __init__(self, widths: dict[int, int], d_s: int = 64, d_m: int = 64, w4_bias: bool = True):
        super().__init__()
        self.d_m = d_m
        self.w4 = nn.Linear(d_s, d_m, bias=w4_bias)
        self.w5 = nn.Conv2d(d_m, d_m, 1, bias=False)
        self.fuse = nn.ModuleDict({str(l): nn.Conv2d(widths[l] + 8, d_m, 1) for l in LR_LEVELS})
        # shared by all source levels
        self.gate = nn.Conv2d(2 * d_m, d_m, 1)
        self.cell = ConvLSTMCell(d_m, d_m)

    def bilinear_fuse(self, v: torch.Tensor, s: torch.Tensor, level: int) -> torch.Tensor:
        """``(W4 s) * W5(conv([V'; O]))`` then ReLU and per-location L2 norm."""
        coords = spatial_coords(*v.shape[-2:], dtype=v.dtype).to(v.device)
        coords = coords.expand(v.shape[0], -1, -1, -1)
        visual = self.w5(self.fuse[str(level)](torch.cat([v, coords], dim=1)))
        m = _tile(self.w4(s), visual) * visual
        return F.normalize(F.relu(m), dim=1)

    def language_gate(self, m: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(torch.cat([m, _tile(self.w4(s), m)], dim=1)))

    def cross_level_exchange(self, raw: dict[int, torch.Tensor], s: torch.Tensor, return_gates: bool = False):
        shapes = {tuple(m.shape) for m in raw.values()}
        if len(shapes) != 1:
            raise ValueError(f"levels disagree in shape: {sorted(shapes)}")
        gates = {k: self.language_gate(raw[k], s) for k in raw}
        gated = {k: gates[k] * raw[k] for k in raw}
        out = {l: raw[l] + sum(gated[k] for k in raw if k != l) for l in raw}
        return (out, gates) if return_gates else out

    def recurrent_aggregate(self, maps: dict[int, torch.Tensor], order=AGGREGATION_ORDER) -> torch.Tensor:
        state = None
        for l in order:
            state = self.cell(maps[l], state)
        return state[0]

    def forward(self, levels: dict[int, torch.Tensor], s: torch.Tensor, return_maps: bool = False):
        raw = {l: self.bilinear_fuse(levels[l], s, l) for l in LR_LEVELS}
        exchanged, gates = self.cross_level_exchange(raw, s, return_gates=True)
        fine = self.recurrent_aggregate(exchanged)
        if return_maps:
            return fine, {"raw": raw, "exchanged": exchanged, "gates": gates}
        return fine
