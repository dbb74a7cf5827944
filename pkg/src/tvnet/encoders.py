"""Desk-scale visual backbone and recurrent language encoder."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .core import PAD_INDEX, Config, FeaturePyramid


class ConvNormAct(nn.Sequential):
    """3x3 conv (no bias; the norm removes it) -> per-channel spatial norm
    (learned affine) -> ReLU.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.ReLU(inplace=True),
        )


class Backbone(nn.Module):
    """Five-stage CNN. Stages 1-3 halve the resolution; stages 4-5 keep it
    and widen the receptive field with dilation 2 and 4, so levels 3-5 share
    one resolution and level 2 has twice that.

    The same instance serves both siamese branches.
    """

    def __init__(self, widths=(16, 32, 64, 64, 64), in_ch: int = 3):
        super().__init__()
        strides = (2, 2, 2, 1, 1)
        dilations = (1, 1, 1, 2, 4)
        chans = (in_ch, *widths)
        self.stages = nn.ModuleList(
            ConvNormAct(chans[i], chans[i + 1], strides[i], dilations[i]) for i in range(5)
        )

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        levels = {}
        x = image
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            levels[i] = x
        return FeaturePyramid(levels)

    def siamese(self, a: torch.Tensor, b: torch.Tensor) -> tuple[FeaturePyramid, FeaturePyramid]:
        return self(a), self(b)

    @classmethod
    def from_config(cls, config: Config) -> "Backbone":
        return cls(config.level_widths)


class LanguageEncoder(nn.Module):
    """Embedding -> LSTM over non-padding tokens -> linear projection of the
    final hidden state to ``d_s``.
    """

    def __init__(self, vocab_size: int, embed_dim: int = 32, hidden: int = 64, d_s: int = 64):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_INDEX)
        self.cell = nn.LSTMCell(embed_dim, hidden)
        self.proj = nn.Linear(hidden, d_s)
        self.hidden = hidden

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``tokens``: int64 [N, L] padded with 0. Returns [N, d_s]."""
        if tokens.dim() == 1:
            tokens = tokens[None]
        valid = tokens != PAD_INDEX
        if not valid.any(dim=1).all():
            raise ValueError("every expression needs at least one non-padding token")
        n = tokens.shape[0]
        emb = self.embed(tokens)
        h = emb.new_zeros(n, self.hidden)
        c = emb.new_zeros(n, self.hidden)
        for t in range(tokens.shape[1]):
            h_new, c_new = self.cell(emb[:, t], (h, c))
            keep = valid[:, t : t + 1]
            # padded steps leave the state untouched
            h = torch.where(keep, h_new, h)
            c = torch.where(keep, c_new, c)
        return self.proj(h)

    @classmethod
    def from_config(cls, config: Config) -> "LanguageEncoder":
        return cls(config.vocab_size, config.embed_dim, config.lang_hidden, config.d_s)


def pad_tokens(seqs, max_len: int | None = None) -> torch.Tensor:
    """Right-pad token sequences with ``PAD_INDEX`` into an int64 tensor."""
    seqs = [list(s) for s in seqs]
    length = max(len(s) for s in seqs)
    if max_len is not None:
        if length > max_len:
            raise ValueError(f"expression of length {length} exceeds max_tokens={max_len}")
        length = max_len
    out = torch.full((len(seqs), length), PAD_INDEX, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def image_to_tensor(image) -> torch.Tensor:
    """[H, W, 3] array in [0, 1] -> [1, 3, H, W] float tensor."""
    t = torch.from_numpy(np.array(image, dtype=np.float32))
    if t.dim() != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {tuple(t.shape)}")
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()
