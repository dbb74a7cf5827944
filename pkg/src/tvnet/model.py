"""Full network, prediction head, loss and training loop."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .amf import AdaptiveMultiResFusion
from .core import Config, SceneSample, seed_all
from .crossmodal import CrossModalFusion
from .encoders import Backbone, LanguageEncoder, image_to_tensor, pad_tokens
from .enrichment import LR_LEVELS, Enrichment

log = logging.getLogger(__name__)

# initial foreground prior for the head bias; foreground is rare
_FG_PRIOR = 0.1


class ModelVariant(str, enum.Enum):
    BASELINE = "baseline"
    BASELINE_RES = "baseline_res"
    FULL = "full"

    @property
    def uses_res(self) -> bool:
        return self is not ModelVariant.BASELINE

    @property
    def uses_amf(self) -> bool:
        return self is ModelVariant.FULL


class TVNet(nn.Module):
    """All submodules are always built so variants can share weights;
    ``active_modules`` lists the ones a variant actually runs.
    """

    def __init__(self, config: Config, variant: ModelVariant | str = ModelVariant.FULL):
        super().__init__()
        self.config = config
        self.variant = ModelVariant(variant)
        widths = dict(enumerate(config.level_widths, start=1))
        self.backbone = Backbone.from_config(config)
        self.language = LanguageEncoder.from_config(config)
        self.enrichment = Enrichment(widths)
        self.fusion = CrossModalFusion(widths, config.d_s, config.d_m)
        self.amf = AdaptiveMultiResFusion(config.d_m, widths[2])
        self.head = nn.Conv2d(config.d_m, 1, 1)
        nn.init.constant_(self.head.bias, math.log(_FG_PRIOR / (1 - _FG_PRIOR)))

    def active_modules(self) -> dict[str, nn.Module]:
        mods = {"backbone": self.backbone, "language": self.language, "fusion": self.fusion, "head": self.head}
        if self.variant.uses_res:
            mods["enrichment"] = self.enrichment
        if self.variant.uses_amf:
            mods["amf"] = self.amf
        return mods

    def active_parameters(self) -> dict[str, nn.Parameter]:
        return {
            f"{name}.{p_name}": p
            for name, mod in self.active_modules().items()
            for p_name, p in mod.named_parameters()
        }

    def forward(
        self,
        image: torch.Tensor,
        tokens: torch.Tensor,
        sim_image: torch.Tensor | None = None,
        return_maps: bool = False,
    ):
        """``image``/``sim_image``: [N, 3, H, W]; ``tokens``: [N, L].
        Returns per-pixel foreground logits [N, H, W].
        """
        size = self.config.image_size
        if tuple(image.shape[-3:]) != (3, size, size):
            raise ValueError(f"image must be [N, 3, {size}, {size}], got {tuple(image.shape)}")
        if self.variant.uses_res and sim_image is None:
            raise ValueError(f"variant {self.variant.value} needs a retrieved image")
        if not self.variant.uses_res and sim_image is not None:
            raise ValueError("baseline variant takes no retrieved image")
        maps = {}
        pyr = self.backbone(image)
        levels = {l: pyr[l] for l in LR_LEVELS}
        if self.variant.uses_res:
            if tuple(sim_image.shape) != tuple(image.shape):
                raise ValueError("retrieved image shape differs from the input image")
            pyr_sim = self.backbone(sim_image)
            levels, maps["enrichment"] = self.enrichment(pyr, pyr_sim, return_maps=True)
        s = self.language(tokens)
        fine, maps["fusion"] = self.fusion(levels, s, return_maps=True)
        if self.variant.uses_amf:
            fine, maps["amf"] = self.amf(fine, pyr[2], return_maps=True)
        logits = self.head(fine)
        logits = F.interpolate(logits, size=(size, size), mode="bilinear", align_corners=False)[:, 0]
        return (logits, maps) if return_maps else logits


def bce_loss(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy on logits (log-sum-exp stable)."""
    if scores.shape != mask.shape:
        raise ValueError(f"score map {tuple(scores.shape)} and mask {tuple(mask.shape)} differ")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    return F.binary_cross_entropy_with_logits(scores, mask.to(scores.dtype))


def predict_mask(scores, threshold: float = 0.5) -> np.ndarray:
    """``sigmoid(score) > threshold`` as a uint8 mask."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    scores = torch.as_tensor(scores)
    return (torch.sigmoid(scores) > threshold).to(torch.uint8).numpy()


def poly_lr(base: float, t: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        return 0.0
    return base * max(0.0, 1.0 - t / total) ** power


@dataclass
class Prepared:
    image: torch.Tensor
    tokens: torch.Tensor
    mask: torch.Tensor
    sim_image: torch.Tensor | None


def prepare(
    samples: Sequence[SceneSample],
    retrieved: Mapping[str, SceneSample] | None,
    variant: ModelVariant,
    config: Config,
) -> list[Prepared]:
    out = []
    for s in samples:
        s.check_vocab(config.vocab_size)
        sim = None
        if variant.uses_res:
            if retrieved is None or s.sample_id not in retrieved:
                raise KeyError(f"no retrieved sample for {s.sample_id}; rebuild the manifest with `tvnet index`")
            sim = image_to_tensor(retrieved[s.sample_id].image)
        out.append(
            Prepared(
                image_to_tensor(s.image),
                pad_tokens([s.tokens], config.max_tokens),
                torch.from_numpy(s.mask.astype(np.float32))[None],
                sim,
            )
        )
    return out


@dataclass
class TrainState:
    model: TVNet
    optimizer: torch.optim.Optimizer
    base_lr: float
    iteration: int = 0
    losses: list[float] = field(default_factory=list)
    rng: np.random.Generator | None = None

    def lr_at(self, t: int) -> float:
        return poly_lr(self.base_lr, t, self.model.config.max_iter, self.model.config.lr_power)


def build_state(config: Config, variant: ModelVariant | str) -> TrainState:
    rng = seed_all(config.seed)
    model = TVNet(config, variant)
    params = list(model.active_parameters().values())
    # decoupled weight decay
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    return TrainState(model, opt, config.lr, rng=rng)


def train(
    samples: Sequence[SceneSample],
    retrieved: Mapping[str, SceneSample] | None,
    variant: ModelVariant | str,
    config: Config,
    state: TrainState | None = None,
    callback: Callable[[TrainState], None] | None = None,
    log_every: int = 0,
) -> TrainState:
    """Batch-size-1 AdamW with polynomial decay over ``config.max_iter``
    steps, visiting samples in a seeded shuffled order each epoch.

    ``callback`` runs after every step with the live state (gradients still
    attached).
    """
    variant = ModelVariant(variant)
    if not samples:
        raise ValueError("training set is empty")
    state = state or build_state(config, variant)
    data = prepare(samples, retrieved, variant, config)
    model = state.model
    model.train()
    order: list[int] = []
    t0 = time.perf_counter()
    while state.iteration < config.max_iter:
        if not order:
            order = list(state.rng.permutation(len(data)))
        item = data[order.pop()]
        lr = state.lr_at(state.iteration)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        state.optimizer.zero_grad(set_to_none=True)
        scores = model(item.image, item.tokens, item.sim_image)
        loss = bce_loss(scores, item.mask)
        loss.backward()
        state.optimizer.step()
        state.iteration += 1
        state.losses.append(float(loss.detach()))
        if callback is not None:
            callback(state)
        if log_every and state.iteration % log_every == 0:
            recent = np.mean(state.losses[-log_every:])
            log.info("iter %d/%d loss %.4f lr %.2e (%.1fs)", state.iteration, config.max_iter, recent, lr,
                     time.perf_counter() - t0)
    return state


@torch.no_grad()
def predict_scores(
    model: TVNet,
    samples: Sequence[SceneSample],
    retrieved: Mapping[str, SceneSample] | None = None,
) -> np.ndarray:
    """Logit maps [N, H, W] for ``samples``."""
    model.eval()
    data = prepare(samples, retrieved, model.variant, model.config)
    out = [model(d.image, d.tokens, d.sim_image)[0].numpy() for d in data]
    return np.stack(out) if out else np.zeros((0, model.config.image_size, model.config.image_size), np.float32)


def write_loss_history(losses: Sequence[float], path) -> None:
    with open(path, "w") as fh:
        for i, loss in enumerate(losses, start=1):
            fh.write(f"{i}\t{loss:.8f}\n")


def read_loss_history(path) -> list[float]:
    rows = [line.split("\t") for line in open(path).read().splitlines() if line.strip()]
    return [float(r[1]) for r in rows]
