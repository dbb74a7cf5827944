"""scikit-learn style wrapper around the segmentation network."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Config, SceneSample, load_checkpoint, save_checkpoint
from .metrics import EvalReport, evaluate_masks
from .model import ModelVariant, TVNet, build_state, predict_mask, predict_scores, train
from .validation import check_masks, check_retrieved, check_samples

log = logging.getLogger(__name__)

_CONFIG_PARAMS = (
    "image_size", "level_widths", "embed_dim", "lang_hidden", "d_s", "d_m", "vocab_size", "max_tokens",
    "retrieval_k", "lr", "lr_power", "weight_decay", "max_iter", "threshold",
)


class TVNetSegmenter(BaseEstimator):
    """Referring segmenter with the usual ``fit`` / ``predict`` surface.

    ``X`` is a sequence of :class:`~tvnet.core.SceneSample`. Variants that
    use retrieval also take ``retrieved``: a mapping from sample id to the
    retrieved pool sample, or a sequence parallel to ``X``.

    Examples
    --------
    >>> seg = TVNetSegmenter(variant="full", max_iter=200)
    >>> seg.fit(train, retrieved=matches)            # doctest: +SKIP
    >>> masks = seg.predict(val, retrieved=matches)  # doctest: +SKIP
    """

    def __init__(
        self,
        variant: str = "full",
        image_size: int = 64,
        level_widths: tuple = (16, 32, 64, 64, 64),
        embed_dim: int = 32,
        lang_hidden: int = 64,
        d_s: int = 64,
        d_m: int = 64,
        vocab_size: int = 18,
        max_tokens: int = 12,
        retrieval_k: int = 20,
        lr: float = 0.00025,
        lr_power: float = 0.9,
        weight_decay: float = 0.0005,
        max_iter: int = 2000,
        threshold: float = 0.5,
        random_state: int = 0,
        verbose: int = 0,
    ):
        self.variant = variant
        self.image_size = image_size
        self.level_widths = level_widths
        self.embed_dim = embed_dim
        self.lang_hidden = lang_hidden
        self.d_s = d_s
        self.d_m = d_m
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.retrieval_k = retrieval_k
        self.lr = lr
        self.lr_power = lr_power
        self.weight_decay = weight_decay
        self.max_iter = max_iter
        self.threshold = threshold
        self.random_state = random_state
        self.verbose = verbose

    def make_config(self) -> Config:
        s = self.image_size
        return Config(
            level_sizes=(s // 2, s // 4, s // 8, s // 8, s // 8),
            seed=self.random_state,
            **{k: getattr(self, k) for k in _CONFIG_PARAMS},
        )

    @classmethod
    def from_config(cls, config: Config, variant: str = "full", **kw) -> "TVNetSegmenter":
        params = {k: getattr(config, k) for k in _CONFIG_PARAMS}
        return cls(variant=variant, random_state=config.seed, **params, **kw)

    @property
    def variant_(self) -> ModelVariant:
        return ModelVariant(self.variant)

    def fit(self, X, y=None, retrieved=None):
        X = check_samples(X)
        masks = check_masks(y, X)
        variant = self.variant_
        retrieved = check_retrieved(X, retrieved, variant.uses_res)
        if y is not None:
            X = [SceneSample(s.sample_id, s.image, m, s.tokens, s.meta) for s, m in zip(X, masks)]
        self.config_ = self.make_config()
        log_every = 100 if self.verbose else 0
        self.state_ = train(X, retrieved, variant, self.config_, log_every=log_every)
        self.model_ = self.state_.model
        self.loss_history_ = list(self.state_.losses)
        self.n_iter_ = self.state_.iteration
        return self

    def init_untrained(self):
        """Set up a seeded, untrained model (as after ``fit`` with 0 steps)."""
        self.config_ = self.make_config()
        self.state_ = build_state(self.config_, self.variant_)
        self.model_ = self.state_.model
        self.loss_history_, self.n_iter_ = [], 0
        return self

    def decision_function(self, X, retrieved=None) -> np.ndarray:
        """Per-pixel foreground logits [N, H, W]."""
        check_is_fitted(self, "model_")
        X = check_samples(X)
        retrieved = check_retrieved(X, retrieved, self.variant_.uses_res)
        return predict_scores(self.model_, X, retrieved)

    def predict_proba(self, X, retrieved=None) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X, retrieved)))

    def predict(self, X, retrieved=None) -> np.ndarray:
        """Binary masks [N, H, W] (uint8)."""
        return predict_mask(self.decision_function(X, retrieved), self.threshold)

    def evaluate(self, X, y=None, retrieved=None) -> EvalReport:
        X = check_samples(X)
        masks = check_masks(y, X)
        return evaluate_masks(list(self.predict(X, retrieved)), masks)

    def score(self, X, y=None, retrieved=None) -> float:
        """Overall IoU over ``X``."""
        return self.evaluate(X, y, retrieved).overall_iou

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(
            self.model_.state_dict(),
            path,
            self.config_,
            extra={"variant": self.variant_.value, "n_iter": self.n_iter_},
        )

    @classmethod
    def load(cls, path: str | Path) -> "TVNetSegmenter":
        params, config, extra = load_checkpoint(path)
        if config is None:
            raise ValueError(f"{path}: checkpoint carries no config")
        est = cls.from_config(config, variant=extra.get("variant", "full"))
        est.config_ = config
        est.model_ = TVNet(config, est.variant_)
        est.model_.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
        est.n_iter_ = int(extra.get("n_iter", 0))
        return est
