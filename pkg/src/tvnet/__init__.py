"""Retrieval-enriched referring image segmentation.

Main entry points: :class:`TVNetSegmenter` (estimator API),
:class:`TwoStageRetriever`, :func:`build_corpus` and the ``tvnet`` CLI.
"""

from .core import CheckpointError, Config, ConfigError, SceneSample, load_checkpoint, save_checkpoint
from .estimator import TVNetSegmenter
from .metrics import EvalReport, evaluate_masks, overall_iou, prec_at_x, size_bucket
from .model import ModelVariant, TVNet
from .retrieval import RetrievalIndex, TwoStageRetriever, build_index, retrieve
from .synthdata import Corpus, build_corpus, load_corpus

__all__ = [
    "CheckpointError", "Config", "ConfigError", "Corpus", "EvalReport", "ModelVariant", "RetrievalIndex",
    "SceneSample", "TVNet", "TVNetSegmenter", "TwoStageRetriever", "build_corpus", "build_index",
    "evaluate_masks", "load_checkpoint", "load_corpus", "overall_iou", "prec_at_x", "retrieve",
    "save_checkpoint", "size_bucket",
]
__version__ = "0.1.0"
