"""Offline two-stage retrieval: text shortlist, then best visual match."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import PAD_INDEX, SceneSample
from .synthdata import VOCAB

log = logging.getLogger(__name__)

HIST_BINS = 16
GRID = 4


class ManifestError(ValueError):
    pass


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def embed_text_fixed(tokens: Sequence[int], vocab_size: int = len(VOCAB)) -> np.ndarray:
    """L2-normalised term-frequency vector; padding is ignored."""
    toks = np.asarray(tokens, dtype=np.int64)
    toks = toks[toks != PAD_INDEX]
    if toks.size == 0:
        raise ValueError("cannot embed an expression made only of padding")
    if toks.max() >= vocab_size or toks.min() < 0:
        raise ValueError(f"token index outside vocabulary of size {vocab_size}")
    tf = np.bincount(toks, minlength=vocab_size).astype(np.float64)
    return tf / np.linalg.norm(tf)


def embed_image_fixed(image: np.ndarray) -> np.ndarray:
    """Colour histogram (16 bins per channel) followed by a 4x4 grid of mean
    colours. Each part is normalised before concatenation so neither
    dominates; the result is normalised again.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    hist = np.concatenate(
        [np.histogram(image[..., c], bins=HIST_BINS, range=(0.0, 1.0))[0] for c in range(3)]
    ).astype(np.float64) / (h * w)
    rows = np.array_split(np.arange(h), GRID)
    cols = np.array_split(np.arange(w), GRID)
    grid = np.array([image[np.ix_(r, c)].mean(axis=(0, 1)) for r in rows for c in cols]).ravel()
    out = np.concatenate([_unit(hist), _unit(grid)])
    return _unit(out)


@dataclass(frozen=True)
class RetrievalEntry:
    sample_id: str
    text_embedding: np.ndarray
    visual_embedding: np.ndarray

    @classmethod
    def from_sample(cls, sample: SceneSample, vocab_size: int = len(VOCAB)) -> "RetrievalEntry":
        return cls(sample.sample_id, embed_text_fixed(sample.tokens, vocab_size), embed_image_fixed(sample.image))

    @classmethod
    def from_vectors(cls, sample_id: str, text: np.ndarray, visual: np.ndarray) -> "RetrievalEntry":
        return cls(sample_id, _unit(np.asarray(text, dtype=np.float64)), _unit(np.asarray(visual, dtype=np.float64)))


class RetrievalIndex(Sequence[RetrievalEntry]):
    """Immutable, exhaustive-scan index over pool entries."""

    def __init__(self, entries: Iterable[RetrievalEntry]):
        self.entries = list(entries)
        if not self.entries:
            raise ValueError("retrieval index needs at least one pool entry")
        ids = [e.sample_id for e in self.entries]
        dupes = sorted(i for i, n in Counter(ids).items() if n > 1)
        if dupes:
            raise ValueError(f"duplicate sample ids in pool: {dupes}")
        self.ids = np.array(ids)
        self.text = np.stack([e.text_embedding for e in self.entries])
        self.visual = np.stack([e.visual_embedding for e in self.entries])

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def build_index(pool: Iterable[SceneSample], vocab_size: int = len(VOCAB)) -> RetrievalIndex:
    return RetrievalIndex(RetrievalEntry.from_sample(s, vocab_size) for s in pool)


@dataclass(frozen=True)
class Match:
    match_id: str
    text_score: float
    visual_score: float


TIE_DECIMALS = 12


def _rank(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # descending score, ties broken by smallest id; rounding makes
    # mathematically equal cosines tie despite last-ulp differences
    return np.lexsort((ids, -np.round(scores, TIE_DECIMALS)))


def retrieve(
    query: SceneSample | RetrievalEntry,
    index: RetrievalIndex,
    k: int = 20,
    exclude_self: bool = True,
    vocab_size: int = len(VOCAB),
) -> Match:
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(query, SceneSample):
        query = RetrievalEntry.from_sample(query, vocab_size)
    keep = np.ones(len(index), dtype=bool)
    if exclude_self:
        keep &= index.ids != query.sample_id
    cand = np.flatnonzero(keep)
    if cand.size == 0:
        raise ValueError(f"no candidates left for {query.sample_id} after self-exclusion")
    text_scores = index.text[cand] @ query.text_embedding
    shortlist = cand[_rank(text_scores, index.ids[cand])[:k]]
    vis_scores = index.visual[shortlist] @ query.visual_embedding
    best = shortlist[_rank(vis_scores, index.ids[shortlist])[0]]
    return Match(
        str(index.ids[best]),
        float(index.text[best] @ query.text_embedding),
        float(index.visual[best] @ query.visual_embedding),
    )


class RetrievalManifest(dict):
    """``query_id -> Match``."""

    def validate(self, pool_ids: Iterable[str]) -> None:
        pool_ids = set(pool_ids)
        for q, m in self.items():
            if m.match_id not in pool_ids:
                raise ManifestError(f"manifest entry {q!r} references missing pool id {m.match_id!r}")


def write_manifest(manifest: Mapping[str, Match], path: str | Path) -> None:
    """One ``query<TAB>match<TAB>text_score<TAB>visual_score`` line per query."""
    with open(path, "w") as fh:
        for q in sorted(manifest):
            m = manifest[q]
            fh.write(f"{q}\t{m.match_id}\t{m.text_score:.6f}\t{m.visual_score:.6f}\n")


def read_manifest(path: str | Path, pool_ids: Iterable[str] | None = None) -> RetrievalManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}; run `tvnet index` first")
    manifest = RetrievalManifest()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            manifest[parts[0]] = Match(parts[1], float(parts[2]), float(parts[3]))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: bad score ({exc})") from exc
    if pool_ids is not None:
        manifest.validate(pool_ids)
    return manifest


class TwoStageRetriever(BaseEstimator):
    """Estimator wrapper: ``fit`` indexes a pool, ``predict`` returns match ids.

    Parameters
    ----------
    k : int
        Text shortlist size; clamped to the pool size.
    exclude_self : bool
        Skip pool entries whose id equals the query id.
    """

    def __init__(self, k: int = 20, exclude_self: bool = True, vocab_size: int = len(VOCAB)):
        self.k = k
        self.exclude_self = exclude_self
        self.vocab_size = vocab_size

    def fit(self, pool: Sequence[SceneSample], y=None):
        self.index_ = build_index(pool, self.vocab_size)
        self.k_ = min(self.k, len(self.index_))
        if self.k_ < self.k:
            log.warning("k=%d exceeds pool size %d; clamped", self.k, len(self.index_))
        return self

    def retrieve(self, query: SceneSample) -> Match:
        check_is_fitted(self, "index_")
        return retrieve(query, self.index_, self.k_, self.exclude_self, self.vocab_size)

    def predict(self, queries: Sequence[SceneSample]) -> np.ndarray:
        return np.array([self.retrieve(q).match_id for q in queries])

    def build_manifest(self, queries: Iterable[SceneSample]) -> RetrievalManifest:
        out = RetrievalManifest()
        for q in queries:
            m = self.retrieve(q)
            # round now so the 6-decimal file format round-trips exactly
            out[q.sample_id] = Match(m.match_id, round(m.text_score, 6), round(m.visual_score, 6))
        return out
