"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .core import SceneSample


def check_samples(X, name: str = "X") -> list[SceneSample]:
    if isinstance(X, SceneSample):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError(f"{name} is empty")
    bad = [type(x).__name__ for x in X if not isinstance(x, SceneSample)]
    if bad:
        raise TypeError(f"{name} must contain SceneSample objects, got {sorted(set(bad))}")
    ids = [x.sample_id for x in X]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{name} contains duplicate sample ids")
    return X


def check_masks(y, samples: Sequence[SceneSample]) -> list[np.ndarray]:
    """Default to the samples' own masks when ``y`` is None."""
    if y is None:
        return [s.mask for s in samples]
    y = [np.asarray(m) for m in y]
    if len(y) != len(samples):
        raise ValueError(f"got {len(y)} masks for {len(samples)} samples")
    for m, s in zip(y, samples):
        if m.shape != s.mask.shape:
            raise ValueError(f"{s.sample_id}: mask shape {m.shape} != {s.mask.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{s.sample_id}: mask must be binary")
    return y


def check_retrieved(
    samples: Sequence[SceneSample], retrieved, needed: bool
) -> Mapping[str, SceneSample] | None:
    """Accepts a mapping ``sample_id -> SceneSample`` or a parallel sequence."""
    if not needed:
        if retrieved is not None:
            raise ValueError("this variant does not use retrieved images; pass retrieved=None")
        return None
    if retrieved is None:
        raise ValueError("this variant needs retrieved images (see TwoStageRetriever / `tvnet index`)")
    if not isinstance(retrieved, Mapping):
        retrieved = list(retrieved)
        if len(retrieved) != len(samples):
            raise ValueError(f"got {len(retrieved)} retrieved samples for {len(samples)} queries")
        retrieved = {s.sample_id: r for s, r in zip(samples, retrieved)}
    missing = [s.sample_id for s in samples if s.sample_id not in retrieved]
    if missing:
        raise KeyError(f"no retrieved sample for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return retrieved
