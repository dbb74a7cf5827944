"""Synthetic referring-segmentation corpus: coloured shapes on textured
backgrounds, each paired with a templated expression that names exactly one
object.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .core import SceneSample

log = logging.getLogger(__name__)

KINDS = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZE_CLASSES = ("small", "medium", "big")
DIRECTIONS = ("left", "right", "top", "bottom")

# area-fraction ranges used when sampling a shape; kept clear of the 5%/10% edges
_AREA_RANGES = {"small": (0.015, 0.042), "medium": (0.057, 0.092), "big": (0.11, 0.20)}
_RGB = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.12, 0.72, 0.18),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.92, 0.85, 0.10),
}
SPATIAL_MARGIN = 4.0
MIN_VISIBLE_RATIO = 0.6
SPLITS = ("train", "val", "pool")


class AmbiguousExpressionError(ValueError):
    """No template identifies the target uniquely."""


class DatasetError(RuntimeError):
    pass


def size_class_of(area_fraction: float) -> str:
    if area_fraction < 0.05:
        return "small"
    if area_fraction < 0.10:
        return "medium"
    return "big"


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    size_class: str
    center: tuple[float, float]  # (x, y) in pixels

    def __post_init__(self):
        if self.kind not in KINDS or self.color not in COLORS or self.size_class not in SIZE_CLASSES:
            raise ValueError(f"invalid shape spec {self}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = [float(self.center[0]), float(self.center[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(d["kind"], d["color"], d["size_class"], (float(d["center"][0]), float(d["center"][1])))


class Vocabulary:
    """Word <-> index map. Index 0 is padding, 1 is unknown."""

    PAD = "<pad>"
    UNK = "<unk>"

    def __init__(self, words: Iterable[str]):
        self.itos = [self.PAD, self.UNK]
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, 1) for w in words]

    def decode(self, tokens: Sequence[int]) -> list[str]:
        return [self.itos[t] for t in tokens if t != 0]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(["the", "on", *SIZE_CLASSES, *COLORS, *KINDS, *DIRECTIONS])


VOCAB = Vocabulary.default()


def _shape_mask(kind: str, area: float, cx: float, cy: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if kind == "circle":
        r = np.sqrt(area / np.pi)
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == "square":
        half = np.sqrt(area) / 2
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    # upright isosceles triangle, base == height, centred on its bounding box
    b = np.sqrt(2 * area)
    top, bottom = cy - b / 2, cy + b / 2
    rel = (ys - top) / b  # 0 at apex, 1 at base
    return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= rel * b / 2)


def _half_extent(kind: str, area: float) -> float:
    if kind == "circle":
        return np.sqrt(area / np.pi)
    if kind == "square":
        return np.sqrt(area) / 2
    return np.sqrt(2 * area) / 2


def _background_params(rng: np.random.Generator) -> dict:
    return {
        "c0": rng.uniform(0.25, 0.6, size=3).round(4).tolist(),
        "c1": rng.uniform(0.25, 0.6, size=3).round(4).tolist(),
        "theta": round(float(rng.uniform(0, 2 * np.pi)), 4),
    }


def _background(rng: np.random.Generator, size: int, params: dict) -> np.ndarray:
    c0, c1, theta = np.asarray(params["c0"]), np.asarray(params["c1"]), params["theta"]
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    t = (np.cos(theta) * (xs - 0.5) + np.sin(theta) * (ys - 0.5)) / np.sqrt(0.5) + 0.5
    t = np.clip(t, 0, 1)[..., None]
    img = (1 - t) * c0 + t * c1
    return img + rng.normal(0, 0.04, size=(size, size, 3))


def _render_scene(
    rng: np.random.Generator,
    n_objects: int,
    image_size: int,
    forced: tuple[str, ...] | None,
    background: dict | None,
    max_tries: int = 200,
):
    if not 2 <= n_objects <= 5:
        raise ValueError(f"n_objects must be in [2, 5], got {n_objects}")
    total = image_size * image_size
    for _ in range(max_tries):
        forced_slot = int(rng.integers(n_objects)) if forced else -1
        shapes = []
        for i in range(n_objects):
            kind = KINDS[rng.integers(len(KINDS))]
            color = COLORS[rng.integers(len(COLORS))]
            size_class = SIZE_CLASSES[rng.integers(len(SIZE_CLASSES))]
            if i == forced_slot:
                kind, color = forced[:2]
                if len(forced) > 2:
                    size_class = forced[2]
            lo, hi = _AREA_RANGES[size_class]
            area = rng.uniform(lo, hi) * total
            ext = _half_extent(kind, area) + 1
            cx, cy = rng.uniform(ext, image_size - ext, size=2)
            full = _shape_mask(kind, area, cx, cy, image_size)
            shapes.append((kind, color, size_class, (float(cx), float(cy)), full))

        visible = [s[4].copy() for s in shapes]
        for i in range(n_objects):
            for j in range(i + 1, n_objects):
                visible[i] &= ~shapes[j][4]
        ok = True
        for (kind, color, size_class, _, full), vis in zip(shapes, visible):
            if full.sum() == 0 or size_class_of(full.sum() / total) != size_class:
                ok = False
            elif vis.sum() < MIN_VISIBLE_RATIO * full.sum() or size_class_of(vis.sum() / total) != size_class:
                ok = False
        if not ok:
            continue

        bg = background if background is not None else _background_params(rng)
        img = _background(rng, image_size, bg)
        for kind, color, _, _, full in shapes:
            rgb = np.asarray(_RGB[color]) + rng.uniform(-0.05, 0.05, size=3)
            img[full] = rgb + rng.normal(0, 0.03, size=(int(full.sum()), 3))
        # quantise so the image survives an 8-bit PNG round trip unchanged
        img = np.round(np.clip(img, 0, 1) * 255) / 255
        objects = [
            (ShapeSpec(kind, color, size_class, center), vis.astype(np.uint8))
            for (kind, color, size_class, center, _), vis in zip(shapes, visible)
        ]
        return img.astype(np.float32), objects, bg
    raise RuntimeError(f"could not place {n_objects} objects in {max_tries} attempts")


def generate_scene(
    rng: np.random.Generator,
    n_objects: int,
    image_size: int = 64,
    forced: tuple[str, ...] | None = None,
    background: dict | None = None,
) -> tuple[np.ndarray, list[tuple[ShapeSpec, np.ndarray]]]:
    """Render ``n_objects`` shapes back to front over a gradient-plus-noise
    background.

    Returned masks hold only the visible pixels of each shape. ``forced``
    pins (kind, color) or (kind, color, size_class) for one randomly placed
    object; ``background`` reuses gradient parameters from another scene's
    metadata instead of drawing new ones. Size classes are measured on the visible mask, so they always
    agree with the stored ground truth.
    """
    image, objects, _ = _render_scene(rng, n_objects, image_size, forced, background)
    return image, objects


def _matches(spec: ShapeSpec, attrs: dict) -> bool:
    return all(getattr(spec, k) == v for k, v in attrs.items())


def _extreme(specs: Sequence[ShapeSpec], direction: str) -> int | None:
    """Index of the object that is extreme in ``direction`` by at least SPATIAL_MARGIN."""
    key = {
        "left": lambda s: -s.center[0],
        "right": lambda s: s.center[0],
        "top": lambda s: -s.center[1],
        "bottom": lambda s: s.center[1],
    }[direction]
    order = sorted(range(len(specs)), key=lambda i: key(specs[i]), reverse=True)
    if len(order) == 1:
        return order[0]
    if key(specs[order[0]]) - key(specs[order[1]]) >= SPATIAL_MARGIN:
        return order[0]
    return None


def resolve_referent(words: Sequence[str], specs: Sequence[ShapeSpec]) -> int:
    """Rule-based parser: index of the unique object the expression names."""
    attrs: dict[str, str] = {}
    direction = None
    for w in words:
        if w in KINDS:
            attrs["kind"] = w
        elif w in COLORS:
            attrs["color"] = w
        elif w in SIZE_CLASSES:
            attrs["size_class"] = w
        elif w in DIRECTIONS:
            direction = w
    if "kind" not in attrs:
        raise AmbiguousExpressionError(f"expression names no kind: {' '.join(words)}")
    hits = [i for i, s in enumerate(specs) if _matches(s, attrs)]
    if direction is not None and hits:
        j = _extreme([specs[i] for i in hits], direction)
        hits = [] if j is None else [hits[j]]
    if len(hits) != 1:
        raise AmbiguousExpressionError(f"{' '.join(words)!r} matches {len(hits)} objects")
    return hits[0]


def _render_words(target: ShapeSpec, attrs: Sequence[str], direction: str | None) -> list[str]:
    words = ["the"]
    if "size_class" in attrs:
        words.append(target.size_class)
    if "color" in attrs:
        words.append(target.color)
    words.append(target.kind)
    if direction:
        words += ["on", "the", direction]
    return words


_ATTR_SETS = (("kind",), ("color", "kind"), ("size_class", "kind"), ("size_class", "color", "kind"))


def generate_expression(
    target: ShapeSpec,
    distractors: Sequence[ShapeSpec],
    rng: np.random.Generator,
    vocab: Vocabulary = VOCAB,
    prefer: Sequence[str] | None = None,
) -> list[int]:
    """Pick a random template that singles out ``target``.

    Spatial words are used only when the attribute words alone match more
    than one object. If ``prefer`` (a word list) is among the valid
    templates it is chosen instead of a random one.
    """
    specs = [target, *distractors]
    options = []
    for attrs in _ATTR_SETS:
        sel = {a: getattr(target, a) for a in attrs}
        hits = [s for s in specs if _matches(s, sel)]
        if len(hits) == 1:
            options.append(_render_words(target, attrs, None))
            continue
        for d in DIRECTIONS:
            j = _extreme(hits, d)
            if j is not None and hits[j] is target:
                options.append(_render_words(target, attrs, d))
    if not options:
        raise AmbiguousExpressionError(f"no template distinguishes {target} from its distractors")
    if prefer is not None and list(prefer) in options:
        return vocab.encode(prefer)
    return vocab.encode(options[int(rng.integers(len(options)))])


def _make_sample(
    sample_id: str,
    rng: np.random.Generator,
    image_size: int,
    forced: tuple[str, ...] | None = None,
    background: dict | None = None,
    prefer: Sequence[str] | None = None,
    vocab: Vocabulary = VOCAB,
) -> SceneSample:
    attempts = 0
    while True:
        attempts += 1
        n = int(rng.integers(2, 6))
        image, objects, bg = _render_scene(rng, n, image_size, forced, background)
        specs = [s for s, _ in objects]
        if forced:
            candidates = [i for i, s in enumerate(specs) if (s.kind, s.color, s.size_class)[: len(forced)] == forced]
        else:
            candidates = list(range(n))
        t = candidates[int(rng.integers(len(candidates)))]
        try:
            tokens = generate_expression(specs[t], specs[:t] + specs[t + 1:], rng, vocab, prefer)
        except AmbiguousExpressionError:
            continue
        # relatives retry a while to reuse the preferred wording
        if prefer is not None and tokens != vocab.encode(prefer) and attempts < 100:
            continue
        meta = {
            "target": specs[t].to_dict(),
            "target_index": t,
            "objects": [s.to_dict() for s in specs],
            "background": bg,
        }
        return SceneSample(sample_id, image, objects[t][1], tokens, meta)


@dataclass
class Corpus:
    train: list[SceneSample]
    val: list[SceneSample]
    pool: list[SceneSample]

    def split(self, name: str) -> list[SceneSample]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def by_id(self) -> dict[str, SceneSample]:
        return {s.sample_id: s for split in SPLITS for s in self.split(split)}


def build_corpus(
    n_train: int,
    n_val: int,
    n_pool: int,
    seed: int = 0,
    planted_fraction: float = 0.5,
    image_size: int = 64,
    out_dir: str | Path | None = None,
) -> Corpus:
    """Generate train/val/pool splits, optionally writing them to ``out_dir``.

    For the first ``round(planted_fraction * n_train)`` training samples,
    pool sample ``i`` is a "relative" of train sample ``i``: it reuses that
    scene's background gradient, its referent has the same kind, colour and
    size class as the train referent, and its expression reuses the train
    wording whenever that wording is unambiguous in the new scene. Every
    sample draws from its own child seed, so the corpus is reproducible
    sample by sample.
    """
    if min(n_train, n_val, n_pool) < 1:
        raise ValueError("all split sizes must be >= 1")
    if not 0.0 <= planted_fraction <= 1.0:
        raise ValueError("planted_fraction must lie in [0, 1]")
    n_planted = int(round(planted_fraction * n_train))
    if n_planted > n_pool:
        raise ValueError(f"{n_planted} planted relatives need n_pool >= {n_planted}, got {n_pool}")

    root = np.random.SeedSequence(seed)
    train_ss, val_ss, pool_ss = root.spawn(3)
    train = [
        _make_sample(f"train-{i:05d}", np.random.default_rng(ss), image_size)
        for i, ss in enumerate(train_ss.spawn(n_train))
    ]
    val = [
        _make_sample(f"val-{i:05d}", np.random.default_rng(ss), image_size)
        for i, ss in enumerate(val_ss.spawn(n_val))
    ]
    pool = []
    for i, ss in enumerate(pool_ss.spawn(n_pool)):
        forced = background = prefer = None
        if i < n_planted:
            t = train[i].meta["target"]
            forced = (t["kind"], t["color"], t["size_class"])
            background = train[i].meta["background"]
            prefer = VOCAB.decode(train[i].tokens)
        sample = _make_sample(f"pool-{i:05d}", np.random.default_rng(ss), image_size, forced, background, prefer)
        if forced:
            sample.meta["planted_for"] = train[i].sample_id
        pool.append(sample)
    corpus = Corpus(train, val, pool)
    if out_dir is not None:
        write_corpus(corpus, out_dir, info={"seed": seed, "planted_fraction": planted_fraction})
    return corpus


def write_corpus(corpus: Corpus, out_dir: str | Path, info: dict | None = None, vocab: Vocabulary = VOCAB) -> None:
    """Layout: ``<out>/<split>/<id>.png``, ``<id>_mask.png`` (0/255) and
    ``<split>/metadata.jsonl``; ``vocab.txt`` and ``corpus.json`` at the root.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.txt").write_text("\n".join(vocab.itos) + "\n")
    counts = {}
    for split in SPLITS:
        d = out / split
        d.mkdir(exist_ok=True)
        samples = corpus.split(split)
        counts[split] = len(samples)
        with open(d / "metadata.jsonl", "w") as fh:
            for s in samples:
                Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(d / f"{s.sample_id}.png")
                Image.fromarray((s.mask * 255).astype(np.uint8)).save(d / f"{s.sample_id}_mask.png")
                rec = {"sample_id": s.sample_id, "tokens": " ".join(vocab.decode(s.tokens)), **s.meta}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "corpus.json").write_text(json.dumps({"counts": counts, **(info or {})}, indent=2, sort_keys=True) + "\n")


def load_vocab(data_dir: str | Path) -> Vocabulary:
    path = Path(data_dir) / "vocab.txt"
    if not path.exists():
        return VOCAB
    words = path.read_text().split()
    if words[:2] != [Vocabulary.PAD, Vocabulary.UNK]:
        raise DatasetError(f"{path}: first entries must be {Vocabulary.PAD} and {Vocabulary.UNK}")
    return Vocabulary(words[2:])


def load_split(data_dir: str | Path, split: str, vocab: Vocabulary | None = None) -> list[SceneSample]:
    d = Path(data_dir) / split
    meta_path = d / "metadata.jsonl"
    if not meta_path.exists():
        raise DatasetError(f"missing {meta_path}; run `tvnet synth` first")
    vocab = vocab or load_vocab(data_dir)
    samples = []
    for lineno, line in enumerate(meta_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{meta_path}:{lineno}: malformed metadata record ({exc})") from exc
        sid = rec.get("sample_id", f"<line {lineno}>")
        try:
            image = np.asarray(Image.open(d / f"{sid}.png").convert("RGB"), dtype=np.float32) / 255
            mask = (np.asarray(Image.open(d / f"{sid}_mask.png")) > 127).astype(np.uint8)
            words = rec["tokens"].split()
            unknown = [w for w in words if w not in vocab.stoi]
            if unknown:
                raise ValueError(f"out-of-vocabulary words {unknown}")
            meta = {k: v for k, v in rec.items() if k not in ("sample_id", "tokens")}
            samples.append(SceneSample(sid, image, mask, vocab.encode(words), meta))
        except (OSError, KeyError, ValueError, AttributeError) as exc:
            raise DatasetError(f"sample {sid} ({meta_path}:{lineno}): {exc}") from exc
    return samples


def load_corpus(data_dir: str | Path) -> Corpus:
    vocab = load_vocab(data_dir)
    return Corpus(*(load_split(data_dir, s, vocab) for s in SPLITS))
