"""Command-line entry point: ``tvnet {synth,index,train,eval,predict,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CheckpointError, Config, ConfigError, env_seed
from .estimator import TVNetSegmenter
from .metrics import PREC_THRESHOLDS, EvalReport
from .model import ModelVariant, read_loss_history, write_loss_history
from .retrieval import ManifestError, TwoStageRetriever, read_manifest, write_manifest
from .synthdata import SPLITS, DatasetError, build_corpus, load_corpus, load_split

log = logging.getLogger("tvnet")

MANIFEST_NAME = "manifest.tsv"
_OWNED = (*SPLITS, "vocab.txt", "corpus.json", MANIFEST_NAME)


class CLIError(RuntimeError):
    pass


# config keys that may also be given as flags
_FLAG_KEYS = ("seed", "max_iter", "lr", "retrieval_k", "threshold", "image_size")


def resolve_config(args) -> Config:
    """Precedence: explicit flag > TVNET_SEED (seed only) > --config file > defaults."""
    data = Config().to_dict()
    from_file = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CLIError(f"config file not found: {path}")
        from_file = json.loads(path.read_text())
        data.update(from_file)
    data["seed"] = env_seed(data["seed"])
    for key in _FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if "level_sizes" not in from_file:
        s = data["image_size"]
        data["level_sizes"] = [s // 2, s // 4, s // 8, s // 8, s // 8]
    return Config.from_dict(data)


@dataclass
class RunDirectory:
    """``config.json`` (written before any training step), ``run.json``
    (dataset, manifest, variant), ``checkpoint.npz``, ``loss_history.txt``,
    ``eval_<split>.{txt,json}``, ``*.png`` plots.
    """

    path: Path

    @property
    def config_path(self) -> Path:
        return self.path / "config.json"

    @property
    def info_path(self) -> Path:
        return self.path / "run.json"

    @property
    def checkpoint(self) -> Path:
        return self.path / "checkpoint.npz"

    @property
    def loss_history(self) -> Path:
        return self.path / "loss_history.txt"

    def eval_json(self, split: str) -> Path:
        return self.path / f"eval_{split}.json"

    def info(self) -> dict:
        if not self.info_path.exists():
            raise CLIError(f"{self.path} is not a run directory (no run.json); run `tvnet train --run-dir {self.path}` first")
        return json.loads(self.info_path.read_text())

    def load_model(self) -> TVNetSegmenter:
        if not self.checkpoint.exists():
            raise CLIError(f"no checkpoint in {self.path}; run `tvnet train --run-dir {self.path}` first")
        return TVNetSegmenter.load(self.checkpoint)


def _retrieved_for(samples, data_dir: Path, manifest_path: Path, variant: ModelVariant):
    if not variant.uses_res:
        return None
    pool = {s.sample_id: s for s in load_split(data_dir, "pool")}
    manifest = read_manifest(manifest_path, pool_ids=pool)
    missing = [s.sample_id for s in samples if s.sample_id not in manifest]
    if missing:
        raise CLIError(f"manifest {manifest_path} has no entry for {missing[:5]}; rerun `tvnet index`")
    return {s.sample_id: pool[manifest[s.sample_id].match_id] for s in samples}


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CLIError(f"{out} is not empty; pass --force to overwrite")
        for name in _OWNED:
            p = out / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    corpus = build_corpus(
        args.n_train, args.n_val, args.n_pool, seed=cfg.seed,
        planted_fraction=args.planted_fraction, image_size=cfg.image_size, out_dir=out,
    )
    print(f"wrote {len(corpus.train)} train / {len(corpus.val)} val / {len(corpus.pool)} pool samples to {out}")
    return 0


def cmd_index(args) -> int:
    cfg = resolve_config(args)
    data = Path(args.data)
    corpus = load_corpus(data)
    k = args.k if args.k is not None else cfg.retrieval_k
    if k > len(corpus.pool):
        log.warning("K=%d exceeds pool size %d; clamping to %d", k, len(corpus.pool), len(corpus.pool))
        k = len(corpus.pool)
    retriever = TwoStageRetriever(k=k).fit(corpus.pool)
    manifest = retriever.build_manifest(corpus.train + corpus.val)
    out = Path(args.out) if args.out else data / MANIFEST_NAME
    write_manifest(manifest, out)
    print(f"wrote {len(manifest)} matches (K={k}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run = RunDirectory(Path(args.run_dir))
    run.path.mkdir(parents=True, exist_ok=True)
    data = Path(args.data)
    variant = ModelVariant(args.variant)
    manifest = Path(args.manifest) if args.manifest else data / MANIFEST_NAME
    cfg.save(run.config_path)
    run.info_path.write_text(json.dumps(
        {"data": str(data.resolve()), "manifest": str(manifest.resolve()), "variant": variant.value},
        indent=2, sort_keys=True) + "\n")
    train_set = load_split(data, "train")
    retrieved = _retrieved_for(train_set, data, manifest, variant)
    est = TVNetSegmenter.from_config(cfg, variant=variant.value, verbose=args.verbose)
    if cfg.max_iter == 0:
        est.init_untrained()
    else:
        est.fit(train_set, retrieved=retrieved)
    est.save(run.checkpoint)
    write_loss_history(est.loss_history_, run.loss_history)
    last = f", final loss {est.loss_history_[-1]:.4f}" if est.loss_history_ else ""
    print(f"trained {variant.value} for {est.n_iter_} iterations{last}; checkpoint at {run.checkpoint}")
    return 0


def evaluate_run(run: RunDirectory, split: str) -> EvalReport:
    info = run.info()
    est = run.load_model()
    data = Path(info["data"])
    samples = load_split(data, split)
    retrieved = _retrieved_for(samples, data, Path(info["manifest"]), est.variant_)
    report = est.evaluate(samples, retrieved=retrieved)
    (run.path / f"eval_{split}.txt").write_text(report.to_text())
    run.eval_json(split).write_text(report.to_json() + "\n")
    return report


def cmd_eval(args) -> int:
    run = RunDirectory(Path(args.run_dir))
    report = evaluate_run(run, args.split)
    print(report.to_text(), end="")
    return 0


def _panel(arr: np.ndarray, scale: int = 4) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None] * 255, 3, axis=2)
    else:
        arr = arr * 255
    return np.kron(arr, np.ones((scale, scale, 1))).astype(np.uint8)


def cmd_predict(args) -> int:
    from PIL import Image

    run = RunDirectory(Path(args.run_dir))
    info = run.info()
    data = Path(info["data"])
    est = run.load_model()
    found = None
    ids = []
    for split in SPLITS:
        for s in load_split(data, split):
            ids.append(s.sample_id)
            if s.sample_id == args.sample_id:
                found = s
    if found is None:
        shown = ", ".join(ids[:20]) + (f", ... ({len(ids)} total)" if len(ids) > 20 else "")
        raise CLIError(f"unknown sample id {args.sample_id!r}; available ids: {shown}")
    retrieved = None
    if est.variant_.uses_res:
        pool = {s.sample_id: s for s in load_split(data, "pool")}
        retriever = TwoStageRetriever(k=min(est.config_.retrieval_k, len(pool))).fit(list(pool.values()))
        manifest_path = Path(info["manifest"])
        manifest = read_manifest(manifest_path) if manifest_path.exists() else {}
        match = manifest[found.sample_id].match_id if found.sample_id in manifest else retriever.retrieve(found).match_id
        retrieved = {found.sample_id: pool[match]}
    pred = est.predict([found], retrieved=retrieved)[0]
    sep = np.full((found.image.shape[0] * 4, 8, 3), 255, np.uint8)
    canvas = np.concatenate([_panel(found.image), sep, _panel(pred), sep, _panel(found.mask)], axis=1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out)
    print(f"wrote input | prediction | ground truth for {found.sample_id} to {out}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = RunDirectory(Path(args.run_dir))
    if not run.loss_history.exists():
        raise CLIError(f"no loss history in {run.path}; run `tvnet train` first")
    losses = read_loss_history(run.loss_history)
    fig, ax = plt.subplots(figsize=(6, 4))
    if losses:
        ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.5, alpha=0.4, label="per iteration")
        w = min(50, len(losses))
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(w, len(losses) + 1), smooth, lw=1.5, label=f"moving mean ({w})")
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("iteration")
    ax.set_ylabel("BCE loss")
    fig.tight_layout()
    fig.savefig(run.path / "loss_curve.png", dpi=100)
    plt.close(fig)

    if not run.eval_json(args.split).exists():
        log.info("no eval_%s.json yet; evaluating", args.split)
        evaluate_run(run, args.split)
    report = json.loads(run.eval_json(args.split).read_text())
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rep in report.get("buckets", {"all": report}).items():
        ys = [rep["prec"][f"{x:.1f}"] for x in PREC_THRESHOLDS]
        if rep["n"]:
            ax.plot(PREC_THRESHOLDS, ys, marker="o", label=f"{name} (n={rep['n']})")
    ax.set_xlabel("IoU threshold X")
    ax.set_ylabel("Prec@X")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(run.path / "prec_curve.png", dpi=100)
    plt.close(fig)
    print(f"wrote {run.path / 'loss_curve.png'} and {run.path / 'prec_curve.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tvnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (flags override it)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate the synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, default=200)
    sp.add_argument("--n-val", type=int, default=100)
    sp.add_argument("--n-pool", type=int, default=200)
    sp.add_argument("--planted-fraction", type=float, default=0.5)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("index", help="offline retrieval for every train/val sample")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=int, help="text shortlist size (default: config retrieval_k)")
    sp.add_argument("--out", help=f"manifest path (default: <data>/{MANIFEST_NAME})")
    sp.set_defaults(func=cmd_index)

    sp = sub.add_parser("train", help="train one model variant")
    common(sp)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--variant", choices=[v.value for v in ModelVariant], default="full")
    sp.add_argument("--max-iter", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained run")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--split", choices=SPLITS, default="val")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write input / prediction / ground truth for one sample")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--sample-id", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("plot", help="loss curve and Prec@X curve")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--split", choices=SPLITS, default="val")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, CheckpointError, DatasetError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
