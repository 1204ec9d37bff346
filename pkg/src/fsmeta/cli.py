"""Command-line entry point: gen-data, train, eval, sweep, ablate, export-pca.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import DataError, SplitSpec, generate_synthetic, holdout_split, load_directory, split_classes, write_directory
from .episodes import EpisodeError
from .evaluation import (EvalConfig, EvalReport, ablate, embed_eval, evaluate, pca_csv, pca_project, ratio_study,
                         sweep_lambda, table_csv)
from .model import CheckpointError, Model, load_checkpoint
from .numerics.serialize import FormatError
from .numerics.tensor import NumericError
from .training import ConfigError, TrainConfig, train

logger = logging.getLogger("fsmeta")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST, LOG, CHECKPOINT, REPORT, SPLIT = "manifest.json", "train_log.csv", "model.mmck", "eval_report.json", "split.json"

# keys that choose the class split rather than a training hyperparameter
SPLIT_DEFAULTS = {"n_unseen": None, "fold": 0, "val_fraction": 0.0}


class UsageError(Exception):
    pass


def code_version() -> str:
    """Package version plus a digest of its source files."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- config


def parse_config(obj: dict) -> tuple[TrainConfig, dict]:
    """Strict parse of a run config; every problem is reported at once."""
    if not isinstance(obj, dict):
        raise ConfigError(["config: must be a JSON object"])
    split_cfg = dict(SPLIT_DEFAULTS)
    problems, train_part = [], {}
    for key, value in obj.items():
        if key in SPLIT_DEFAULTS:
            split_cfg[key] = value
        else:
            train_part[key] = value
    n_unseen = split_cfg["n_unseen"]
    if n_unseen is not None and (not isinstance(n_unseen, int) or isinstance(n_unseen, bool) or n_unseen < 1):
        problems.append("n_unseen: must be a positive integer or null")
    if split_cfg["fold"] not in (0, 1, 2):
        problems.append("fold: must be 0, 1 or 2")
    vf = split_cfg["val_fraction"]
    if isinstance(vf, bool) or not isinstance(vf, (int, float)) or not 0.0 <= vf < 1.0:
        problems.append("val_fraction: must be a number in [0, 1)")
    cfg = None
    try:
        cfg = TrainConfig.from_dict(train_part)
    except ConfigError as exc:
        problems = exc.problems + problems
    if problems:
        raise ConfigError(problems)
    return cfg, split_cfg


def load_config(path: Optional[str]) -> tuple[TrainConfig, dict]:
    if path is None:
        return parse_config({})
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"config: file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: invalid JSON ({exc})"])
    return parse_config(obj)


def resolved_config(cfg: TrainConfig, split_cfg: dict) -> dict:
    return {**cfg.to_dict(), **split_cfg}


def make_split(index, cfg: TrainConfig, split_cfg: dict) -> SplitSpec:
    min_seen = cfg.C
    if split_cfg["n_unseen"] is None:
        return split_classes(index, split_cfg["fold"], split_cfg["val_fraction"], cfg.seed, min_seen)
    return holdout_split(index, split_cfg["n_unseen"], split_cfg["val_fraction"], cfg.seed, min_seen)


def prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, command: str, **fields) -> dict:
    manifest = {"command": command, "code_version": code_version(), "output_dir": str(out),
                "started": now(), **fields}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def finish_manifest(out: Path, manifest: dict) -> None:
    manifest["finished"] = now()
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def progress_logger(every: int):
    def log(rec):
        if rec.episode % every == 0:
            logger.info("episode %d l_bal=%.4f l_g=%.4f l_ce=%.4f acc=%.3f lr=%.2e %.0fms",
                        rec.episode, rec.l_bal, rec.l_g, rec.l_ce, rec.episode_acc, rec.lr, rec.ms)
    return log


def eval_config(args) -> EvalConfig:
    if str(args.queries) != "all" and not str(args.queries).isdigit():
        raise UsageError("--queries must be a positive integer or 'all'")
    s_te = None if str(args.queries) == "all" else int(args.queries)
    return EvalConfig(Q=args.ways, L=args.shots, S_te=s_te, M=args.tasks, seed=args.seed, head=args.head,
                      batch_stats=args.bn_batch_stats)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.classes < 2 or args.per_class < 2 or args.size < 1:
        raise UsageError("gen-data needs --classes >= 2, --per-class >= 2 and --size >= 1")
    out = Path(args.out)
    prepare_out(out, args.force)
    ds = generate_synthetic(args.classes, args.per_class, (3, args.size, args.size), args.seed)
    files = write_directory(ds, out, args.format)
    manifest = {"command": "gen-data", "code_version": code_version(), "classes": args.classes,
                "per_class": args.per_class, "size": args.size, "seed": args.seed, "format": args.format,
                "files": len(files)}
    # no timestamps: a rerun must produce identical bytes
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d images in %d classes to %s", len(files), args.classes, out)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.manifest:
        prev = json.loads(Path(args.manifest).read_text())
        cfg, split_cfg = parse_config(prev["config"])
        data = args.data or prev["data"]
        split = SplitSpec.from_json(prev["split"])
    else:
        if not args.data:
            raise UsageError("train needs --data (or --manifest)")
        cfg, split_cfg = load_config(args.config)
        data, split = args.data, None
    out = Path(args.out)
    prepare_out(out, args.force)
    ds = load_directory(data)
    if split is None:
        split = SplitSpec.load(args.split) if args.split else make_split(ds.index, cfg, split_cfg)
    manifest = write_manifest(out, "train", config=resolved_config(cfg, split_cfg), seed=cfg.seed,
                              data=str(data), split=split.to_json())
    split.save(out / SPLIT)
    result = train(cfg, ds, split, log_path=out / LOG, checkpoint_path=out / CHECKPOINT,
                   progress=progress_logger(args.log_every))
    last = result.log[-1]
    manifest["final"] = {"l_bal": last.l_bal, "l_g": last.l_g, "l_ce": last.l_ce}
    finish_manifest(out, manifest)
    logger.info("checkpoint written to %s", out / CHECKPOINT)
    return EXIT_OK


def find_split(args, ckpt: Path) -> SplitSpec:
    if args.split:
        return SplitSpec.load(args.split)
    for cand in (ckpt.parent / SPLIT, ckpt.parent / MANIFEST):
        if cand.exists():
            obj = json.loads(cand.read_text())
            return SplitSpec.from_json(obj.get("split", obj))
    raise UsageError(f"no split found next to {ckpt}; pass --split")


def load_model(ckpt: Path, image_hw) -> Model:
    return Model.from_state(load_checkpoint(ckpt), image_hw)


def emit_report(report: EvalReport, path: Path) -> None:
    text = report.dumps()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    sys.stdout.write(text)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    ecfg = eval_config(args)
    ds = load_directory(args.data)
    split = find_split(args, ckpt)
    model = load_model(ckpt, ds.index.image_shape[1:])
    report = evaluate(model, ds, split.pool(ds.index, args.which), ecfg)
    out = Path(args.out) if args.out else ckpt.parent
    emit_report(report, out / REPORT)
    logger.info("mean accuracy %.4f +- %.4f over %d tasks", report.mean, report.std, ecfg.M)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, split_cfg = load_config(args.config)
    ecfg = eval_config(args)
    out = Path(args.out)
    prepare_out(out, args.force)
    ds = load_directory(args.data)
    split = make_split(ds.index, cfg, split_cfg)
    manifest = write_manifest(out, f"sweep-{args.what}", config=resolved_config(cfg, split_cfg), seed=cfg.seed,
                              data=str(args.data), split=split.to_json(), eval=ecfg.to_dict())
    if args.what == "lambda":
        values = args.values if args.values else [round(0.1 * i, 1) for i in range(11)]
        rows = sweep_lambda(cfg, values, ds, split, ecfg, progress=logger.info)
        text = table_csv(["lambda", "mean", "std"], rows)
    else:
        values = args.values if args.values else [0.2, 0.5, 0.8]
        mode = args.what.split("-", 1)[1]
        rows = ratio_study(mode, values, cfg, ds, split, ecfg, repeats=args.repeats, progress=logger.info)
        text = table_csv(["mode", "ratio", "kept", "mean", "std", "repeats"], rows)
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    finish_manifest(out, manifest)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, split_cfg = load_config(args.config)
    ecfg = eval_config(args)
    mode = args.mode.replace("-", "_")
    if mode == "no_metric" and cfg.lam == 0.0:
        raise ConfigError(["lambda: the no-metric ablation trains on lambda * L_CE alone and needs lambda > 0"])
    out = Path(args.out)
    prepare_out(out, args.force)
    ds = load_directory(args.data)
    split = make_split(ds.index, cfg, split_cfg)
    manifest = write_manifest(out, f"ablate-{args.mode}", config=resolved_config(cfg, split_cfg), seed=cfg.seed,
                              data=str(args.data), split=split.to_json(), eval=ecfg.to_dict())
    report = ablate(mode, cfg, ds, split, ecfg)
    emit_report(report, out / REPORT)
    finish_manifest(out, manifest)
    return EXIT_OK


def cmd_export_pca(args) -> int:
    ckpt = Path(args.checkpoint)
    ds = load_directory(args.data)
    split = find_split(args, ckpt)
    model = load_model(ckpt, ds.index.image_shape[1:])
    pool = split.pool(ds.index, args.which)
    ids = np.array([i for k in sorted(pool) for i in pool[k]], dtype=np.intp)
    feats = embed_eval(model, ds.images[ids])
    scores, _ = pca_project(feats)
    names = ds.index.class_names
    text = pca_csv(scores, [names[ds.labels[i]] for i in ids])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    logger.info("wrote %d rows to %s", len(ids), out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def add_eval_args(p, with_seed: bool = True) -> None:
    p.add_argument("--ways", type=int, default=5, help="classes per test task (Q)")
    p.add_argument("--shots", type=int, default=1, help="labelled samples per class (L)")
    p.add_argument("--queries", default="15", help="queries per class, or 'all' for every remaining sample")
    p.add_argument("--tasks", type=int, default=20, help="number of test tasks (M)")
    p.add_argument("--head", choices=("learned", "euclidean", "cosine"), default="learned")
    p.add_argument("--bn-batch-stats", action="store_true", help="batch norm uses test-batch statistics")
    if with_seed:
        p.add_argument("--seed", type=int, default=0, help="seed for test-task sampling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsmeta", description="Few-shot scene classification with a learned metric.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic texture dataset")
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("ppm", "mmtn"), default="ppm")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="episodic training")
    p.add_argument("--data")
    p.add_argument("--config", help="JSON config (missing keys take defaults)")
    p.add_argument("--split", help="split JSON overriding the config-derived split")
    p.add_argument("--manifest", help="rerun from a previous train manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="repeated-task accuracy on unseen classes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split JSON (default: the one saved next to the checkpoint)")
    p.add_argument("--which", choices=("unseen", "val", "seen"), default="unseen")
    p.add_argument("--out", help="directory for eval_report.json (default: checkpoint directory)")
    add_eval_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="lambda sweep or training-ratio study")
    p.add_argument("--what", choices=("lambda", "ratio-categories", "ratio-scenes"), required=True)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--repeats", type=int, default=10, help="training repeats per ratio")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    add_eval_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and evaluate an ablated model")
    p.add_argument("--mode", choices=("no-meta", "no-metric"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    add_eval_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-pca", help="2-D PCA of embedded samples as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--which", choices=("unseen", "val", "seen"), default="unseen")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_export_pca)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"{parser.prog} {args.command}: config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"{parser.prog} {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, EpisodeError, FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"{parser.prog} {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
