"""Repeated-task accuracy, confusion matrices, sweeps, ablations and PCA."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from .data import DataError, Dataset, SplitSpec, subsample_train
from .episodes import EpisodeSpec, build_episode
from .model import Model, compute_centroids, log_posteriors, pairwise_distance
from .numerics.tensor import Tensor, no_grad
from .seeding import derive_seed, indexed_rng
from .training import ConfigError, TrainConfig, train, train_plain

logger = logging.getLogger(__name__)

HEADS = ("learned", "euclidean", "cosine")
EMBED_CHUNK = 128


@dataclass(frozen=True)
class EvalConfig:
    Q: int = 5
    L: int = 1
    S_te: Optional[int] = 15  # None means every remaining sample is a query
    M: int = 20
    seed: int = 0
    head: str = "learned"
    batch_stats: bool = False  # normalize with each batch's statistics instead of running ones

    def __post_init__(self):
        problems = []
        if self.Q < 2:
            problems.append("Q: must be >= 2")
        if self.L < 1:
            problems.append("L: must be >= 1")
        if self.S_te is not None and self.S_te < 1:
            problems.append("S_te: must be >= 1 (or null for all remaining)")
        if self.M < 1:
            problems.append("M: must be >= 1")
        if self.head not in HEADS:
            problems.append(f"head: must be one of {', '.join(HEADS)}")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalReport:
    config: dict
    per_task: list  # [{"r": correct, "n": queries, "acc": r / n}]
    mean: float
    std: float
    classes: list  # global class ids indexing the confusion matrix
    confusion: list  # row-normalized, rows = true class
    empty_rows: list = field(default_factory=list)
    predictions: list = field(default_factory=list)  # [task, sample id, true class, predicted class]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "per_task": self.per_task,
            "mean": self.mean,
            "std": self.std,
            "classes": self.classes,
            "confusion": self.confusion,
            "empty_rows": self.empty_rows,
            "predictions": self.predictions,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def embed_eval(model: Model, images: np.ndarray, batch_stats: bool = False) -> np.ndarray:
    """Frozen-parameter embeddings.

    By default batch norm uses its running statistics and images are
    embedded in chunks. ``batch_stats`` normalizes with the statistics of
    ``images`` as one batch (transductive; running stats untouched).
    """
    images = images.astype(model.dtype, copy=False)
    with no_grad():
        if batch_stats:
            return model.embed(images, training=True, update_stats=False).data
        out = [model.embed(images[s : s + EMBED_CHUNK], training=False).data for s in range(0, len(images), EMBED_CHUNK)]
    return np.concatenate(out, axis=0)


def classify(model: Model, head: str, support_feats: np.ndarray, support_labels, query_feats: np.ndarray) -> np.ndarray:
    """Local label predicted for each query; ties go to the lowest label."""
    centroids = compute_centroids(Tensor(support_feats), support_labels)
    if head == "learned":
        with no_grad():
            logp = log_posteriors(model.metric.scores(Tensor(query_feats), centroids)).data
        return np.argmax(logp, axis=1)
    return np.argmin(pairwise_distance(head, query_feats, centroids.data), axis=1)


def accuracy_stats(per_task_acc: Sequence[float]) -> tuple[float, float]:
    """Mean over tasks and population std (ddof=0) of the per-task accuracies."""
    a = np.asarray(per_task_acc, dtype=np.float64)
    return float(a.mean()), float(a.std())


def confusion_matrix(true: Sequence[int], pred: Sequence[int], classes: Sequence[int]):
    """Row-normalized confusion plus the rows that received no queries."""
    pos = {k: i for i, k in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true, pred):
        counts[pos[t], pos[p]] += 1
    totals = counts.sum(axis=1)
    rows = np.where(totals[:, None] > 0, counts / np.maximum(totals, 1)[:, None], 0.0)
    empty = [int(classes[i]) for i in np.flatnonzero(totals == 0)]
    return rows, empty


def evaluate(model: Model, dataset: Dataset, pool, cfg: EvalConfig) -> EvalReport:
    """Run ``cfg.M`` test tasks drawn from ``pool`` (the unseen classes)."""
    index = dataset.index
    spec = EpisodeSpec(cfg.Q, cfg.L, cfg.Q, cfg.S_te if cfg.S_te is not None else 1)
    stream = derive_seed(cfg.seed, "eval-episodes")
    pool = {int(k): tuple(v) for k, v in (pool.items() if isinstance(pool, dict) else ((k, index.samples_of(k)) for k in pool))}
    classes = sorted(pool)
    per_task, preds, all_true, all_pred = [], [], [], []
    for i in range(cfg.M):
        ep = build_episode(index, pool, spec, indexed_rng(stream, i), all_remaining=cfg.S_te is None)
        fs = embed_eval(model, dataset.images[ep.support_ids], cfg.batch_stats)
        fq = embed_eval(model, dataset.images[ep.query_ids], cfg.batch_stats)
        local = classify(model, cfg.head, fs, ep.support_labels, fq)
        truth = ep.query_labels
        r = int(np.sum(local == truth))
        per_task.append({"r": r, "n": int(truth.size), "acc": r / truth.size})
        cmap = np.asarray(ep.class_map)
        for sid, t, p in zip(ep.query_ids, cmap[truth], cmap[local]):
            preds.append([i, int(sid), int(t), int(p)])
            all_true.append(int(t))
            all_pred.append(int(p))
    mean, std = accuracy_stats([t["acc"] for t in per_task])
    rows, empty = confusion_matrix(all_true, all_pred, classes)
    return EvalReport(cfg.to_dict(), per_task, mean, std, classes, rows.tolist(), empty, preds)


def recount(predictions: Sequence[Sequence[int]], num_tasks: int) -> float:
    """Accuracy recomputed from logged per-query predictions (mean over tasks)."""
    hits = np.zeros(num_tasks)
    seen = np.zeros(num_tasks)
    for task, _, t, p in predictions:
        hits[task] += t == p
        seen[task] += 1
    return float(np.mean(hits / seen))


# ---------------------------------------------------------------- experiment drivers


def train_and_evaluate(base: TrainConfig, dataset: Dataset, split: SplitSpec, eval_cfg: EvalConfig, **train_kw):
    result = train(base, dataset, split, **train_kw)
    return result, evaluate(result.model, dataset, split.pool(dataset.index, "unseen"), eval_cfg)


def sweep_lambda(base: TrainConfig, values: Sequence[float], dataset: Dataset, split: SplitSpec, eval_cfg: EvalConfig,
                 progress: Optional[Callable[[str], None]] = None) -> list[tuple]:
    """``(lambda, mean, std)`` per value, everything else (seeds included) fixed."""
    bad = [v for v in values if not 0.0 <= v <= 1.0]
    if bad:
        raise ConfigError([f"lambda: sweep values must lie in [0, 1], got {bad}"])
    rows = []
    for lam in sorted(values):
        _, rep = train_and_evaluate(dataclasses.replace(base, lam=float(lam)), dataset, split, eval_cfg)
        rows.append((float(lam), rep.mean, rep.std))
        if progress:
            progress(f"lambda={lam:g} mean={rep.mean:.4f} std={rep.std:.4f}")
    return rows


def ablate(mode: str, base: TrainConfig, dataset: Dataset, split: SplitSpec, eval_cfg: EvalConfig) -> EvalReport:
    """Train without meta-learning (``no_meta``) or without the metric head (``no_metric``).

    Both ablations are scored with Euclidean nearest-centroid because
    their metric head never receives episodic training.
    """
    mode = mode.replace("-", "_")
    if mode == "no_meta":
        result = train_plain(base, dataset, split)
    elif mode == "no_metric":
        result = train(base, dataset, split, objective="fit_only")
    else:
        raise ValueError(f"unknown ablation {mode!r}")
    cfg = dataclasses.replace(eval_cfg, head="euclidean")
    rep = evaluate(result.model, dataset, split.pool(dataset.index, "unseen"), cfg)
    rep.config = dict(rep.config, ablation=mode)
    return rep


def fit_to_pool(base: TrainConfig, split: SplitSpec, dataset: Dataset) -> TrainConfig:
    """Shrink episode sizes so a subsampled seen pool can still supply them."""
    pool = split.seen_pool(dataset.index)
    n_cls = len(pool)
    n_min = min(len(v) for v in pool.values())
    if n_cls < 2:
        raise DataError(f"training needs >= 2 seen classes, the ratio leaves {n_cls}")
    if n_min < base.S_tr + 1:
        raise DataError(f"training needs >= {base.S_tr + 1} samples per class, the ratio leaves {n_min}")
    C = min(base.C, n_cls)
    return dataclasses.replace(base, C=C, Q=min(base.Q, C), S_te=min(base.S_te, n_min - base.S_tr))


def ratio_study(mode: str, ratios: Sequence[float], base: TrainConfig, dataset: Dataset, split: SplitSpec,
                eval_cfg: EvalConfig, repeats: int = 10,
                progress: Optional[Callable[[str], None]] = None) -> list[tuple]:
    """``(mode, ratio, kept, mean, std, repeats)`` rows; repeat ``r`` uses seed ``base.seed + r``.

    ``kept`` is the number of seen classes (categories) or the smallest
    per-class sample count (scenes) actually trained on: counts below what
    an episode needs (2 classes, ``S_tr + 1`` samples) are raised to it.
    Mean and std are over the per-task accuracies of every repeat.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for ratio in ratios:
        accs = []
        for r in range(repeats):
            seed = base.seed + r
            sub = subsample_train(split, dataset.index, mode, ratio, seed=seed, min_classes=2,
                                  min_per_class=base.S_tr + 1, clamp=True)
            pool = sub.seen_pool(dataset.index)
            kept = len(pool) if mode == "categories" else min(len(v) for v in pool.values())
            cfg = fit_to_pool(dataclasses.replace(base, seed=seed), sub, dataset)
            _, rep = train_and_evaluate(cfg, dataset, sub, eval_cfg)
            accs.extend(t["acc"] for t in rep.per_task)
        mean, std = accuracy_stats(accs)
        rows.append((mode, float(ratio), kept, mean, std, repeats))
        if progress:
            progress(f"{mode} ratio={ratio:g} mean={mean:.4f} std={std:.4f}")
    return rows


def table_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------- PCA


@njit(cache=True)
def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        scale = 0.0
        for p in range(n):
            scale += a[p, p] * a[p, p]
        if off <= tol * tol * max(scale, 1e-300):
            return np.diag(a).copy(), v, True
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = a[k, p], a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p, k], a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = v[k, p], v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return np.diag(a).copy(), v, False


def jacobi_eigh(sym: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigenvalues (descending) and column eigenvectors of a symmetric matrix.

    Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls
    below ``tol`` times the diagonal norm.
    """
    a = np.array(sym, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("jacobi_eigh expects a square matrix")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("jacobi_eigh expects a symmetric matrix")
    a = (a + a.T) / 2
    w, v, ok = _jacobi(a, tol, max_sweeps)
    if not ok:
        raise ArithmeticError(f"Jacobi did not converge in {max_sweeps} sweeps")
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive (first on ties)."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def pca_project(features: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Scores on the top-``k`` principal axes, plus the explained variances.

    With fewer samples than dimensions the (smaller) Gram matrix is
    diagonalized and mapped back to feature space.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("PCA needs an [N, D] matrix with N >= 3")
    xc = x - x.mean(axis=0)
    n, d = xc.shape
    if d <= n:
        w, v = jacobi_eigh(xc.T @ xc / (n - 1))
        axes = v[:, :k]
    else:
        w, u = jacobi_eigh(xc @ xc.T / (n - 1))
        axes = xc.T @ u[:, :k]
        norms = np.linalg.norm(axes, axis=0)
        axes = axes / np.where(norms > 0, norms, 1.0)
    if w[0] <= 0:
        # a rank-1 cloud is fine (pc2 scores ~ 0); identical points are not
        raise ValueError("PCA: all points identical (rank 0)")
    axes = _fix_signs(axes)
    return xc @ axes, w[:k]


def pca_csv(scores: np.ndarray, labels: Sequence) -> str:
    return table_csv(["pc1", "pc2", "label"], [(float(a), float(b), lab) for (a, b), lab in zip(scores[:, :2], labels)])
