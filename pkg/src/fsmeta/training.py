"""Episodic training loop, optimizer and learning-rate schedule."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .data import Dataset, SplitSpec
from .episodes import EpisodeSpec, build_episode
from .model import Model, compute_centroids, log_posteriors, save_checkpoint
from .numerics import functional as F
from .numerics.tensor import NumericError, Parameter, Tensor, backward, no_grad
from .objective import LossConfig, balance_loss, fit_loss, generalization_loss
from .seeding import component_rng, derive_seed, indexed_rng

logger = logging.getLogger(__name__)

LOG_HEADER = ["episode", "l_bal", "l_g", "l_ce", "episode_acc", "lr", "ms"]


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class TrainConfig:
    C: int = 5
    S_tr: int = 1
    Q: int = 5
    S_te: int = 15
    lam: float = 0.1
    lr: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    T: int = 10_000
    episodes_per_epoch: int = 100
    lr_decay_every_epochs: int = 20
    lr_decay_factor: float = 0.5
    seed: int = 0
    precision: str = "f32"
    checkpoint_every: int = 0
    width: int = 64
    hidden: int = 64
    blocks: int = 4

    # JSON uses "lambda"; everything else maps one to one
    _ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("C", "S_tr", "Q", "S_te", "T", "episodes_per_epoch", "width", "hidden", "blocks"):
            if getattr(self, name) < 1:
                out.append(f"{self.json_key(name)}: must be >= 1")
        if not self.Q <= self.C:
            out.append("Q: must not exceed C")
        if not 0.0 <= self.lam <= 1.0:
            out.append("lambda: must lie in [0, 1]")
        if not self.lr >= 0.0:
            out.append("lr: must be >= 0")
        if self.weight_decay < 0:
            out.append("weight_decay: must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            out.append("momentum: must lie in [0, 1)")
        if self.lr_decay_every_epochs < 0:
            out.append("lr_decay_every_epochs: must be >= 0 (0 disables decay)")
        if not self.lr_decay_factor > 0:
            out.append("lr_decay_factor: must be > 0")
        if self.precision not in ("f32", "f64"):
            out.append("precision: must be 'f32' or 'f64'")
        if self.checkpoint_every < 0:
            out.append("checkpoint_every: must be >= 0")
        if not 0 <= self.seed < 2**64:
            out.append("seed: must be an unsigned 64-bit integer")
        return out

    @classmethod
    def json_key(cls, name: str) -> str:
        return {v: k for k, v in cls._ALIASES.items()}.get(name, name)

    @property
    def episode(self) -> EpisodeSpec:
        return EpisodeSpec(self.C, self.S_tr, self.Q, self.S_te)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        return {self.json_key(f.name): getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        """Strict parse: unknown keys and wrong types are all reported together."""
        if not isinstance(obj, dict):
            raise ConfigError(["config: must be a JSON object"])
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs, problems = {}, []
        for key, value in obj.items():
            name = cls._ALIASES.get(key, key)
            if name not in fields:
                problems.append(f"{key}: unknown key")
                continue
            default = fields[name].default
            if isinstance(default, bool) or isinstance(value, bool):
                ok = type(value) is type(default)
            elif isinstance(default, int):
                ok = isinstance(value, int)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float))
                value = float(value) if ok else value
            else:
                ok = isinstance(value, type(default))
            if not ok:
                problems.append(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
                continue
            kwargs[name] = value
        cfg = None
        try:
            cfg = cls(**kwargs)
        except ConfigError as exc:
            problems.extend(exc.problems)
        if problems:
            raise ConfigError(problems)
        return cfg


def lr_at(cfg: TrainConfig, episode: int) -> float:
    """Step decay: multiply by the factor every ``lr_decay_every_epochs`` epochs."""
    if cfg.lr_decay_every_epochs == 0:
        return cfg.lr
    period = cfg.episodes_per_epoch * cfg.lr_decay_every_epochs
    return cfg.lr * cfg.lr_decay_factor ** (episode // period)


def decays(param: Parameter) -> bool:
    """Batch-norm scale/shift are exempt from weight decay."""
    return ".bn." not in param.name


def optimizer_step(params, lr: float, momentum: float, weight_decay: float, velocity: dict) -> None:
    """One momentum-SGD update in place; ``velocity`` maps parameter name to buffer.

    v <- momentum * v + grad;  p <- p - lr * (v + weight_decay * p)
    """
    for p in params:
        v = velocity.get(p.name)
        if v is None:
            v = velocity[p.name] = np.zeros_like(p.data)
        v *= momentum
        v += p.grad
        wd = weight_decay if decays(p) else 0.0
        update = v + wd * p.data if wd else v
        p.data -= (lr * update).astype(p.dtype, copy=False)


class SGD:
    """Momentum SGD with decoupled L2 decay (see :func:`optimizer_step`)."""

    def __init__(self, params: Iterable[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        optimizer_step(self.params, lr, self.momentum, self.weight_decay, self.velocity)


@dataclass
class TrainLogRecord:
    episode: int
    l_bal: float
    l_g: float
    l_ce: float
    episode_acc: float
    lr: float
    ms: float

    def row(self) -> list:
        return [self.episode, repr(self.l_bal), repr(self.l_g), repr(self.l_ce), repr(self.episode_acc),
                repr(self.lr), f"{self.ms:.1f}"]


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)
    seen: tuple = ()


def build_model(cfg: TrainConfig, num_seen: int, image_shape) -> Model:
    return Model(num_seen, image_shape[1:], cfg.seed, cfg.blocks, cfg.width, cfg.hidden, cfg.dtype)


class _LogWriter:
    def __init__(self, path: Optional[Path]):
        self.f = open(path, "w", newline="") if path else None
        self.w = csv.writer(self.f) if self.f else None
        if self.w:
            self.w.writerow(LOG_HEADER)

    def write(self, rec: TrainLogRecord) -> None:
        if self.w:
            self.w.writerow(rec.row())

    def close(self) -> None:
        if self.f:
            self.f.close()


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    split: SplitSpec,
    log_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
    objective: str = "balance",
    progress: Optional[Callable[[TrainLogRecord], None]] = None,
) -> TrainResult:
    """Episodic training on the seen classes.

    ``objective="balance"`` optimizes ``L_g + lambda * L_CE``.
    ``objective="fit_only"`` drops the metric head and optimizes
    ``lambda * L_CE`` alone (query points are not embedded; ``l_g`` is
    logged as 0 and ``episode_acc`` is the auxiliary head's support accuracy).
    """
    if objective not in ("balance", "fit_only"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "fit_only" and cfg.lam == 0.0:
        raise ConfigError(["lambda: the fit-only objective needs lambda > 0 (lambda = 0 leaves no training signal)"])
    index = dataset.index
    pool = split.seen_pool(index)
    seen = tuple(sorted(pool))
    aux_index = {k: i for i, k in enumerate(seen)}
    model = build_model(cfg, len(seen), index.image_shape)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    loss_cfg = LossConfig(cfg.lam)
    stream_seed = derive_seed(cfg.seed, "train-episodes")
    images = dataset.images.astype(cfg.dtype, copy=False)
    writer = _LogWriter(log_path)
    result = TrainResult(model, [], seen)
    try:
        for t in range(cfg.T):
            start = time.perf_counter()
            ep = build_episode(index, pool, cfg.episode, indexed_rng(stream_seed, t))
            lr = lr_at(cfg, t)
            s_ids, s_lab = ep.support_ids, ep.support_labels
            aux_labels = np.array([aux_index[ep.class_map[y]] for y in s_lab])
            feats_s = model.embed(images[s_ids], training=True, update_stats=True)
            fit_needed = cfg.lam > 0.0
            if fit_needed:
                l_ce = fit_loss(model.aux(feats_s), aux_labels)
            else:
                with no_grad():
                    l_ce = fit_loss(model.aux(Tensor(feats_s.data)), aux_labels)
            if objective == "balance":
                feats_q = model.embed(images[ep.query_ids], training=True, update_stats=False)
                centroids = compute_centroids(feats_s, s_lab)
                logp = log_posteriors(model.metric.scores(feats_q, centroids))
                l_g = generalization_loss(logp, ep.query_labels)
                loss = balance_loss(l_g, l_ce, loss_cfg)
                acc = float(np.mean(np.argmax(logp.data, axis=1) == ep.query_labels))
                l_g_val = l_g.item()
            else:
                loss = F.mul(l_ce, cfg.lam)
                with no_grad():
                    pred = np.argmax(model.aux(Tensor(feats_s.data)).data, axis=1)
                acc = float(np.mean(pred == aux_labels))
                l_g_val = 0.0
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at episode {t}")
            model.zero_grad()
            try:
                backward(loss)
            except NumericError as exc:
                raise NumericError(f"episode {t}: {exc}") from exc
            opt.step(lr)
            rec = TrainLogRecord(t, loss.item(), l_g_val, l_ce.item(), acc, lr, (time.perf_counter() - start) * 1e3)
            result.log.append(rec)
            writer.write(rec)
            if progress is not None:
                progress(rec)
            if checkpoint_path and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model)
    finally:
        writer.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model)
    return result


def train_plain(
    cfg: TrainConfig,
    dataset: Dataset,
    split: SplitSpec,
    log_path: Optional[Path] = None,
    progress: Optional[Callable[[TrainLogRecord], None]] = None,
) -> TrainResult:
    """Non-episodic baseline: shuffled mini-batches over all seen samples.

    Only the embedding and auxiliary head learn (cross-entropy over the
    seen classes). Each step uses a batch as large as one episode
    (``C*S_tr + Q*S_te`` images) and the same optimizer and schedule.
    """
    index = dataset.index
    pool = split.seen_pool(index)
    seen = tuple(sorted(pool))
    ids = np.array([i for k in seen for i in pool[k]], dtype=np.intp)
    aux_of = np.full(len(dataset), -1, dtype=np.intp)
    for j, k in enumerate(seen):
        aux_of[np.array(pool[k])] = j
    batch = min(len(ids), cfg.C * cfg.S_tr + cfg.Q * cfg.S_te)
    model = build_model(cfg, len(seen), index.image_shape)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    rng = component_rng(cfg.seed, "plain-batches")
    images = dataset.images.astype(cfg.dtype, copy=False)
    writer = _LogWriter(log_path)
    result = TrainResult(model, [], seen)
    order, pos = rng.permutation(ids), 0
    try:
        for t in range(cfg.T):
            start = time.perf_counter()
            if pos + batch > len(order):
                order, pos = rng.permutation(ids), 0
            b = order[pos : pos + batch]
            pos += batch
            lr = lr_at(cfg, t)
            logits = model.aux(model.embed(images[b], training=True, update_stats=True))
            loss = fit_loss(logits, aux_of[b])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at step {t}")
            model.zero_grad()
            backward(loss)
            opt.step(lr)
            acc = float(np.mean(np.argmax(logits.data, axis=1) == aux_of[b]))
            rec = TrainLogRecord(t, loss.item(), 0.0, loss.item(), acc, lr, (time.perf_counter() - start) * 1e3)
            result.log.append(rec)
            writer.write(rec)
            if progress is not None:
                progress(rec)
    finally:
        writer.close()
    return result
