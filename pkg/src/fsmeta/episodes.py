"""Episode (meta-task) construction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence, Union

import numpy as np

from .data import DatasetIndex
from .seeding import derive_seed, indexed_rng


class EpisodeError(ValueError):
    """The pool cannot supply the requested episode."""


@dataclass(frozen=True)
class EpisodeSpec:
    C: int = 5  # classes in the support set
    S_tr: int = 1  # support shots per class
    Q: int = 5  # classes in the query set
    S_te: int = 15  # query shots per class

    def __post_init__(self):
        if self.S_tr < 1 or self.S_te < 1:
            raise ValueError("S_tr and S_te must be >= 1")
        if not 1 <= self.Q <= self.C:
            raise ValueError(f"need 1 <= Q <= C, got Q={self.Q}, C={self.C}")


@dataclass(frozen=True)
class Episode:
    support: tuple  # (sample id, local label) pairs, C*S_tr of them
    query: tuple  # (sample id, local label) pairs, Q*S_te of them
    class_map: tuple  # local label -> global class id

    @property
    def support_ids(self) -> np.ndarray:
        return np.array([s for s, _ in self.support], dtype=np.intp)

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.support], dtype=np.intp)

    @property
    def query_ids(self) -> np.ndarray:
        return np.array([s for s, _ in self.query], dtype=np.intp)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.query], dtype=np.intp)

    def to_json(self) -> dict:
        return {
            "support": [int(s) for s, _ in self.support],
            "query": [int(s) for s, _ in self.query],
            "class_map": [int(k) for k in self.class_map],
        }


Pool = Union[Sequence[int], Mapping[int, Sequence[int]]]


def resolve_pool(index: DatasetIndex, pool: Pool) -> dict[int, tuple]:
    if isinstance(pool, Mapping):
        return {int(k): tuple(v) for k, v in pool.items()}
    return {int(k): index.samples_of(int(k)) for k in pool}


def build_episode(
    index: DatasetIndex,
    pool: Pool,
    spec: EpisodeSpec,
    rng: np.random.Generator,
    all_remaining: bool = False,
) -> Episode:
    """Sample one episode from ``pool``.

    C classes are drawn without replacement and labelled 0..C-1 in draw
    order. Per class, S_tr support samples are drawn; then Q of the C
    classes are chosen for the query set, each contributing S_te further
    samples (or every remaining sample when ``all_remaining`` is set).
    """
    pool = resolve_pool(index, pool)
    classes = sorted(pool)
    if len(classes) < spec.C:
        raise EpisodeError(f"pool has {len(classes)} classes, episode needs C={spec.C}")
    chosen = [classes[i] for i in rng.choice(len(classes), size=spec.C, replace=False)]
    query_local = sorted(int(i) for i in rng.choice(spec.C, size=spec.Q, replace=False))
    query_set = set(query_local)
    support, query = [], []
    for local, k in enumerate(chosen):
        ids = np.array(pool[k])
        need = spec.S_tr + (spec.S_te if local in query_set and not all_remaining else 0)
        if local in query_set and all_remaining:
            need = spec.S_tr + 1
        if len(ids) < need:
            raise EpisodeError(f"class {k} has {len(ids)} samples, episode needs {need}")
        order = rng.permutation(len(ids))
        support.extend((int(s), local) for s in ids[order[: spec.S_tr]])
        if local in query_set:
            rest = order[spec.S_tr :] if all_remaining else order[spec.S_tr : spec.S_tr + spec.S_te]
            query.extend((int(s), local) for s in ids[rest])
    return Episode(tuple(support), tuple(query), tuple(int(k) for k in chosen))


def episode_stream(
    index: DatasetIndex,
    pool: Pool,
    spec: EpisodeSpec,
    T: int,
    seed: int,
    component: str = "episodes",
    all_remaining: bool = False,
) -> Iterator[Episode]:
    """T independent episodes; episode ``t`` uses its own derived generator."""
    pool = resolve_pool(index, pool)
    stream_seed = derive_seed(seed, component)
    for t in range(T):
        yield build_episode(index, pool, spec, indexed_rng(stream_seed, t), all_remaining)


def dump_episodes(episodes: Sequence[Episode]) -> str:
    return json.dumps([e.to_json() for e in episodes])
