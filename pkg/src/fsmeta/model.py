"""Embedding network, class centroids, metric head and checkpoints."""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .numerics import functional as F
from .numerics.functional import BatchNormState
from .numerics.serialize import FormatError, read_tensor, write_tensor
from .numerics.tensor import Parameter, Tensor
from .seeding import component_rng

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


class CheckpointError(FormatError):
    """Malformed checkpoint, or one that does not match the model it is loaded into."""


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class EmbeddingNet:
    """Stack of conv3x3(pad 1) -> batch norm -> ReLU -> 2x2 max-pool blocks."""

    def __init__(self, rng: np.random.Generator, blocks: int = 4, width: int = 64, in_channels: int = 3, dtype=np.float32):
        self.blocks = blocks
        self.width = width
        self.params: list[Parameter] = []
        self.layers = []
        self.bn_states: list[BatchNormState] = []
        cin = in_channels
        for b in range(1, blocks + 1):
            p = f"embed.block{b}"
            w = Parameter(_uniform_fan_in(rng, (width, cin, 3, 3), cin * 9, dtype), f"{p}.conv.weight")
            bias = Parameter(np.zeros(width, dtype), f"{p}.conv.bias")
            gamma = Parameter(np.ones(width, dtype), f"{p}.bn.gamma")
            beta = Parameter(np.zeros(width, dtype), f"{p}.bn.beta")
            state = BatchNormState.fresh(width, dtype)
            self.layers.append((w, bias, gamma, beta, state))
            self.params += [w, bias, gamma, beta]
            self.bn_states.append(state)
            cin = width

    def output_dim(self, height: int, width: int) -> int:
        f = 2**self.blocks
        return self.width * (height // f) * (width // f)

    def check_input(self, shape: tuple) -> None:
        f = 2**self.blocks
        if len(shape) != 4 or shape[1] != self.layers[0][0].shape[1]:
            raise ValueError(f"embed expects [N,{self.layers[0][0].shape[1]},H,W], got {shape}")
        if shape[2] < f or shape[3] < f or shape[2] % f or shape[3] % f:
            raise ValueError(f"embed needs H and W divisible by {f} and >= {f}, got {shape[2:]}")

    def __call__(self, images, training: bool, update_stats: bool = True) -> Tensor:
        """``[N, 3, H, W]`` images -> ``[N, D]`` features (NCHW flattening order)."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.layers[0][0].dtype))
        self.check_input(x.shape)
        # blocks run channel-major; the input has no gradient so the transpose is free
        x = Tensor(np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))) if not x.requires_grad else F.transpose(x, (1, 0, 2, 3))
        for w, bias, gamma, beta, state in self.layers:
            x = F.conv2d(x, w, bias, padding=1, layout="CNHW")
            x = F.batch_norm2d(x, gamma, beta, state, training, update_stats, layout="CNHW")
            # ReLU commutes with max, so pooling first touches 4x fewer values
            x = F.relu(F.max_pool2d(x))
        x = F.transpose(x, (1, 0, 2, 3))
        return F.reshape(x, (x.shape[0], -1))


class MetricHead:
    """Learned pair scorer: lower score means the query is closer to the centroid.

    score(q, o) = w_out . ReLU(W_h [q, o, (q - o)^2] + b_h) + b_out

    ``w_out`` starts at zero, so an untrained head gives uniform posteriors.
    """

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int = 64, dtype=np.float32):
        self.dim = dim
        self.hidden_w = Parameter(_uniform_fan_in(rng, (hidden, 3 * dim), 3 * dim, dtype), "metric.hidden.weight")
        self.hidden_b = Parameter(np.zeros(hidden, dtype), "metric.hidden.bias")
        self.out_w = Parameter(np.zeros((1, hidden), dtype), "metric.out.weight")
        self.out_b = Parameter(np.zeros(1, dtype), "metric.out.bias")
        self.params = [self.hidden_w, self.hidden_b, self.out_w, self.out_b]

    def pair_features(self, queries: Tensor, centroids: Tensor) -> Tensor:
        nq, nc = queries.shape[0], centroids.shape[0]
        if queries.shape[1] != self.dim or centroids.shape[1] != self.dim:
            raise ValueError(f"metric head expects dim {self.dim}, got {queries.shape[1]} / {centroids.shape[1]}")
        q = F.take_rows(queries, np.repeat(np.arange(nq), nc))
        o = F.take_rows(centroids, np.tile(np.arange(nc), nq))
        return F.concat([q, o, F.square(F.sub(q, o))], axis=1)

    def scores(self, queries: Tensor, centroids: Tensor) -> Tensor:
        """``[n_query, n_centroid]`` matrix of scores."""
        feats = self.pair_features(queries, centroids)
        h = F.relu(F.linear(feats, self.hidden_w, self.hidden_b))
        s = F.linear(h, self.out_w, self.out_b)
        return F.reshape(s, (queries.shape[0], centroids.shape[0]))


class AuxHead:
    """Linear classifier over all seen classes; only used for the fit loss."""

    def __init__(self, rng: np.random.Generator, dim: int, num_classes: int, dtype=np.float32):
        self.weight = Parameter(_uniform_fan_in(rng, (num_classes, dim), dim, dtype), "aux.weight")
        self.bias = Parameter(np.zeros(num_classes, dtype), "aux.bias")
        self.params = [self.weight, self.bias]

    def __call__(self, features: Tensor) -> Tensor:
        return F.linear(features, self.weight, self.bias)


class Model:
    """Embedding + metric head + auxiliary head, with named state for checkpoints."""

    def __init__(
        self,
        num_seen: int,
        image_hw: Sequence[int] = (32, 32),
        seed: int = 0,
        blocks: int = 4,
        width: int = 64,
        hidden: int = 64,
        dtype=np.float32,
    ):
        rng = component_rng(seed, "init")
        self.dtype = np.dtype(dtype)
        self.image_hw = tuple(int(v) for v in image_hw)
        self.embed = EmbeddingNet(rng, blocks, width, 3, dtype)
        self.dim = self.embed.output_dim(*self.image_hw)
        if self.dim == 0:
            raise ValueError(f"image size {self.image_hw} too small for {blocks} pooling blocks")
        self.metric = MetricHead(rng, self.dim, hidden, dtype)
        self.aux = AuxHead(rng, self.dim, num_seen, dtype)
        self.config = {"num_seen": num_seen, "image_hw": list(self.image_hw), "blocks": blocks,
                       "width": width, "hidden": hidden}

    def parameters(self) -> list[Parameter]:
        return self.embed.params + self.metric.params + self.aux.params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for p in self.parameters():
            state[p.name] = p.data
        for b, st in enumerate(self.embed.bn_states, start=1):
            state[f"embed.block{b}.bn.running_mean"] = st.running_mean
            state[f"embed.block{b}.bn.running_var"] = st.running_var
        return state

    def load_state_dict(self, state: dict) -> None:
        """Copy tensors in, after checking every name and shape (all or nothing)."""
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise CheckpointError(f"checkpoint is missing parameter(s): {', '.join(missing)}")
        unexpected = [k for k in state if k not in own]
        if unexpected:
            raise CheckpointError(f"checkpoint has unknown parameter(s): {', '.join(unexpected)}")
        for k, arr in own.items():
            if tuple(state[k].shape) != arr.shape:
                raise CheckpointError(f"shape mismatch for {k}: checkpoint {tuple(state[k].shape)}, model {arr.shape}")
        for k, arr in own.items():
            arr[...] = state[k]

    @classmethod
    def from_state(cls, state: dict, image_hw: Sequence[int], hidden: Optional[int] = None) -> "Model":
        """Build a model whose architecture matches a saved state."""
        blocks = sum(1 for k in state if k.endswith(".conv.weight"))
        width = state["embed.block1.conv.weight"].shape[0]
        hidden = state["metric.hidden.weight"].shape[0] if hidden is None else hidden
        dtype = state["embed.block1.conv.weight"].dtype
        model = cls(state["aux.weight"].shape[0], image_hw, 0, blocks, width, hidden, dtype)
        model.load_state_dict(state)
        return model


# ---------------------------------------------------------------- centroids and distances


def centroid_coefficient(num_classes: int, support_size: int) -> float:
    """The C / |support| weight of a class sum; 1 / S_tr on balanced episodes."""
    return num_classes / support_size


def compute_centroids(features: Tensor, labels: Sequence[int]) -> Tensor:
    """Per-class centroids ``(C / |support|) * sum of that class's features``.

    Requires a balanced support set (same count for every label 0..C-1).
    """
    labels = np.asarray(labels, dtype=np.intp)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=num_classes)
    if num_classes == 0 or np.any(counts != counts[0]):
        raise ValueError(f"unbalanced support set: per-label counts {counts.tolist()}")
    coef = centroid_coefficient(num_classes, labels.size)
    assign = np.zeros((num_classes, labels.size), dtype=features.dtype)
    assign[labels, np.arange(labels.size)] = coef
    return F.matmul(Tensor(assign), features)


def metric_score(head: MetricHead, query: Tensor, centroid: Tensor) -> Tensor:
    """Score of a single (query, centroid) pair as a 0-d tensor."""
    s = head.scores(F.reshape(query, (1, -1)), F.reshape(centroid, (1, -1)))
    return F.reshape(s, ())


def log_posteriors(scores: Tensor) -> Tensor:
    """Row-wise ``log p(y=k|x) = log softmax(-score)``."""
    return F.log_softmax(F.mul(scores, -1.0))


def class_posterior(head: MetricHead, query: Tensor, centroids: Tensor) -> np.ndarray:
    """Probability vector over the centroids for one query."""
    s = head.scores(F.reshape(query, (1, -1)), centroids)
    return np.exp(log_posteriors(s).data[0])


def fixed_distance(kind: str, query: np.ndarray, centroid: np.ndarray) -> float:
    q = np.asarray(query, dtype=np.float64)
    o = np.asarray(centroid, dtype=np.float64)
    return float(pairwise_distance(kind, q[None], o[None])[0, 0])


def pairwise_distance(kind: str, queries: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean or cosine distance for every (query, centroid) pair."""
    q = np.asarray(queries)
    o = np.asarray(centroids)
    if kind == "euclidean":
        diff = q[:, None, :] - o[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    if kind == "cosine":
        qn = np.linalg.norm(q, axis=1)
        on = np.linalg.norm(o, axis=1)
        if np.any(qn == 0) or np.any(on == 0):
            raise ValueError("cosine distance undefined for a zero vector")
        return 1.0 - (q @ o.T) / np.outer(qn, on)
    raise ValueError(f"unknown distance {kind!r}")


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(f, state: dict) -> None:
    f.write(CKPT_MAGIC)
    f.write(struct.pack("<II", CKPT_VERSION, len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        write_tensor(f, arr)


def read_checkpoint(f) -> "OrderedDict[str, np.ndarray]":
    head = f.read(12)
    if len(head) < 12:
        raise CheckpointError("truncated checkpoint header")
    if head[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {head[:4]!r}")
    version, count = struct.unpack("<II", head[4:])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        raw = f.read(2)
        if len(raw) < 2:
            raise CheckpointError("truncated checkpoint entry")
        (n,) = struct.unpack("<H", raw)
        name = f.read(n)
        if len(name) < n:
            raise CheckpointError("truncated checkpoint entry name")
        try:
            state[name.decode("utf-8")] = read_tensor(f)
        except FormatError as exc:
            raise CheckpointError(f"bad tensor in checkpoint: {exc}") from exc
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return state


def save_checkpoint(path: Union[str, Path], model_or_state) -> None:
    state = model_or_state.state_dict() if isinstance(model_or_state, Model) else model_or_state
    buf = io.BytesIO()
    write_checkpoint(buf, state)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return read_checkpoint(f)
