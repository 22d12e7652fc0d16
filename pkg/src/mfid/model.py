"""Embedding heads over precomputed features, trained with plain SGD.

Two architectures:

* ``linear``  — logits = W x + b; the downstream embedding is x itself.
* ``mlp1``    — one ReLU hidden layer; the hidden activation is the
  downstream embedding and a linear readout produces the logits.

Weights are initialized zero-mean with standard deviation 1/sqrt(fan_in);
biases start at zero.  The learning rate follows a step decay:
``initial_lr * decay_factor ** (epoch // decay_every)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, PairBatch, Split, build_pair_constraints, dense_relabel, sample_pair_batch
from .loss import LossConfig, LossReport, _loss_and_grad

CHECKPOINT_MAGIC = b"MFHD"
CHECKPOINT_VERSION = 1

ARCHITECTURES = ("linear", "mlp1")
_ARCH_TAGS = {"linear": 1, "mlp1": 2}
_PARAM_ORDER = {"linear": ("w", "b"), "mlp1": ("w1", "b1", "w2", "b2")}

OBJECTIVES = ("mfid", "cross_entropy")


@dataclass
class EmbeddingHead:
    """Parameter container for one head; treat instances as immutable."""

    architecture: str
    input_dim: int
    embed_dim: int
    n_classes: int
    params: dict[str, np.ndarray]

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_head(architecture: str, input_dim: int, embed_dim: int, n_classes: int,
              seed) -> EmbeddingHead:
    """Deterministically initialize a head (fan-in scaled weights, zero biases)."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    if input_dim < 1 or n_classes < 2:
        raise ValueError("need input_dim >= 1 and n_classes >= 2")
    rng = np.random.default_rng(seed)
    if architecture == "linear":
        params = {
            "w": rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(n_classes, input_dim)),
            "b": np.zeros(n_classes),
        }
        embed_dim = input_dim  # the linear head passes features through untouched
    else:
        if embed_dim < 1:
            raise ValueError("mlp1 needs embed_dim >= 1")
        params = {
            "w1": rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(embed_dim, input_dim)),
            "b1": np.zeros(embed_dim),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(embed_dim), size=(n_classes, embed_dim)),
            "b2": np.zeros(n_classes),
        }
    return EmbeddingHead(architecture, input_dim, embed_dim, n_classes, params)


def _forward_batch(head: EmbeddingHead, x: np.ndarray):
    """Returns (embedding, pre-activation or None, logits) for a (B, d) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.input_dim:
        raise ValueError(
            f"input dim {x.shape[-1] if x.ndim else '?'} does not match head input dim "
            f"{head.input_dim}")
    p = head.params
    if head.architecture == "linear":
        return x, None, x @ p["w"].T + p["b"]
    pre = x @ p["w1"].T + p["b1"]
    hidden = np.maximum(pre, 0.0)
    return hidden, pre, hidden @ p["w2"].T + p["b2"]


def forward(head: EmbeddingHead, x) -> tuple[np.ndarray, np.ndarray]:
    """(embedding, logits) for a single feature vector of length input_dim."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single 1-D feature vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature value")
    emb, _, logits = _forward_batch(head, x[None, :])
    return emb[0], logits[0]


def embed(head: EmbeddingHead, x) -> np.ndarray:
    """Downstream embeddings for a (B, d) batch (raw input for linear heads)."""
    emb, _, _ = _forward_batch(head, x)
    return emb


def logits(head: EmbeddingHead, x) -> np.ndarray:
    """Class logits for a (B, d) batch."""
    _, _, z = _forward_batch(head, x)
    return z


def backprop(head: EmbeddingHead, x, labels, pairs: PairBatch,
             loss_cfg: LossConfig) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Loss report plus d(total)/d(parameter) for one batch."""
    x = np.asarray(x, dtype=np.float64)
    hidden, pre, z = _forward_batch(head, x)
    report, g = _loss_and_grad(z, labels, pairs, loss_cfg, want_grad=True)
    p = head.params
    if head.architecture == "linear":
        grads = {"w": g.T @ x, "b": g.sum(axis=0)}
    else:
        d_hidden = g @ p["w2"]
        d_pre = d_hidden * (pre > 0.0)  # ReLU subgradient 0 at the kink
        grads = {
            "w1": d_pre.T @ x,
            "b1": d_pre.sum(axis=0),
            "w2": g.T @ hidden,
            "b2": g.sum(axis=0),
        }
    return report, grads


def sgd_step(head: EmbeddingHead, grads: dict[str, np.ndarray], lr: float) -> EmbeddingHead:
    """One plain gradient step; returns a new head, inputs untouched."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    new_params = {}
    for name, value in head.params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{value.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name!r}")
        new_params[name] = value - lr * g
    return EmbeddingHead(head.architecture, head.input_dim, head.embed_dim,
                         head.n_classes, new_params)


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs besides the data itself."""

    epochs: int = 50
    batch_pairs: int = 16
    initial_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 20
    objective: str = "mfid"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    architecture: str = "mlp1"
    embed_dim: int = 32
    similar_fraction: float = 0.5
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be at least 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be at least 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if not 0.0 <= self.similar_fraction <= 1.0:
            raise ValueError("similar_fraction must be in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass(frozen=True)
class TrainedModel:
    head: EmbeddingHead
    config: TrainConfig
    loss_history: tuple[LossReport, ...]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: initial_lr * decay_factor ** (epoch // decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def train(ds: Dataset, split: Split, cfg: TrainConfig) -> TrainedModel:
    """Train a head on the split's training side.

    Train-side labels are relabeled densely, so identity-disjoint training
    works out of the box (the head's class count equals the number of
    training identities).  Each epoch runs ceil(n_train / (2 * batch_pairs))
    steps; every step draws a full-size batch — pair batches for the "mfid"
    objective, plain uniform sample batches for "cross_entropy" — so batch
    composition and term normalization stay exact.

    Determinism: a fixed (dataset, split, config) always yields bit-identical
    parameters and loss history.
    """
    x = ds.features[split.train_indices]
    y, class_ids = dense_relabel(ds.labels[split.train_indices])
    if class_ids.size < 2:
        raise ValueError("training requires at least two identities on the train side")
    root = np.random.SeedSequence(cfg.seed)
    init_stream, batch_stream = root.spawn(2)
    head = init_head(cfg.architecture, x.shape[1], cfg.embed_dim, class_ids.size,
                     init_stream)
    rng = np.random.default_rng(batch_stream)

    n_train = x.shape[0]
    batch_images = 2 * cfg.batch_pairs
    steps = max(1, math.ceil(n_train / batch_images))
    use_pairs = cfg.objective == "mfid"
    if use_pairs:
        subset = Dataset(x, y)
        constraints = build_pair_constraints(y)
    empty_pairs = PairBatch((), 0)
    velocity = ({name: np.zeros_like(p) for name, p in head.params.items()}
                if cfg.momentum > 0 else None)

    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        sums = np.zeros(3)
        counts = np.zeros(2, dtype=np.int64)
        for step in range(steps):
            if use_pairs:
                batch = sample_pair_batch(subset, cfg.batch_pairs,
                                          cfg.similar_fraction, rng,
                                          constraints=constraints)
                rows = np.fromiter((i for a, b, _ in batch.pairs for i in (a, b)),
                                   dtype=np.int64, count=batch.image_count)
                local = PairBatch(tuple((2 * k, 2 * k + 1, sim)
                                        for k, (_, _, sim) in enumerate(batch.pairs)),
                                  batch.image_count)
            else:
                rows = rng.choice(n_train, size=min(batch_images, n_train), replace=False)
                local = empty_pairs
            report, grads = backprop(head, x[rows], y[rows], local, cfg.loss)
            if not math.isfinite(report.total):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, step {step}")
            if velocity is not None:
                for name in grads:
                    velocity[name] = cfg.momentum * velocity[name] + grads[name]
                head = sgd_step(head, velocity, lr)
            else:
                head = sgd_step(head, grads, lr)
            sums += (report.ce_term, report.sim_term, report.dissim_term)
            counts += (report.n_similar, report.n_dissimilar)
        ce, sim, dissim = sums / steps
        total = ce + cfg.loss.sim_weight * sim + cfg.loss.dissim_weight * dissim
        history.append(LossReport(total=float(total), ce_term=float(ce),
                                  sim_term=float(sim), dissim_term=float(dissim),
                                  n_similar=int(counts[0]), n_dissimilar=int(counts[1])))
    return TrainedModel(head, cfg, tuple(history))


# ---------------------------------------------------------------------------
# checkpoints


def save_head(head: EmbeddingHead, path) -> None:
    """Binary checkpoint: magic, version, architecture tag, dims, parameters.

    Parameters are written as little-endian float64 in a fixed order:
    linear (w, b); mlp1 (w1, b1, w2, b2); matrices row-major.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<IIII", _ARCH_TAGS[head.architecture],
                             head.input_dim, head.embed_dim, head.n_classes))
        for name in _PARAM_ORDER[head.architecture]:
            fh.write(np.ascontiguousarray(head.params[name], dtype="<f8").tobytes())


def load_head(path) -> EmbeddingHead:
    blob = open(path, "rb").read()
    header = struct.calcsize("<4sIIIII")
    if len(blob) < header:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, tag, input_dim, embed_dim, n_classes = struct.unpack_from(
        "<4sIIIII", blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    by_tag = {v: k for k, v in _ARCH_TAGS.items()}
    if tag not in by_tag:
        raise ValueError(f"{path}: unknown architecture tag {tag}")
    architecture = by_tag[tag]
    if architecture == "linear":
        shapes = {"w": (n_classes, input_dim), "b": (n_classes,)}
    else:
        shapes = {"w1": (embed_dim, input_dim), "b1": (embed_dim,),
                  "w2": (n_classes, embed_dim), "b2": (n_classes,)}
    expected = header + sum(int(np.prod(s)) for s in shapes.values()) * 8
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    params = {}
    offset = header
    for name in _PARAM_ORDER[architecture]:
        shape = shapes[name]
        count = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).astype(np.float64)
        offset += count * 8
    return EmbeddingHead(architecture, input_dim, embed_dim, n_classes, params)
