"""Training objective: cross-entropy plus symmetric pairwise KL terms.

Similar pairs are pulled toward matching class-probability vectors by a
symmetrized KL divergence; dissimilar pairs are pushed apart by hinges that
demand at least ``margin`` nats of divergence in each direction:

    total = ce + sim_weight * mean_similar[ KL(p||q) + KL(q||p) ]
               + dissim_weight * mean_dissimilar[ max(0, margin - KL(p||q))
                                                + max(0, margin - KL(q||p)) ]

All logarithms are natural; probabilities inside logs are clamped at
``epsilon``, and zero-probability terms of KL contribute exactly zero.
Gradients are analytic, with hinge and clamp kinks assigned subgradient 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-12

LOSS_CSV_HEADER = "epoch,total,ce,sim,dissim,n_similar,n_dissimilar"


@dataclass(frozen=True)
class LossConfig:
    """Objective hyperparameters (margin in nats, weights on the pair terms)."""

    margin: float = 1.0
    epsilon: float = DEFAULT_EPS
    sim_weight: float = 1.0
    dissim_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if not 0.0 < self.epsilon <= 1e-6:
            raise ValueError(f"epsilon must be in (0, 1e-6], got {self.epsilon}")
        if self.sim_weight < 0 or self.dissim_weight < 0:
            raise ValueError("pair-term weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    """One batch (or epoch) of loss terms plus the pair counts behind them."""

    total: float
    ce_term: float
    sim_term: float
    dissim_term: float
    n_similar: int
    n_dissimilar: int

    def csv_row(self, epoch: int) -> str:
        return (f"{epoch},{self.total!r},{self.ce_term!r},{self.sim_term!r},"
                f"{self.dissim_term!r},{self.n_similar},{self.n_dissimilar}")


# ---------------------------------------------------------------------------
# elementary operations (single vectors)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a 1-D logit vector (>= 2 classes)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("logits must be a 1-D vector with at least two classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    return _softmax_rows(z[None, :])[0]


def cross_entropy(probs, label: int, epsilon: float = DEFAULT_EPS) -> float:
    """-log of the probability assigned to ``label``, clamped at ``epsilon``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probs must be a 1-D probability vector")
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} out of range for {p.size} classes")
    return float(-np.log(max(float(p[label]), epsilon)))


def kl_div(p, q, epsilon: float = DEFAULT_EPS) -> float:
    """KL(p || q) in nats; zero-probability terms of p contribute exactly 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return float(_kl_rows(p[None, :], q[None, :], epsilon)[0])


def sim_pair_loss(p, q, epsilon: float = DEFAULT_EPS) -> float:
    """Symmetrized divergence KL(p||q) + KL(q||p)."""
    return kl_div(p, q, epsilon) + kl_div(q, p, epsilon)


def dissim_pair_loss(p, q, margin: float = 1.0, epsilon: float = DEFAULT_EPS) -> float:
    """Two-sided hinge: max(0, margin - KL(p||q)) + max(0, margin - KL(q||p))."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    return (max(0.0, margin - kl_div(p, q, epsilon))
            + max(0.0, margin - kl_div(q, p, epsilon)))


# ---------------------------------------------------------------------------
# batched objective


def total_loss(logits, labels, pairs, cfg: LossConfig) -> LossReport:
    """Evaluate the full objective on a batch of logits.

    Args:
        logits: (B, K) array of raw scores.
        labels: (B,) integer class ids in [0, K).
        pairs: a :class:`~mfid.dataset.PairBatch` or any iterable of
            ``(a, b, similar)`` triples whose indices address batch rows.
            An empty batch skips the pair terms.
        cfg: objective hyperparameters.

    The cross-entropy term averages over all B rows; each pair term averages
    over its own pair count and is zero when that count is zero.
    """
    report, _ = _loss_and_grad(logits, labels, pairs, cfg, want_grad=False)
    return report


def loss_gradient(logits, labels, pairs, cfg: LossConfig) -> np.ndarray:
    """d(total)/d(logits) for the same batch layout as :func:`total_loss`."""
    _, grad = _loss_and_grad(logits, labels, pairs, cfg, want_grad=True)
    return grad


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _kl_rows(p: np.ndarray, q: np.ndarray, epsilon: float) -> np.ndarray:
    log_ratio = np.log(np.maximum(p, epsilon)) - np.log(np.maximum(q, epsilon))
    return np.where(p > 0.0, p * log_ratio, 0.0).sum(axis=1)


def _pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accept a PairBatch or any iterable of (a, b, similar) triples."""
    if hasattr(pairs, "index_arrays"):
        return pairs.index_arrays()
    triples = list(pairs)
    if not triples:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), np.empty(0, dtype=bool)
    a, b, sim = zip(*triples)
    return (np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64),
            np.asarray(sim, dtype=bool))


def _loss_and_grad(logits, labels, pairs, cfg: LossConfig,
                   want_grad: bool) -> tuple[LossReport, np.ndarray | None]:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError("logits must be a (B, K) array with K >= 2")
    batch, n_classes = z.shape
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError("label out of range for logit width")
    first, second, sim_mask = _pair_arrays(pairs)
    if first.size and max(first.max(), second.max()) >= batch:
        raise ValueError("pair index out of range for batch")

    probs = _softmax_rows(z)
    rows = np.arange(batch)
    ce_term = float(np.mean(-np.log(np.maximum(probs[rows, y], cfg.epsilon))))

    grad = None
    if want_grad:
        grad = probs.copy()
        grad[rows, y] -= 1.0
        grad /= batch

    log_probs = np.log(np.maximum(probs, cfg.epsilon))
    sim_term = 0.0
    dissim_term = 0.0
    n_similar = int(sim_mask.sum())
    n_dissimilar = int((~sim_mask).sum()) if sim_mask.size else 0

    for similar in (True, False):
        mask = sim_mask if similar else ~sim_mask
        count = n_similar if similar else n_dissimilar
        if count == 0:
            continue
        a_idx, b_idx = first[mask], second[mask]
        pa, pb = probs[a_idx], probs[b_idx]
        log_ratio = log_probs[a_idx] - log_probs[b_idx]
        kl_ab = np.where(pa > 0.0, pa * log_ratio, 0.0).sum(axis=1)
        kl_ba = np.where(pb > 0.0, pb * -log_ratio, 0.0).sum(axis=1)
        if similar:
            sim_term = float(np.mean(kl_ab + kl_ba))
        else:
            dissim_term = float(np.mean(np.maximum(0.0, cfg.margin - kl_ab)
                                        + np.maximum(0.0, cfg.margin - kl_ba)))
        if not want_grad:
            continue
        # d/dz_a KL(pa||pb) = pa * (log_ratio - KL);  d/dz_b KL(pa||pb) = pb - pa.
        d_a_klab = pa * (log_ratio - kl_ab[:, None])
        d_b_klab = pb - pa
        d_b_klba = pb * (-log_ratio - kl_ba[:, None])
        d_a_klba = pa - pb
        if similar:
            weight = cfg.sim_weight / count
            d_a = d_a_klab + d_a_klba
            d_b = d_b_klab + d_b_klba
        else:
            weight = cfg.dissim_weight / count
            # Hinges are active only below the margin; exactly at the margin
            # the subgradient is taken as zero.
            active_ab = (kl_ab < cfg.margin)[:, None]
            active_ba = (kl_ba < cfg.margin)[:, None]
            d_a = -(active_ab * d_a_klab) - (active_ba * d_a_klba)
            d_b = -(active_ab * d_b_klab) - (active_ba * d_b_klba)
        np.add.at(grad, a_idx, weight * d_a)
        np.add.at(grad, b_idx, weight * d_b)

    total = ce_term + cfg.sim_weight * sim_term + cfg.dissim_weight * dissim_term
    report = LossReport(total=total, ce_term=ce_term, sim_term=sim_term,
                        dissim_term=dissim_term, n_similar=n_similar,
                        n_dissimilar=n_dissimilar)
    return report, grad
