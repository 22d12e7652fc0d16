"""Biometric evaluation protocols over embedding vectors.

All protocols work on cosine similarity between L2-normalized embeddings.

* classification — argmax over logits on seen identities.
* closed set — per trial, draw a small gallery per identity; every probe's
  identity score is the max similarity over that identity's gallery images;
  report CMC / Rank-k over many trials.
* open set — some identities appear only as probes (distractors); a
  threshold is calibrated so the distractor accept rate stays at or below
  ``far_target``, and DIR counts mated probes that are both accepted and
  rank-1 correct.
* verification — per sample, one positive score (best same-identity match,
  self excluded) and one negative score per other identity; report TAR at
  ``far_target`` plus the full ROC.

Thresholds are always the smallest observed non-mated score value whose
false accept rate is within target (accepting ties at >= threshold, no
interpolation); if no observed value qualifies, the threshold moves just
above the largest non-mated score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, identity_disjoint_split
from .model import EmbeddingHead, TrainedModel, embed, logits


@dataclass(frozen=True)
class TrialConfig:
    """Shared knobs for the trial-based protocols.

    ``far_target`` may be 1.0, which degenerates to a threshold that accepts
    everything.  ``distractor_mode`` is "fixed" (one distractor identity set
    per evaluation, matching a fixed probe-only identity list) or
    "per_trial" (re-drawn each trial).
    """

    trials: int = 100
    gallery_images_per_identity: int = 1
    distractor_identities: int = 6
    far_target: float = 0.01
    seed: int = 0
    distractor_mode: str = "fixed"

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.gallery_images_per_identity < 1:
            raise ValueError("gallery_images_per_identity must be at least 1")
        if self.distractor_identities < 1:
            raise ValueError("distractor_identities must be at least 1")
        if not 0.0 < self.far_target <= 1.0:
            raise ValueError(f"far_target must be in (0, 1], got {self.far_target}")
        if self.distractor_mode not in ("fixed", "per_trial"):
            raise ValueError(f"unknown distractor_mode {self.distractor_mode!r}")


@dataclass(frozen=True)
class EvalReport:
    """Per-trial metric values with their mean/std and any curve points."""

    protocol: str
    values: tuple[float, ...]
    mean: float
    std: float
    curve: tuple[tuple[float, float], ...] = ()
    thresholds: tuple[float, ...] = ()

    @classmethod
    def from_values(cls, protocol: str, values, curve=(), thresholds=()) -> "EvalReport":
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            raise ValueError("report needs at least one metric value")
        return cls(protocol, tuple(float(x) for x in v), float(v.mean()),
                   float(v.std()), tuple((float(a), float(b)) for a, b in curve),
                   tuple(float(t) for t in thresholds))


@dataclass(frozen=True)
class ScoreMatrix:
    """Probe-by-gallery similarity scores with the labels on both axes."""

    scores: np.ndarray
    probe_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        probe = np.asarray(self.probe_labels)
        gallery = np.asarray(self.gallery_labels)
        if scores.shape != (probe.size, gallery.size):
            raise ValueError(f"score shape {scores.shape} does not match "
                             f"{probe.size} probes x {gallery.size} gallery")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "probe_labels", probe)
        object.__setattr__(self, "gallery_labels", gallery)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; errors on zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm {what} embedding at index {int(zero[0])}")
    return x / norms[:, None]


def score_matrix(probe_embeddings, probe_labels, gallery_embeddings,
                 gallery_labels) -> ScoreMatrix:
    """All pairwise cosine similarities between probes and gallery samples."""
    p = _unit_rows(probe_embeddings, "probe")
    g = _unit_rows(gallery_embeddings, "gallery")
    if p.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: {p.shape[1]} vs {g.shape[1]}")
    scores = np.clip(p @ g.T, -1.0, 1.0)
    return ScoreMatrix(scores, np.asarray(probe_labels), np.asarray(gallery_labels))


def classification_accuracy(model, features, labels) -> float:
    """Fraction of argmax-correct logits (ties resolve to the lowest class id)."""
    head = model.head if isinstance(model, TrainedModel) else model
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() >= head.n_classes):
        raise ValueError("label outside the model's class range")
    z = logits(head, features)
    return float(np.mean(np.argmax(z, axis=1) == y))


# ---------------------------------------------------------------------------
# ranking


def identity_max_scores(sm: ScoreMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool gallery scores per identity.

    Returns:
        (P, G_id) array of per-identity scores and the sorted identity ids
        forming its columns.
    """
    ids = np.unique(sm.gallery_labels)
    pooled = np.empty((sm.scores.shape[0], ids.size))
    for col, ident in enumerate(ids):
        pooled[:, col] = sm.scores[:, sm.gallery_labels == ident].max(axis=1)
    return pooled, ids


def probe_ranks(id_scores: np.ndarray, gallery_ids: np.ndarray,
                probe_labels) -> np.ndarray:
    """1-based rank of each probe's true identity (score ties -> lowest id).

    The rank counts identities scoring strictly higher, plus equal-scoring
    identities with a lower id, plus one.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64)
    gallery_ids = np.asarray(gallery_ids)
    probe_labels = np.asarray(probe_labels)
    cols = np.searchsorted(gallery_ids, probe_labels)
    if np.any(cols >= gallery_ids.size) or np.any(gallery_ids[cols] != probe_labels):
        raise ValueError("probe identity missing from the gallery")
    rows = np.arange(id_scores.shape[0])
    true_scores = id_scores[rows, cols]
    higher = (id_scores > true_scores[:, None]).sum(axis=1)
    tied_lower = ((id_scores == true_scores[:, None])
                  & (gallery_ids[None, :] < probe_labels[:, None])).sum(axis=1)
    return (1 + higher + tied_lower).astype(np.int64)


# ---------------------------------------------------------------------------
# thresholds


def far_threshold(nonmated_scores, far_target: float) -> float:
    """Smallest observed score value whose false accept rate is <= target.

    Acceptance is ``score >= threshold``.  If even the largest observed value
    over-accepts, the threshold moves one float ulp above it; a target of 1.0
    returns -inf (accept everything).
    """
    scores = np.asarray(nonmated_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no non-mated scores to calibrate a threshold")
    if not 0.0 < far_target <= 1.0:
        raise ValueError(f"far_target must be in (0, 1], got {far_target}")
    if far_target == 1.0:
        return float("-inf")
    allowed = math.floor(far_target * scores.size + 1e-9)
    values = np.unique(scores)  # ascending
    ordered = np.sort(scores)
    count_at_or_above = scores.size - np.searchsorted(ordered, values, side="left")
    qualifying = values[count_at_or_above <= allowed]
    if qualifying.size:
        return float(qualifying[0])
    return float(np.nextafter(values[-1], np.inf))


def tar_at_far(positive_scores, negative_scores, far_target: float) -> tuple[float, float]:
    """(true accept rate, threshold) with the threshold set on the negatives."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    if pos.size == 0:
        raise ValueError("no positive scores")
    tau = far_threshold(negative_scores, far_target)
    return float(np.mean(pos >= tau)), tau


def dir_at_far(mated_scores, mated_rank1_correct, nonmated_scores,
               far_target: float) -> tuple[float, float]:
    """(detection & identification rate, threshold).

    A mated probe counts only if its top identity score passes the threshold
    AND its rank-1 identity is correct.
    """
    mated = np.asarray(mated_scores, dtype=np.float64)
    correct = np.asarray(mated_rank1_correct, dtype=bool)
    if mated.shape != correct.shape:
        raise ValueError("mated scores and correctness flags must align")
    if mated.size == 0:
        raise ValueError("no mated probes")
    tau = far_threshold(nonmated_scores, far_target)
    return float(np.mean((mated >= tau) & correct)), tau


def roc_points(positive_scores, negative_scores) -> tuple[tuple[float, float], ...]:
    """(FAR, TAR) at every distinct pooled score, plus the accept-nothing point."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs both positive and negative scores")
    pooled = np.unique(np.concatenate([pos, neg]))
    thresholds = np.append(np.nextafter(pooled[-1], np.inf), pooled[::-1])
    points = []
    for tau in thresholds:
        points.append((float(np.mean(neg >= tau)), float(np.mean(pos >= tau))))
    return tuple(points)


# ---------------------------------------------------------------------------
# protocols


def _draw_gallery(embeddings, labels, identities, per_identity: int,
                  rng: np.random.Generator):
    """Per identity, draw gallery rows; everything else becomes a probe."""
    gallery_parts, probe_parts = [], []
    for ident in identities:
        idx = np.flatnonzero(labels == ident)
        if idx.size <= per_identity:
            raise ValueError(
                f"identity {int(ident)} has {idx.size} samples; needs more than "
                f"{per_identity} to field both gallery and probes")
        chosen = rng.choice(idx, size=per_identity, replace=False)
        gallery_parts.append(chosen)
        probe_parts.append(np.setdiff1d(idx, chosen))
    return np.concatenate(gallery_parts), np.concatenate(probe_parts)


def closed_set_trial(embeddings, labels, cfg: TrialConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One gallery draw; returns (per-rank probe counts, probe count)."""
    labels = np.asarray(labels)
    identities = np.unique(labels)
    gallery_idx, probe_idx = _draw_gallery(embeddings, labels, identities,
                                           cfg.gallery_images_per_identity, rng)
    sm = score_matrix(np.asarray(embeddings)[probe_idx], labels[probe_idx],
                      np.asarray(embeddings)[gallery_idx], labels[gallery_idx])
    pooled, ids = identity_max_scores(sm)
    ranks = probe_ranks(pooled, ids, labels[probe_idx])
    counts = np.bincount(ranks, minlength=identities.size + 1)[1:]
    return counts, int(probe_idx.size)


def closed_set_eval(embeddings, labels, cfg: TrialConfig) -> EvalReport:
    """Rank-1 rate over trials, with the trial-averaged CMC as the curve."""
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.trials)
    n_ids = np.unique(np.asarray(labels)).size
    rank1 = []
    cmc_sum = np.zeros(n_ids)
    for stream in streams:
        counts, n_probes = closed_set_trial(embeddings, labels, cfg,
                                            np.random.default_rng(stream))
        cmc = np.cumsum(counts) / n_probes
        rank1.append(cmc[0])
        cmc_sum += cmc
    curve = tuple((r + 1, cmc_sum[r] / cfg.trials) for r in range(n_ids))
    return EvalReport.from_values("closed_set", rank1, curve=curve)


def open_set_eval(embeddings, labels, cfg: TrialConfig) -> EvalReport:
    """DIR at ``far_target`` over trials with probe-only distractor identities."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    identities = np.unique(labels)
    if identities.size <= cfg.distractor_identities:
        raise ValueError(
            f"need more than {cfg.distractor_identities} identities for an "
            f"open-set evaluation, got {identities.size}")
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.trials + 1)
    fixed = None
    if cfg.distractor_mode == "fixed":
        fixed = np.sort(np.random.default_rng(streams[0]).choice(
            identities, size=cfg.distractor_identities, replace=False))
    rates, thresholds = [], []
    for stream in streams[1:]:
        rng = np.random.default_rng(stream)
        if fixed is not None:
            distractors = fixed
        else:
            distractors = np.sort(rng.choice(identities,
                                             size=cfg.distractor_identities,
                                             replace=False))
        mated_ids = np.setdiff1d(identities, distractors)
        gallery_idx, probe_idx = _draw_gallery(embeddings, labels, mated_ids,
                                               cfg.gallery_images_per_identity, rng)
        distractor_idx = np.flatnonzero(np.isin(labels, distractors))
        sm = score_matrix(embeddings[np.concatenate([probe_idx, distractor_idx])],
                          labels[np.concatenate([probe_idx, distractor_idx])],
                          embeddings[gallery_idx], labels[gallery_idx])
        pooled, ids = identity_max_scores(sm)
        n_mated = probe_idx.size
        mated_max = pooled[:n_mated].max(axis=1)
        ranks = probe_ranks(pooled[:n_mated], ids, labels[probe_idx])
        nonmated_max = pooled[n_mated:].max(axis=1)
        rate, tau = dir_at_far(mated_max, ranks == 1, nonmated_max, cfg.far_target)
        rates.append(rate)
        thresholds.append(tau)
    return EvalReport.from_values("open_set", rates, thresholds=thresholds)


def verification_scores(embeddings, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample verification scores.

    Every sample yields one positive (max similarity to its own identity,
    self excluded) and one negative per other identity (max similarity into
    that identity), i.e. K-1 negatives per sample.
    """
    labels = np.asarray(labels)
    identities, counts = np.unique(labels, return_counts=True)
    lonely = identities[counts < 2]
    if lonely.size:
        raise ValueError(f"identity {int(lonely[0])} has a single sample; "
                         "verification needs at least two per identity")
    e = _unit_rows(embeddings, "test")
    sims = np.clip(e @ e.T, -1.0, 1.0)
    np.fill_diagonal(sims, -2.0)  # below any cosine, so self never wins
    per_identity = np.empty((labels.size, identities.size))
    for col, ident in enumerate(identities):
        per_identity[:, col] = sims[:, labels == ident].max(axis=1)
    own_col = np.searchsorted(identities, labels)
    rows = np.arange(labels.size)
    positives = per_identity[rows, own_col]
    other = np.arange(identities.size)[None, :] != own_col[:, None]
    negatives = per_identity[other]
    return positives, negatives


def verification_eval(embeddings, labels, cfg: TrialConfig) -> EvalReport:
    """TAR at ``far_target`` plus the full ROC over pooled scores."""
    positives, negatives = verification_scores(embeddings, labels)
    tar, tau = tar_at_far(positives, negatives, cfg.far_target)
    curve = roc_points(positives, negatives)
    return EvalReport.from_values("verification", [tar], curve=curve,
                                  thresholds=[tau])


def transfer_eval(model, ds: Dataset, cfg: TrialConfig,
                  identity_test_fraction: float = 0.2) -> dict[str, EvalReport]:
    """Freeze the model, embed a new dataset, and run all three protocols
    on its identity-disjoint test side (split seeded from ``cfg.seed``)."""
    head = model.head if isinstance(model, TrainedModel) else model
    if ds.dim != head.input_dim:
        raise ValueError(f"dataset dim {ds.dim} does not match model input dim "
                         f"{head.input_dim}")
    split = identity_disjoint_split(ds, identity_test_fraction, cfg.seed)
    test_embeddings = embed(head, ds.features[split.test_indices])
    test_labels = ds.labels[split.test_indices]
    return {
        "closed_set": closed_set_eval(test_embeddings, test_labels, cfg),
        "open_set": open_set_eval(test_embeddings, test_labels, cfg),
        "verification": verification_eval(test_embeddings, test_labels, cfg),
    }
