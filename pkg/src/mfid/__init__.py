"""Metric-learning and open-set biometric identification over precomputed feature vectors.

The toolkit ingests fixed-length feature vectors with identity labels and
provides: a pairwise-divergence training objective with analytic gradients,
small embedding heads trained by SGD, closed-set / open-set / verification
evaluation protocols, a PCA + logistic-regression baseline, and detection
quality metrics.  Everything is seeded and reproducible.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .dataset import (
    Dataset,
    PairBatch,
    PairConstraints,
    Split,
    build_pair_constraints,
    identity_disjoint_split,
    load_dataset,
    load_split,
    sample_pair_batch,
    save_dataset,
    save_split,
    stratified_splits,
    synth_gaussian,
)
from .loss import (
    LossConfig,
    LossReport,
    cross_entropy,
    dissim_pair_loss,
    kl_div,
    loss_gradient,
    sim_pair_loss,
    softmax,
    total_loss,
)
from .model import (
    EmbeddingHead,
    TrainConfig,
    TrainedModel,
    backprop,
    embed,
    forward,
    init_head,
    load_head,
    logits,
    lr_schedule,
    save_head,
    sgd_step,
    train,
)
from .evaluation import (
    EvalReport,
    ScoreMatrix,
    TrialConfig,
    classification_accuracy,
    closed_set_eval,
    closed_set_trial,
    cosine_similarity,
    dir_at_far,
    far_threshold,
    open_set_eval,
    probe_ranks,
    roc_points,
    score_matrix,
    tar_at_far,
    transfer_eval,
    verification_eval,
    verification_scores,
)
from .baseline import (
    LogRegModel,
    PCAModel,
    baseline_pipeline,
    l2_normalize,
    load_baseline_model,
    logreg_fit,
    logreg_predict,
    pca_fit,
    pca_transform,
    save_baseline_model,
)
from .detection import (
    BoundingBox,
    DetectionReport,
    average_precision,
    detection_report,
    iou,
    load_boxes,
    match_detections,
)
