"""Knowledge distillation with dynamic prior knowledge.

Teacher feature patches are stitched into the student's masked feature map
before a small transformer predicts the teacher features; the share of
teacher patches follows the current teacher/student CKA.
"""

from dpk.losses import LossWeights, fgd_masked_loss, feature_loss, logits_kd_loss, total_loss
from dpk.masking import (
    MaskPattern,
    ScheduleState,
    block_mask,
    grid_mask,
    random_mask,
    schedule_ratio,
)
from dpk.similarity import (
    SimilarityTrace,
    cka_minibatch,
    cosine_gap,
    dynamic_ratio,
    gram,
    hsic1,
)

__version__ = "0.1.0"

__all__ = [
    "LossWeights", "fgd_masked_loss", "feature_loss", "logits_kd_loss", "total_loss",
    "MaskPattern", "ScheduleState", "block_mask", "grid_mask", "random_mask", "schedule_ratio",
    "SimilarityTrace", "cka_minibatch", "cosine_gap", "dynamic_ratio", "gram", "hsic1",
]
