"""Distillation objectives: logits KD, masked feature MSE, the weighted total
and the foreground/background weighted variant used for detectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

REGIONS = ("full", "non_masked")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.8
    beta: float = 0.2
    stage_weights: tuple[float, ...] = field(default=())

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta), *(("stage", w) for w in self.stage_weights)):
            if not (v >= 0.0 and v < float("inf")):
                raise ValueError(f"{name} weight must be finite and >= 0, got {v}")


def logits_kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    tau: float = 4.0,
    tau_squared: bool = True,
) -> torch.Tensor:
    """KL(softmax(z_t / tau) || softmax(z_s / tau)), batch mean.

    The teacher distribution is the reference. With ``tau_squared`` the
    result is scaled by tau**2 so gradient magnitudes do not shrink as the
    temperature grows.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    log_p_s = F.log_softmax(student_logits / tau, dim=1)
    log_p_t = F.log_softmax(teacher_logits.detach() / tau, dim=1)
    kl = F.kl_div(log_p_s, log_p_t, reduction="batchmean", log_target=True)
    return kl * tau**2 if tau_squared else kl


def expand_token_mask(mask: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(B, rows, cols) token mask -> (B, 1, H, W) element mask."""
    rows, cols = mask.shape[-2:]
    if height % rows or width % cols:
        raise ValueError(f"token grid {rows}x{cols} does not tile a {height}x{width} map")
    kh, kw = height // rows, width // cols
    return mask.repeat_interleave(kh, dim=1).repeat_interleave(kw, dim=2).unsqueeze(1)


def feature_loss(
    prediction: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor | None = None,
    region: str = "full",
) -> torch.Tensor:
    """Mean squared error over the full map or only the unmasked patches.

    Args:
        prediction: (B, C, H, W) decoded features.
        target: (B, C, H, W) teacher features.
        mask: (B, rows, cols) bool token mask, True where teacher tokens
            were stitched in. Required for ``region="non_masked"``.
        region: ``"full"`` or ``"non_masked"``.
    """
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}")
    sq = (prediction - target.detach()) ** 2
    if region == "full":
        return sq.mean()
    if mask is None:
        raise ValueError("region='non_masked' needs a mask")

    keep = ~expand_token_mask(mask.bool(), *prediction.shape[-2:])
    selected = keep.sum() * prediction.shape[1]
    if selected == 0:
        logger.warning("every patch is masked; non_masked feature loss is 0")
        return sq.sum() * 0.0
    return (sq * keep).sum() / selected


def total_loss(cls, logits, feat, weights: LossWeights):
    """``cls + alpha * logits + beta * feat``."""
    return cls + weights.alpha * logits + weights.beta * feat


def fgd_masked_loss(
    teacher_feat: torch.Tensor,
    hybrid_feat: torch.Tensor,
    fg_mask: torch.Tensor,
    spatial_attn: torch.Tensor,
    channel_attn: torch.Tensor,
    w_f: float = 5e-5,
    w_b: float = 2.5e-5,
) -> torch.Tensor:
    """Foreground/background weighted squared error, summed over all elements.

    ``fg_mask`` and ``spatial_attn`` are (B, 1, H, W) and broadcast over
    channels; ``channel_attn`` is (B, C, 1, 1) and broadcasts over space.
    Defaults are the two-stage detector weights.
    """
    if teacher_feat.shape != hybrid_feat.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(teacher_feat.shape)} vs {tuple(hybrid_feat.shape)}"
        )
    b, c, h, w = teacher_feat.shape
    for name, t, shape in (
        ("fg_mask", fg_mask, (b, 1, h, w)),
        ("spatial_attn", spatial_attn, (b, 1, h, w)),
        ("channel_attn", channel_attn, (b, c, 1, 1)),
    ):
        if tuple(t.shape) != shape:
            raise ValueError(f"{name} must have shape {shape}, got {tuple(t.shape)}")

    weighted = spatial_attn * channel_attn * (teacher_feat.detach() - hybrid_feat) ** 2
    fg = (fg_mask * weighted).sum()
    bg = ((1 - fg_mask) * weighted).sum()
    return w_f * fg + w_b * bg
