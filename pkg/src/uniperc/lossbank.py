"""Training objectives: segmentation, self-supervised geometry, distillation, steering.

Every loss returns a scalar tensor and is differentiable in its tensor inputs
(except where an input is documented as a detached weighting). Composite
losses return a :class:`LossReport` so the step logger can record each term.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .geomcore import Plane, ShapeError, signed_height_above

EPS = 1e-7

SSUP_KEYS = ("recon", "smooth", "consistency", "sparsity", "ground")
SUP_KEYS = ("cls", "bce", "dice", "contrast")


@dataclass
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    contrast: float = 0.5
    consistency: float = 5.0
    sparsity: float = 0.1
    ground: float = 0.1
    alpha: float = 0.85
    beta_flow: float = 0.1
    beta_mask: float = 1e-3
    sup: float = 1.0
    ssup: float = 1.0
    distil: float = 1.0
    steer: float = 0.1
    # per-field edge-aware smoothness weights (inverse depth, complete flow, motion mask)
    smooth_disp: float = 1e-3
    smooth_flow: float = 1e-3
    smooth_mask: float = 1e-2
    no_object: float = 0.1
    temperature: float = 0.07

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class LossReport:
    """Weighted sum of named components: ``total = sum(weights[k] * components[k])``."""
    total: torch.Tensor
    components: dict
    weights: dict
    details: dict = field(default_factory=dict)

    @classmethod
    def weighted(cls, components: dict, weights: dict, details: dict | None = None) -> "LossReport":
        total = sum(weights[k] * components[k] for k in components)
        if not isinstance(total, torch.Tensor):
            total = torch.as_tensor(float(total))
        return cls(total, dict(components), dict(weights), dict(details or {}))

    def to_dict(self) -> dict:
        """Flat JSON-ready mapping of named scalars."""
        out = {"total": _scalar(self.total)}
        out.update({k: _scalar(v) for k, v in self.components.items()})
        out.update({k: _scalar(v) for k, v in self.details.items()})
        return out


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _require(parts: dict, keys):
    missing = [k for k in keys if k not in parts]
    if missing:
        raise KeyError(f"missing loss components: {missing}")


# -- self-supervised terms ---------------------------------------------------

def ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows with reflection padding, same shape as inputs."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    x = F.pad(x, (1, 1, 1, 1), mode="reflect")
    y = F.pad(y, (1, 1, 1, 1), mode="reflect")
    mu_x = F.avg_pool2d(x, 3, 1)
    mu_y = F.avg_pool2d(y, 3, 1)
    sigma_x = F.avg_pool2d(x * x, 3, 1) - mu_x ** 2
    sigma_y = F.avg_pool2d(y * y, 3, 1) - mu_y ** 2
    sigma_xy = F.avg_pool2d(x * y, 3, 1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return num / den


def photometric_map(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.85) -> torch.Tensor:
    """Per-pixel SSIM + L1 dissimilarity, ``(B, 1, H, W)``, channel-averaged."""
    l1 = (pred - target).abs().mean(1, keepdim=True)
    dssim = ((1 - ssim(pred, target)) / 2).mean(1, keepdim=True)
    return alpha * dssim + (1 - alpha) * l1


def photometric_loss(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor | None = None,
                     alpha: float = 0.85) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    err = photometric_map(pred, target, alpha)
    if valid is None:
        return err.mean()
    valid = valid.to(err.dtype)
    count = valid.sum()
    if count == 0:
        raise ValueError("validity mask is empty: no pixel provides a photometric signal")
    return (err * valid).sum() / count


def edge_aware_smoothness(field: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
    """``mean|dx f| exp(-|dx I|) + mean|dy f| exp(-|dy I|)`` with guide gradients channel-averaged."""
    if field.shape[-2:] != guide.shape[-2:] or field.shape[0] != guide.shape[0]:
        raise ShapeError(f"field {tuple(field.shape)} and guide {tuple(guide.shape)} differ spatially")
    dx_f = (field[..., :, :-1] - field[..., :, 1:]).abs()
    dy_f = (field[..., :-1, :] - field[..., 1:, :]).abs()
    dx_i = (guide[..., :, :-1] - guide[..., :, 1:]).abs().mean(1, keepdim=True)
    dy_i = (guide[..., :-1, :] - guide[..., 1:, :]).abs().mean(1, keepdim=True)
    return (dx_f * torch.exp(-dx_i)).mean() + (dy_f * torch.exp(-dy_i)).mean()


def smoothness_loss(guide: torch.Tensor, inv_depth: torch.Tensor | None = None,
                    flow: torch.Tensor | None = None, mask: torch.Tensor | None = None,
                    weights: LossWeights | None = None) -> torch.Tensor:
    """Weighted edge-aware smoothness of inverse depth, complete flow and motion mask.

    Inverse depth is divided by its per-image mean before differencing.
    Absent fields contribute nothing.
    """
    w = weights or LossWeights()
    total = guide.new_zeros(())
    if inv_depth is not None:
        norm = inv_depth / (inv_depth.mean((2, 3), keepdim=True) + EPS)
        total = total + w.smooth_disp * edge_aware_smoothness(norm, guide)
    if flow is not None:
        total = total + w.smooth_flow * edge_aware_smoothness(flow, guide)
    if mask is not None:
        total = total + w.smooth_mask * edge_aware_smoothness(mask, guide)
    return total


def flow_discrepancy(flow_complete: torch.Tensor, flow_rigid: torch.Tensor) -> torch.Tensor:
    """Per-pixel L1 gap ``||F_C - F_R||_1``, ``(B, 1, H, W)``."""
    if flow_complete.shape != flow_rigid.shape:
        raise ShapeError(f"flow shapes differ: {tuple(flow_complete.shape)} vs {tuple(flow_rigid.shape)}")
    return (flow_complete - flow_rigid).abs().sum(1, keepdim=True)


def motion_consistency_loss(flow_complete: torch.Tensor, flow_rigid: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    disc = flow_discrepancy(flow_complete, flow_rigid)
    if mask.shape != disc.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match flows {tuple(flow_rigid.shape)}")
    return ((1 - mask) * disc).mean()


def motion_sparsity_loss(mask: torch.Tensor, discrepancy: torch.Tensor) -> torch.Tensor:
    """Cross-entropy toward a zero mask, emphasised where the flow discrepancy is low.

    The per-pixel weight ``exp(-F_D / median(F_D + eps))`` is computed per image
    and detached: the discrepancy selects pixels, it is not optimised here.
    """
    if mask.shape != discrepancy.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} and discrepancy {tuple(discrepancy.shape)} differ")
    disc = discrepancy.detach()
    med = (disc + EPS).flatten(1).median(1).values.reshape(-1, 1, 1, 1)
    weight = torch.exp(-disc / med)
    return (weight * -torch.log1p(-mask.clamp(max=1 - EPS))).mean()


def above_ground_loss(points: torch.Tensor, plane: Plane) -> torch.Tensor:
    """Mean depth below the ground plane; ``points`` is ``(B, 3, H, W)`` or ``(..., 3)``."""
    if points.dim() == 4 and points.shape[1] == 3:
        points = points.movedim(1, -1)
    return F.relu(-signed_height_above(points, plane)).mean()


def ssup_total(parts: dict, weights: LossWeights | None = None) -> LossReport:
    w = weights or LossWeights()
    _require(parts, SSUP_KEYS)
    coeffs = {"recon": 1.0, "smooth": 1.0, "consistency": w.consistency, "sparsity": w.sparsity, "ground": w.ground}
    return LossReport.weighted({k: parts[k] for k in SSUP_KEYS}, coeffs)


# -- supervised segmentation terms ------------------------------------------

def _pair_costs(class_logits, mask_logits, target_classes, target_masks, weights: LossWeights):
    prob = class_logits.softmax(-1)
    cost_cls = -prob[:, target_classes]
    q, t = mask_logits.shape[0], target_masks.shape[0]
    m = mask_logits.reshape(q, -1)
    tm = target_masks.reshape(t, -1).to(m.dtype)
    pos = F.binary_cross_entropy_with_logits(m, torch.ones_like(m), reduction="none")
    neg = F.binary_cross_entropy_with_logits(m, torch.zeros_like(m), reduction="none")
    cost_bce = (pos @ tm.T + neg @ (1 - tm).T) / m.shape[1]
    p = m.sigmoid()
    cost_dice = 1 - (2 * p @ tm.T + EPS) / (p.sum(1, keepdim=True) + tm.sum(1)[None] + EPS)
    return weights.cls * cost_cls + weights.bce * cost_bce + weights.dice * cost_dice


@torch.no_grad()
def hungarian_match(class_logits, mask_logits, target_classes, target_masks, weights: LossWeights | None = None):
    """Optimal query-to-target assignment on classification + mask cost.

    Shapes: ``class_logits (Q, C+1)``, ``mask_logits (Q, h, w)``,
    ``target_classes (T,)``, ``target_masks (T, h, w)``. Returns index arrays
    ``(query_idx, target_idx)`` of length ``min(Q, T)``.
    """
    if len(target_classes) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cost = _pair_costs(class_logits, mask_logits, target_classes, target_masks, weights or LossWeights())
    if not torch.isfinite(cost).all():
        raise FloatingPointError("matching cost is not finite")
    rows, cols = linear_sum_assignment(cost.double().cpu().numpy())
    return rows.astype(np.int64), cols.astype(np.int64)


@torch.no_grad()
def brute_force_match(class_logits, mask_logits, target_classes, target_masks, weights: LossWeights | None = None):
    """Exhaustive matcher over all injective assignments; reference for :func:`hungarian_match`."""
    t = len(target_classes)
    if t == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cost = _pair_costs(class_logits, mask_logits, target_classes, target_masks,
                       weights or LossWeights()).double().cpu().numpy()
    q = cost.shape[0]
    best, best_perm = np.inf, None
    if t <= q:
        for perm in itertools.permutations(range(q), t):
            c = cost[list(perm), range(t)].sum()
            if c < best:
                best, best_perm = c, (np.array(perm), np.arange(t))
    else:
        for perm in itertools.permutations(range(t), q):
            c = cost[range(q), list(perm)].sum()
            if c < best:
                best, best_perm = c, (np.arange(q), np.array(perm))
    rows, cols = best_perm
    order = np.argsort(rows)
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def seg_classification_loss(class_logits: torch.Tensor, target_classes: torch.Tensor,
                            query_idx, target_idx, no_object_weight: float = 0.1) -> torch.Tensor:
    """Cross-entropy over all queries of one image.

    Matched queries target their ground-truth class; the rest target the
    trailing "no-object" class, down-weighted by ``no_object_weight``.
    """
    q, c = class_logits.shape
    if q == 0:
        return class_logits.sum() * 0
    labels = torch.full((q,), c - 1, dtype=torch.long, device=class_logits.device)
    labels[torch.as_tensor(query_idx, dtype=torch.long)] = torch.as_tensor(target_classes)[
        torch.as_tensor(target_idx, dtype=torch.long)].long()
    class_weight = torch.ones(c, dtype=class_logits.dtype, device=class_logits.device)
    class_weight[-1] = no_object_weight
    return F.cross_entropy(class_logits, labels, weight=class_weight)


def seg_mask_losses(mask_logits: torch.Tensor, target_masks: torch.Tensor):
    """Mean BCE over mask pixels and mean Dice loss over matched pairs, both ``(N, h, w)``."""
    if mask_logits.shape != target_masks.shape:
        raise ShapeError(f"mask logits {tuple(mask_logits.shape)} vs targets {tuple(target_masks.shape)}")
    if mask_logits.shape[0] == 0:
        zero = mask_logits.sum() * 0
        return zero, zero
    target = target_masks.to(mask_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(mask_logits, target)
    p = mask_logits.sigmoid().flatten(1)
    t = target.flatten(1)
    dice = 1 - (2 * (p * t).sum(1) + EPS) / (p.sum(1) + t.sum(1) + EPS)
    return bce, dice.mean()


def seg_contrastive_loss(object_embeddings: torch.Tensor, text_embeddings: torch.Tensor,
                         temperature: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE between paired ``(N, D)`` object and text query embeddings."""
    if object_embeddings.shape != text_embeddings.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(object_embeddings.shape)} vs {tuple(text_embeddings.shape)}")
    if object_embeddings.shape[0] == 0:
        return object_embeddings.sum() * 0
    on = object_embeddings.norm(dim=-1, keepdim=True)
    tn = text_embeddings.norm(dim=-1, keepdim=True)
    if (on == 0).any() or (tn == 0).any():
        raise ValueError("zero-norm embedding has no direction for cosine similarity")
    logits = (object_embeddings / on) @ (text_embeddings / tn).T / temperature
    labels = torch.arange(logits.shape[0], device=logits.device)
    return (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)) / 2


def sup_total(parts: dict, weights: LossWeights | None = None) -> LossReport:
    w = weights or LossWeights()
    _require(parts, SUP_KEYS)
    coeffs = {"cls": w.cls, "bce": w.bce, "dice": w.dice, "contrast": w.contrast}
    return LossReport.weighted({k: parts[k] for k in SUP_KEYS}, coeffs)


# -- distillation, combination, steering --------------------------------------

def distill_loss(flow_student: torch.Tensor, flow_teacher: torch.Tensor, mask_student: torch.Tensor,
                 mask_teacher: torch.Tensor, beta_flow: float = 0.1, beta_mask: float = 1e-3) -> torch.Tensor:
    """L1 imitation of the teacher's complete flow and motion mask; teacher tensors are detached."""
    if flow_student.shape != flow_teacher.shape or mask_student.shape != mask_teacher.shape:
        raise ShapeError("student and teacher outputs differ in shape")
    flow_term = (flow_teacher.detach() - flow_student).abs().sum(1).mean()
    mask_term = (mask_teacher.detach() - mask_student).abs().sum(1).mean()
    return beta_flow * flow_term + beta_mask * mask_term


def total_loss(sup: LossReport | None, ssup: LossReport | None, distil, weights: LossWeights | None = None) -> LossReport:
    """``λ1·L_sup + λ2·L_ssup + λ3·L_distil``; a missing part counts as zero."""
    w = weights or LossWeights()
    zero = torch.zeros(())
    components = {
        "sup": sup.total if sup is not None else zero,
        "ssup": ssup.total if ssup is not None else zero,
        "distil": distil if distil is not None else zero,
    }
    for name, value in components.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise FloatingPointError(f"{name} loss is not finite: {float(value)}")
    details = {}
    for prefix, rep in (("sup", sup), ("ssup", ssup)):
        if rep is not None:
            details.update({f"{prefix}/{k}": v for k, v in rep.components.items()})
    return LossReport.weighted(components, {"sup": w.sup, "ssup": w.ssup, "distil": w.distil}, details)


def steering_loss(pred: torch.Tensor, target: torch.Tensor, lam: float = 0.1) -> torch.Tensor:
    """Magnitude-weighted MSE with weights ``exp(lam * |y|)``."""
    pred, target = pred.reshape(-1), target.reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction/target lengths differ: {pred.numel()} vs {target.numel()}")
    if pred.numel() == 0:
        raise ValueError("empty steering batch")
    w = torch.exp(lam * target.abs())
    return (w * (pred - target) ** 2).sum() / w.sum()
