"""Reconstruction, perceptual, consistency and metadata losses and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import ValidationError


class NonFiniteLossError(FloatingPointError):
    """A loss term became NaN or infinite; ``terms`` holds the offending values."""

    def __init__(self, term: str, terms: dict):
        super().__init__(f"non-finite loss term {term!r}: {terms}")
        self.term = term
        self.terms = terms


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 1.4
    lambda_consis: float = 0.4
    lambda_meta: float = 0.2
    mae_pixel: float = 1.0
    perceptual: float = 0.4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValidationError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class LossReport:
    recon_pixel: float
    recon_perceptual: float
    consistency: float
    meta_age_rmse: float
    meta_gender_ce: float
    total: float
    masked_retinal_patches: int = 0
    consistency_pairs: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def recon_pixel_loss(pred, target, loss_mask):
    """MSE over pixels of patches flagged in ``loss_mask`` (B, L).

    ``loss_mask`` should be masked AND retina-eligible; see MaskPlan.masked_eligible.
    """
    if pred.shape != target.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    loss_mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    n = int(loss_mask.sum())
    if n == 0:
        raise ValidationError("no masked retinal patches to reconstruct")
    per_patch = (pred - target).pow(2).mean(dim=-1)
    return (per_patch * loss_mask.to(per_patch.dtype)).sum() / n


class PerceptualExtractor(nn.Module):
    """Frozen, seeded three-stage strided conv pyramid (16/32/64 channels)."""

    channels = (16, 32, 64)

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        stages, c_in = [], 3
        for c_out in self.channels:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.zero_()
            stages.append(conv)
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.gelu(conv(x))
            feats.append(x)
        return feats


def compose_reconstruction(pred_patches, target_patches, visible_mask):
    """Predicted patches with visible positions copied from ground truth."""
    keep = torch.as_tensor(visible_mask, dtype=torch.bool)[..., None]
    return torch.where(keep, target_patches, pred_patches)


def perceptual_loss(recon_image, target_image, extractor: PerceptualExtractor):
    fa = extractor(recon_image)
    fb = extractor(target_image)
    return sum((a - b).pow(2).mean() for a, b in zip(fa, fb)) / len(fa)


def counterpart_index(patch_index, mirror, grid: int):
    """Grid slot in the other view matching each patch: mirrored column when ``mirror``."""
    row, col = patch_index // grid, patch_index % grid
    mirrored = row * grid + (grid - 1 - col)
    mirror = torch.as_tensor(mirror, dtype=torch.bool).reshape(-1, *([1] * (patch_index.dim() - 1)))
    return torch.where(mirror, mirrored, patch_index)


def match_counterparts(masked_patches, masked_index, masked_valid, visible_patches, visible_index, mirror, grid):
    """Pair each unmasked patch of the masked view with its counterpart in the other view.

    Returns (z_masked (B, K, D), z_counterpart (B, K, D), valid (B, K)). Padding
    rows, and patches whose counterpart is absent from ``visible_index``, are invalid.
    """
    b, n_vis = visible_index.shape
    slot_of = torch.full((b, grid * grid), -1, dtype=torch.long)
    slot_of.scatter_(1, visible_index, torch.arange(n_vis).expand(b, -1).contiguous())
    pos = torch.gather(slot_of, 1, counterpart_index(masked_index, mirror, grid))
    valid = masked_valid & (pos >= 0)
    pos = pos.clamp(min=0)
    counterpart = torch.gather(visible_patches, 1, pos[..., None].expand(-1, -1, visible_patches.shape[-1]))
    return masked_patches, counterpart, valid


def cosine_distance(z_a, z_b):
    return 1.0 - (F.normalize(z_a, dim=-1) * F.normalize(z_b, dim=-1)).sum(-1)


def consistency_loss(z_masked, z_visible, valid=None):
    """Mean (1 - cosine) over corresponding embedding pairs pooled across the batch.

    ``z_masked`` and ``z_visible`` are already matched row-for-row (..., D).
    """
    d = cosine_distance(z_masked, z_visible)
    if valid is None:
        valid = torch.ones(d.shape, dtype=torch.bool)
    n = int(valid.sum())
    if n == 0:
        raise ValidationError("consistency loss needs at least one patch pair")
    return (d * valid.to(d.dtype)).sum() / n


def meta_loss(age_pred, gender_logits, age_target, gender_target):
    """(RMSE on normalized age, cross-entropy on gender) for one batch."""
    age_target = torch.as_tensor(age_target, dtype=age_pred.dtype)
    rmse = torch.sqrt(F.mse_loss(age_pred, age_target))
    ce = F.cross_entropy(gender_logits, torch.as_tensor(gender_target, dtype=torch.long))
    return rmse, ce


def as_float(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def check_finite(terms: dict):
    for name, value in terms.items():
        if not math.isfinite(as_float(value)):
            raise NonFiniteLossError(name, {k: as_float(x) for k, x in terms.items()})


def total_loss(terms: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of the loss terms; works on floats or tensors.

    ``terms`` keys: recon_pixel, recon_perceptual, consistency, meta_age_rmse, meta_gender_ce.
    """
    check_finite(terms)
    recon = weights.mae_pixel * terms["recon_pixel"] + weights.perceptual * terms["recon_perceptual"]
    meta = terms["meta_age_rmse"] + terms["meta_gender_ce"]
    return weights.lambda_recon * recon + weights.lambda_consis * terms["consistency"] + weights.lambda_meta * meta
