"""Retina-aware adaptive masking: cosine ratio schedule and region-constrained sampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core_types import ValidationError
from .retina_mask import EligibilityGrid


@dataclass(frozen=True)
class MaskSchedule:
    r0: float = 0.985
    rT: float = 0.85
    T: int = 300

    def __post_init__(self):
        for name in ("r0", "rT"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")
        if int(self.T) != self.T or self.T < 1:
            raise ValidationError(f"T must be a positive integer, got {self.T}")
        if self.rT > self.r0:
            warnings.warn(f"increasing masking schedule (r0={self.r0} < rT={self.rT})", stacklevel=2)

    @property
    def increasing(self) -> bool:
        return self.rT > self.r0


def masking_ratio(t: int, schedule: MaskSchedule) -> float:
    """r_t = 0.5 * (1 - cos(pi t / T)) * (rT - r0) + r0."""
    if not (0 <= t <= schedule.T):
        raise ValidationError(f"epoch {t} outside [0, {schedule.T}]")
    if t == 0:
        return float(schedule.r0)
    if t == schedule.T:
        return float(schedule.rT)
    return 0.5 * (1.0 - math.cos(math.pi * t / schedule.T)) * (schedule.rT - schedule.r0) + schedule.r0


def schedule_table(schedule: MaskSchedule) -> list:
    return [(t, masking_ratio(t, schedule)) for t in range(schedule.T + 1)]


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def visible_count(n_eligible: int, ratio: float) -> int:
    return max(1, round_half_away((1.0 - ratio) * n_eligible))


@dataclass(frozen=True, eq=False)
class MaskPlan:
    eligible: EligibilityGrid
    visible_indices: np.ndarray  # sorted flat patch indices
    masked_indices: np.ndarray
    ratio_used: float

    @property
    def num_patches(self) -> int:
        return self.eligible.grid.size

    def visible_mask(self) -> np.ndarray:
        m = np.zeros(self.num_patches, dtype=bool)
        m[self.visible_indices] = True
        return m

    def masked_eligible(self) -> np.ndarray:
        """Flat bool mask of patches that are both masked and retina-eligible."""
        return ~self.visible_mask() & self.eligible.grid.ravel()


def sample_mask(eligible: EligibilityGrid, ratio: float, seed) -> MaskPlan:
    """Draw the visible set uniformly from eligible patches; everything else is masked.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.
    """
    if not (0.0 < ratio < 1.0):
        raise ValidationError(f"masking ratio must lie in (0, 1), got {ratio}")
    pool = eligible.indices
    if pool.size == 0:
        raise ValidationError("no eligible patches to sample from")
    k = min(visible_count(pool.size, ratio), pool.size)
    rng = np.random.default_rng(seed)
    visible = np.sort(rng.choice(pool, size=k, replace=False))
    masked = np.setdiff1d(np.arange(eligible.grid.size), visible, assume_unique=True)
    return MaskPlan(eligible=eligible, visible_indices=visible, masked_indices=masked, ratio_used=float(ratio))


def full_plan(eligible: EligibilityGrid) -> MaskPlan:
    """A plan with every patch visible."""
    n = eligible.grid.size
    return MaskPlan(eligible, np.arange(n), np.zeros(0, dtype=np.int64), 0.0)


@dataclass(frozen=True, eq=False)
class MaskLayout:
    """Index maps between the full patch grid and the visible-only token sequence.

    ``gather_index[k]`` is the grid slot of sequence token k. ``scatter_index[p]``
    is the sequence position of grid slot p, or ``len(gather_index)`` (the shared
    mask-token slot) for masked patches.
    """

    gather_index: np.ndarray
    scatter_index: np.ndarray

    @property
    def mask_slot(self) -> int:
        return len(self.gather_index)

    def gather(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[self.gather_index]

    def scatter(self, seq: np.ndarray, mask_value) -> np.ndarray:
        seq = np.asarray(seq)
        table = np.concatenate([seq, np.broadcast_to(mask_value, (1,) + seq.shape[1:])], axis=0)
        return table[self.scatter_index]


def mask_token_layout(plan: MaskPlan) -> MaskLayout:
    gather = np.asarray(plan.visible_indices, dtype=np.int64)
    scatter = np.full(plan.num_patches, len(gather), dtype=np.int64)
    scatter[gather] = np.arange(len(gather))
    return MaskLayout(gather_index=gather, scatter_index=scatter)
