"""Shared value types for fundus images, patient records and training pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

IMAGE_SIZE = 224
AGE_DIVISOR = 100.0
AGE_NORM_MAX = 1.2
MAX_AGE_YEARS = 120.0


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class Eye(str, Enum):
    LEFT = "L"
    RIGHT = "R"

    def flipped(self) -> "Eye":
        return Eye.RIGHT if self is Eye.LEFT else Eye.LEFT


class Gender(str, Enum):
    F = "F"
    M = "M"

    @property
    def index(self) -> int:
        return 0 if self is Gender.F else 1


def normalize_age(age_years: float) -> float:
    if not np.isfinite(age_years) or age_years < 0:
        raise ValidationError(f"age must be a non-negative number, got {age_years!r}")
    return float(min(max(age_years / AGE_DIVISOR, 0.0), AGE_NORM_MAX))


def denormalize_age(age_normalized: float) -> float:
    return float(age_normalized) * AGE_DIVISOR


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MetadataLabels:
    age_years: float
    gender: Gender

    def __post_init__(self):
        if not (0.0 <= float(self.age_years) <= MAX_AGE_YEARS):
            raise ValidationError(f"age_years must lie in [0, {MAX_AGE_YEARS:g}], got {self.age_years!r}")
        if not isinstance(self.gender, Gender):
            try:
                object.__setattr__(self, "gender", Gender(self.gender))
            except ValueError:
                raise ValidationError(f"gender must be one of F/M, got {self.gender!r}") from None

    @property
    def age_normalized(self) -> float:
        return normalize_age(self.age_years)


@dataclass(frozen=True, eq=False)
class FundusImage:
    """One colour fundus photograph.

    ``pixels`` is an (H, W, 3) float32 array in [0, 1]; ``retina_mask`` is an
    optional (H, W) uint8 array of {0, 1}. ``effective_eye`` tracks laterality
    after horizontal flips and defaults to ``eye``.
    """

    patient_id: str
    eye: Eye
    scanner_id: str
    pixels: np.ndarray
    retina_mask: Optional[np.ndarray] = None
    acquisition_index: int = 0
    effective_eye: Optional[Eye] = None
    source_path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if not isinstance(self.eye, Eye):
            object.__setattr__(self, "eye", Eye(self.eye))
        if self.effective_eye is None:
            object.__setattr__(self, "effective_eye", self.eye)
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValidationError(f"pixels must have shape ({IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _readonly(px))
        if self.retina_mask is not None:
            mask = np.asarray(self.retina_mask)
            if mask.shape != px.shape[:2]:
                raise ValidationError(f"retina_mask shape {mask.shape} does not match image {px.shape[:2]}")
            if not np.isin(mask, (0, 1)).all():
                raise ValidationError("retina_mask values must be 0 or 1")
            object.__setattr__(self, "retina_mask", _readonly(mask.astype(np.uint8)))

    @property
    def effective_laterality(self) -> Eye:
        return self.effective_eye

    @property
    def key(self) -> tuple:
        return (self.patient_id, self.eye.value, self.scanner_id, self.acquisition_index)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    images: tuple
    labels: MetadataLabels

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if not self.images:
            raise ValidationError(f"patient {self.patient_id} has no images")
        for img in self.images:
            if img.patient_id != self.patient_id:
                raise ValidationError(
                    f"image of patient {img.patient_id} placed in record of patient {self.patient_id}"
                )


@dataclass(frozen=True)
class PairSample:
    view_visible: FundusImage
    view_masked: FundusImage
    labels: MetadataLabels
    cross_laterality: bool

    def __post_init__(self):
        a, b = self.view_visible, self.view_masked
        if a.patient_id != b.patient_id:
            raise ValidationError("pair views belong to different patients")
        if a.key == b.key:
            raise ValidationError("pair views must be distinct images")
        if self.cross_laterality != (a.eye != b.eye):
            raise ValidationError("cross_laterality flag disagrees with the view lateralities")

    @property
    def patient_id(self) -> str:
        return self.view_visible.patient_id

    @property
    def mirrored(self) -> bool:
        """True when patch correspondence between the views is a horizontal mirror."""
        return self.view_visible.effective_eye != self.view_masked.effective_eye
