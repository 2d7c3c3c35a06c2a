"""Manifest loading, patient-level pair enumeration, role assignment and augmentation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core_types import (
    IMAGE_SIZE,
    Eye,
    FundusImage,
    Gender,
    MetadataLabels,
    PairSample,
    PatientRecord,
    ValidationError,
)
from .retina_mask import cached_retina_mask

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["patient_id", "image_path", "eye", "scanner_id", "age_years", "gender"]
CROP_SCALE = (0.6, 1.0)
FLIP_PROB = 0.5

# stream tags keep per-item random streams independent
STREAM_ROLES = 1
STREAM_AUGMENT = 2
STREAM_MASK = 3
STREAM_ORDER = 4


class ManifestError(ValidationError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


def item_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for one (seed, epoch, index, ...) item, independent of worker layout."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]]))


def load_image(path, size: int = IMAGE_SIZE) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_manifest(path, with_masks: bool = True, patient_ids=None) -> list:
    """Read a manifest CSV into PatientRecords ordered by patient_id.

    Retina masks are estimated (and cached beside each image) unless
    ``with_masks`` is False. ``patient_ids`` optionally restricts the load.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    wanted = None if patient_ids is None else set(patient_ids)
    rows_by_patient: dict = {}
    labels_by_patient: dict = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            logger.warning("manifest %s is empty", path)
            return []
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}", row=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", row=lineno)
            pid, img_path, eye, scanner, age, gender = (c.strip() for c in row)
            if wanted is not None and pid not in wanted:
                continue
            try:
                eye = Eye(eye)
            except ValueError:
                raise ManifestError(f"eye must be L or R, got {eye!r}", row=lineno) from None
            try:
                labels = MetadataLabels(float(age), Gender(gender))
            except ValueError as exc:
                raise ManifestError(f"bad metadata ({exc})", row=lineno) from None
            prev = labels_by_patient.setdefault(pid, labels)
            if prev != labels:
                raise ManifestError(
                    f"inconsistent metadata for patient {pid}: {prev} vs {labels}", row=lineno
                )
            resolved = Path(img_path)
            if not resolved.is_absolute():
                resolved = path.parent / resolved
            rows_by_patient.setdefault(pid, []).append((lineno, resolved, eye, scanner))

    if not rows_by_patient:
        logger.warning("manifest %s contains no records", path)
    records = []
    for pid in sorted(rows_by_patient):
        images = []
        for acq, (lineno, img_path, eye, scanner) in enumerate(rows_by_patient[pid]):
            try:
                pixels = load_image(img_path)
            except (OSError, ValueError) as exc:
                raise ManifestError(f"cannot decode image {img_path}: {exc}", row=lineno) from None
            mask = cached_retina_mask(img_path, pixels) if with_masks else None
            images.append(
                FundusImage(pid, eye, scanner, pixels, retina_mask=mask, acquisition_index=acq, source_path=str(img_path))
            )
        records.append(PatientRecord(pid, images, labels_by_patient[pid]))
    return records


@dataclass(frozen=True)
class PairTemplate:
    patient_id: str
    index_a: int
    index_b: int
    image_a: FundusImage
    image_b: FundusImage
    labels: MetadataLabels

    @property
    def cross_laterality(self) -> bool:
        return self.image_a.eye != self.image_b.eye


@dataclass(frozen=True)
class PairIndex:
    pairs: tuple  # (patient_id, index_a, index_b) with index_a < index_b
    counts: dict  # patient_id -> number of pairs

    @property
    def total(self) -> int:
        return len(self.pairs)


def enumerate_pairs(record: PatientRecord) -> list:
    """All unordered image pairs of one patient."""
    return [
        PairTemplate(record.patient_id, a, b, record.images[a], record.images[b], record.labels)
        for a, b in combinations(range(len(record.images)), 2)
    ]


def enumerate_all_pairs(records) -> list:
    out = []
    for rec in records:
        out.extend(enumerate_pairs(rec))
    return out


def build_pair_index(records) -> PairIndex:
    pairs, counts = [], {}
    for rec in records:
        ps = enumerate_pairs(rec)
        counts[rec.patient_id] = len(ps)
        pairs.extend((p.patient_id, p.index_a, p.index_b) for p in ps)
    return PairIndex(tuple(pairs), counts)


def assign_roles(template: PairTemplate, seed: int, epoch: int = 0, pair_index: int = 0) -> PairSample:
    """Pick which view is masked with a fair coin drawn from (seed, epoch, pair_index)."""
    swap = bool(item_rng(seed, STREAM_ROLES, epoch, pair_index).integers(2))
    a, b = template.image_a, template.image_b
    visible, masked = (b, a) if swap else (a, b)
    return PairSample(visible, masked, template.labels, cross_laterality=template.cross_laterality)


def crop_and_flip(pixels: np.ndarray, mask, top: int, left: int, side: int, flip: bool):
    """Crop a square window, resize back to the frame size, optionally mirror horizontally."""
    size = pixels.shape[0]
    x = torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    m = None if mask is None else torch.from_numpy(np.array(mask))[None, None].float()
    if not (top == 0 and left == 0 and side == size):
        x = x[..., top : top + side, left : left + side]
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False).clamp(0.0, 1.0)
        if m is not None:
            m = F.interpolate(m[..., top : top + side, left : left + side], size=(size, size), mode="nearest")
    if flip:
        x = x.flip(-1)
        if m is not None:
            m = m.flip(-1)
    out = x[0].permute(1, 2, 0).numpy()
    return out, (None if m is None else m[0, 0].numpy().astype(np.uint8))


def random_crop_params(rng: np.random.Generator, size: int = IMAGE_SIZE, scale=CROP_SCALE):
    area = rng.uniform(*scale)
    side = int(round(size * np.sqrt(area)))
    side = min(max(side, 1), size)
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    flip = bool(rng.random() < FLIP_PROB)
    return top, left, side, flip


def augment_image(image: FundusImage, rng: np.random.Generator) -> FundusImage:
    top, left, side, flip = random_crop_params(rng, image.pixels.shape[0])
    return apply_crop_flip(image, top, left, side, flip)


def apply_crop_flip(image: FundusImage, top: int, left: int, side: int, flip: bool) -> FundusImage:
    pixels, mask = crop_and_flip(image.pixels, image.retina_mask, top, left, side, flip)
    eff = image.effective_eye.flipped() if flip else image.effective_eye
    return replace(image, pixels=pixels, retina_mask=mask, effective_eye=eff)


def augment_views(pair: PairSample, seed: int, epoch: int = 0, pair_index: int = 0) -> PairSample:
    """Independent random-resized-crop and horizontal flip per view."""
    views = [
        augment_image(view, item_rng(seed, STREAM_AUGMENT, epoch, pair_index, v))
        for v, view in enumerate((pair.view_visible, pair.view_masked))
    ]
    return replace(pair, view_visible=views[0], view_masked=views[1])
