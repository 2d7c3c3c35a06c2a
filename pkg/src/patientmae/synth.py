"""Deterministic synthetic fundus generator with known retina geometry and planted labels."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core_types import Eye, FundusImage, Gender, MetadataLabels, PatientRecord, ValidationError, normalize_age
from .ingest import MANIFEST_HEADER

DEFAULT_VIEWS = (("L", "A"), ("L", "B"), ("R", "A"), ("R", "B"))
SPLITS = (("train", 70), ("val", 15), ("test", 15))
LABELS_HEADER = ["patient_id", "split", "age_years", "gender", "disease"]
DISEASE_MIN_LESIONS = 3
HAZE_COLOR = np.array([0.62, 0.52, 0.30])


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 200
    views: tuple = DEFAULT_VIEWS  # (eye, scanner) per image of a patient
    image_size: int = 224
    radius_fraction: float = 0.45
    age_range: tuple = (20.0, 90.0)
    p_female: float = 0.5
    base_curvature: float = 0.08  # std of per-step heading change (radians)
    tortuosity_gain: float = 2.0  # curvature scale = 1 + gain * age_normalized
    stripe_amplitude: float = 0.05
    stripe_frequency: int = 16
    age_haze: float = 0.3  # media opacity blend weight at age_normalized = 1
    lesion_rate: float = 2.5  # Poisson mean of lesion count
    noise_sigma: float = 0.02
    scanner_b_gamma: float = 1.3
    scanner_b_green_shift: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if not (0.0 < self.radius_fraction <= 0.5):
            raise ValidationError("radius_fraction must lie in (0, 0.5]")
        for name in ("tortuosity_gain", "stripe_amplitude", "lesion_rate", "noise_sigma", "base_curvature", "age_haze"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.n_patients < 0:
            raise ValidationError("n_patients must be non-negative")
        object.__setattr__(self, "views", tuple(tuple(v) for v in self.views))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["views"] = [list(v) for v in self.views]
        return d


@dataclass(frozen=True)
class PatientTruth:
    patient_id: str
    age_years: float
    gender: Gender
    lesion_count: int
    disease: int
    center: tuple  # (row, col) in pixel coordinates
    radius: float
    mean_abs_turn: float  # mean |heading change| of the vessel walks
    vessel_count: int


def analytic_retina_mask(size: int = 224, radius_fraction: float = 0.45) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    return (((yy - c) ** 2 + (xx - c) ** 2) <= (radius_fraction * size) ** 2).astype(np.uint8)


def _splat(canvas: np.ndarray, y: float, x: float, sigma: float, amp: float = 1.0):
    rad = int(np.ceil(3 * sigma))
    h, w = canvas.shape
    y0, y1 = max(int(y) - rad, 0), min(int(y) + rad + 2, h)
    x0, x1 = max(int(x) - rad, 0), min(int(x) + rad + 2, w)
    if y0 >= y1 or x0 >= x1:
        return
    yy = np.arange(y0, y1)[:, None] + 0.5
    xx = np.arange(x0, x1)[None, :] + 0.5
    blob = amp * np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * sigma**2))
    np.maximum(canvas[y0:y1, x0:x1], blob, out=canvas[y0:y1, x0:x1])


def _render_base(rng: np.random.Generator, spec: SynthSpec, age_norm: float, female: bool, lesions: int):
    """Left-eye base image (H, W, 3) plus vessel statistics."""
    n = spec.image_size
    c = n / 2.0
    radius = spec.radius_fraction * n
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dy, dx = yy - c, xx - c
    dist = np.hypot(dy, dx)
    alpha = np.clip(radius - dist + 0.5, 0.0, 1.0)

    tint = np.array([0.78, 0.38, 0.18]) * rng.uniform(0.9, 1.1)
    illum = 1.0 - 0.35 * np.clip(dist / radius, 0, 1) ** 2
    smooth = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=6.0)
    smooth *= 0.04 / (smooth.std() + 1e-12)
    img = (illum + smooth)[..., None] * tint

    # optic disc on the nasal side, macula near the centre
    disc_y, disc_x = c + rng.uniform(-0.05, 0.05) * radius, c + 0.45 * radius
    disc = np.exp(-((yy - disc_y) ** 2 + (xx - disc_x) ** 2) / (2 * (0.1 * radius) ** 2))
    img += disc[..., None] * np.array([0.2, 0.2, 0.12])
    mac = np.exp(-((yy - c) ** 2 + (xx - (c - 0.1 * radius)) ** 2) / (2 * (0.12 * radius) ** 2))
    img *= (1.0 - 0.25 * mac)[..., None]

    vessels = np.zeros((n, n))
    n_vessels = int(rng.integers(6, 11))
    kappa = spec.base_curvature * (1.0 + spec.tortuosity_gain * age_norm)
    turns = []
    for _ in range(n_vessels):
        y, x = disc_y + rng.normal(0, 2), disc_x + rng.normal(0, 2)
        heading = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.9, 1.6)
        for _ in range(90):
            d_theta = rng.normal(0.0, kappa)
            turns.append(abs(d_theta))
            heading += d_theta
            y += 2.0 * np.sin(heading)
            x += 2.0 * np.cos(heading)
            if np.hypot(y - c, x - c) > radius - 1:
                break
            _splat(vessels, y, x, width)
    img[..., 0] *= 1.0 - 0.35 * vessels
    img[..., 1] *= 1.0 - 0.6 * vessels
    img[..., 2] *= 1.0 - 0.6 * vessels

    if female:
        phi = np.arctan2(dy, dx)
        img += (spec.stripe_amplitude * np.sin(spec.stripe_frequency * phi))[..., None]

    blobs = np.zeros((n, n))
    for _ in range(lesions):
        rr = 0.8 * radius * np.sqrt(rng.uniform())
        th = rng.uniform(0, 2 * np.pi)
        _splat(blobs, c + rr * np.sin(th), c + rr * np.cos(th), rng.uniform(2.0, 3.5))
    img += blobs[..., None] * np.array([0.3, 0.27, 0.05])

    # lens opacity: older eyes look flatter and more yellow
    haze = min(spec.age_haze * age_norm, 1.0)
    img = (1.0 - haze) * img + haze * HAZE_COLOR
    img = np.clip(img, 0.0, 1.0) * alpha[..., None]
    return img, float(np.mean(turns)), n_vessels


def scanner_transform(img: np.ndarray, gamma: float, green_shift: float) -> np.ndarray:
    out = np.clip(img, 0.0, 1.0) ** gamma
    out[..., 1] += green_shift
    return np.clip(out, 0.0, 1.0)


def generate_patient(patient_seed, spec: SynthSpec = SynthSpec(), patient_id: str = "P0000"):
    """Render every configured view of one patient.

    Returns (PatientRecord, PatientTruth). All randomness flows from ``patient_seed``.
    """
    rng = np.random.default_rng(patient_seed)
    age = float(rng.uniform(*spec.age_range))
    female = bool(rng.random() < spec.p_female)
    lesions = int(min(rng.poisson(spec.lesion_rate), 10))
    base, mean_turn, n_vessels = _render_base(rng, spec, normalize_age(age), female, lesions)
    gender = Gender.F if female else Gender.M
    labels = MetadataLabels(age, gender)

    images = []
    for acq, (eye, scanner) in enumerate(spec.views):
        eye = Eye(eye)
        img = base if eye is Eye.LEFT else base[:, ::-1]
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
        img = np.clip(img, 0.0, 1.0)
        if scanner == "B":
            img = scanner_transform(img, spec.scanner_b_gamma, spec.scanner_b_green_shift)
        img = np.round(img * 255.0) / 255.0  # stored as 8-bit
        images.append(FundusImage(patient_id, eye, scanner, img.astype(np.float32), acquisition_index=acq))
    truth = PatientTruth(
        patient_id=patient_id,
        age_years=age,
        gender=gender,
        lesion_count=lesions,
        disease=int(lesions >= DISEASE_MIN_LESIONS),
        center=(spec.image_size / 2.0, spec.image_size / 2.0),
        radius=spec.radius_fraction * spec.image_size,
        mean_abs_turn=mean_turn,
        vessel_count=n_vessels,
    )
    return PatientRecord(patient_id, images, labels), truth


def patient_seed(spec: SynthSpec, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(spec.seed), int(index)])


def split_sizes(n: int, shares=SPLITS) -> dict:
    """Largest-remainder apportionment of ``n`` patients; ties go to the later split."""
    total = sum(p for _, p in shares)
    base = {name: n * p // total for name, p in shares}
    rem = {name: n * p % total for name, p in shares}
    order = sorted(range(len(shares)), key=lambda i: (-rem[shares[i][0]], -i))
    for i in order[: n - sum(base.values())]:
        base[shares[i][0]] += 1
    return base


def assign_splits(patient_ids, seed: int) -> dict:
    ids = list(patient_ids)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917])).permutation(len(ids))
    sizes = split_sizes(len(ids))
    out, pos = {}, 0
    for name, _ in SPLITS:
        for j in perm[pos : pos + sizes[name]]:
            out[ids[j]] = name
        pos += sizes[name]
    return out


@dataclass(frozen=True)
class SynthDataset:
    root: Path
    manifest: Path
    labels: Path
    truths: dict = field(default_factory=dict)


def generate_dataset(spec: SynthSpec, out_dir, workers: int = 1) -> SynthDataset:
    """Write images, ``manifest.csv`` and ``labels.csv`` into a new directory."""
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        raise ValidationError(f"output directory {root} exists and is not empty")
    (root / "images").mkdir(parents=True, exist_ok=True)
    ids = [f"P{i:04d}" for i in range(spec.n_patients)]

    def make(i):
        record, truth = generate_patient(patient_seed(spec, i), spec, ids[i])
        paths = []
        for img in record.images:
            rel = Path("images") / f"{record.patient_id}_{img.eye.value}_{img.scanner_id}_{img.acquisition_index}.png"
            Image.fromarray(np.round(img.pixels * 255).astype(np.uint8)).save(root / rel)
            paths.append(rel)
        return record, truth, paths

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(make, range(spec.n_patients)))
    else:
        results = [make(i) for i in range(spec.n_patients)]

    splits = assign_splits(ids, spec.seed)
    manifest = root / "manifest.csv"
    labels = root / "labels.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fm, labels.open("w", newline="", encoding="utf-8") as fl:
        wm, wl = csv.writer(fm), csv.writer(fl)
        wm.writerow(MANIFEST_HEADER)
        wl.writerow(LABELS_HEADER)
        for record, truth, paths in results:
            for img, rel in zip(record.images, paths):
                wm.writerow([record.patient_id, rel.as_posix(), img.eye.value, img.scanner_id,
                             f"{truth.age_years:.4f}", truth.gender.value])
            wl.writerow([record.patient_id, splits[record.patient_id], f"{truth.age_years:.4f}",
                         truth.gender.value, truth.disease])
    return SynthDataset(root, manifest, labels, {t.patient_id: t for _, t, _ in results})


def read_labels(path) -> dict:
    """patient_id -> dict(split, age_years, gender, disease) from a labels file."""
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABELS_HEADER:
            raise ValidationError(f"labels header must be {','.join(LABELS_HEADER)}")
        for row in reader:
            out[row["patient_id"]] = {
                "split": row["split"],
                "age_years": float(row["age_years"]),
                "gender": Gender(row["gender"]),
                "disease": int(row["disease"]),
            }
    return out
