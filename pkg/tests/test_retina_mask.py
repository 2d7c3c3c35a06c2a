import numpy as np
import pytest

from patientmae.core_types import ValidationError
from patientmae.retina_mask import (
    cached_retina_mask,
    estimate_retina_mask,
    inscribed_circle,
    mask_cache_path,
    patch_eligibility,
)
from patientmae.synth import SynthSpec, analytic_retina_mask, generate_patient, patient_seed


def disc_image(radius_fraction=0.45, brightness=0.6):
    m = analytic_retina_mask(224, radius_fraction).astype(np.float32)
    return np.repeat(m[..., None], 3, axis=2) * brightness


def iou(a, b):
    return (a & b).sum() / (a | b).sum()


def naive_eligibility(mask, p, thr):
    g = mask.shape[0] // p
    out = np.zeros((g, g), dtype=bool)
    for i in range(g):
        for j in range(g):
            count = 0
            for y in range(i * p, (i + 1) * p):
                for x in range(j * p, (j + 1) * p):
                    count += int(mask[y, x])
            out[i, j] = count / (p * p) >= thr
    if not out.any():
        best, arg = -1, 0
        for k in range(g * g):
            i, j = divmod(k, g)
            c = mask[i * p : (i + 1) * p, j * p : (j + 1) * p].sum()
            if c > best:
                best, arg = c, k
        out.flat[arg] = True
    return out


def test_bright_disc_iou():
    truth = analytic_retina_mask(224, 0.45)
    est = estimate_retina_mask(disc_image())
    assert iou(est.astype(bool), truth.astype(bool)) >= 0.95


def test_black_image_falls_back_to_inscribed_circle():
    est = estimate_retina_mask(np.zeros((224, 224, 3), dtype=np.float32))
    expected = np.pi * (0.47 * 224) ** 2
    assert abs(est.sum() - expected) / expected <= 0.01
    assert np.array_equal(est, inscribed_circle(224, 224))


def test_white_image_full_frame():
    est = estimate_retina_mask(np.ones((224, 224, 3), dtype=np.float32))
    assert est.mean() >= 0.99


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_images_iou(seed):
    spec = SynthSpec()
    rec, _ = generate_patient(patient_seed(spec, seed), spec)
    truth = analytic_retina_mask().astype(bool)
    for img in rec.images:
        assert iou(estimate_retina_mask(img).astype(bool), truth) >= 0.95


@pytest.mark.parametrize("factor", [0.8, 0.9, 1.1, 1.25])
def test_brightness_scaling_keeps_eligible_set(factor):
    spec = SynthSpec()
    rec, _ = generate_patient(patient_seed(spec, 3), spec)
    px = rec.images[0].pixels
    base = patch_eligibility(estimate_retina_mask(px)).grid
    scaled = patch_eligibility(estimate_retina_mask(np.clip(px * factor, 0, 1))).grid
    assert np.array_equal(base, scaled)


def test_eligibility_full_and_empty():
    assert patch_eligibility(np.ones((224, 224))).count == 196
    empty = patch_eligibility(np.zeros((224, 224)))
    assert empty.count == 1


def test_eligibility_matches_pixel_count_oracle():
    mask = analytic_retina_mask(224, 0.45)
    grid = patch_eligibility(mask, 16, 0.5).grid
    oracle = naive_eligibility(mask, 16, 0.5)
    assert np.array_equal(grid, oracle)
    assert grid.sum() == oracle.sum()


@pytest.mark.parametrize("thr", [0.05, 0.3, 0.77, 1.0])
def test_eligibility_oracle_random_masks(thr):
    rng = np.random.default_rng(int(thr * 100))
    mask = (rng.random((32, 32)) < 0.4).astype(np.uint8)
    assert np.array_equal(patch_eligibility(mask, 8, thr).grid, naive_eligibility(mask, 8, thr))


def test_eligibility_monotone_in_threshold():
    mask = analytic_retina_mask(224, 0.4)
    prev = None
    for thr in np.linspace(0.05, 1.0, 20):
        grid = patch_eligibility(mask, 16, thr).grid
        if prev is not None:
            assert not np.any(grid & ~prev)
        prev = grid


def test_eligibility_validation():
    with pytest.raises(ValidationError):
        patch_eligibility(np.ones((100, 100)), 16)
    with pytest.raises(ValidationError):
        patch_eligibility(np.ones((224, 224)), 16, 0.0)


def test_mask_cache_roundtrip(tmp_path):
    img_path = tmp_path / "img.png"
    px = disc_image()
    first = cached_retina_mask(img_path, px)
    cache = mask_cache_path(img_path)
    assert cache.exists()
    stamp = cache.stat().st_mtime_ns
    assert np.array_equal(cached_retina_mask(img_path, px), first)
    assert cache.stat().st_mtime_ns == stamp
    # content change invalidates the cache
    other = cached_retina_mask(img_path, disc_image(0.3))
    assert other.sum() < first.sum()
