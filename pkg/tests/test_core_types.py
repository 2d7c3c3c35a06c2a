import numpy as np
import pytest
from hypothesis import given, strategies as st

from patientmae.core_types import (
    Eye,
    FundusImage,
    Gender,
    MetadataLabels,
    PairSample,
    PatientRecord,
    ValidationError,
    denormalize_age,
    normalize_age,
)

from conftest import make_image


@pytest.mark.parametrize("age, expected", [(0, 0.0), (100, 1.0), (130, 1.2)])
def test_normalize_age_examples(age, expected):
    assert normalize_age(age) == expected


def test_normalize_age_rejects_negative():
    with pytest.raises(ValidationError):
        normalize_age(-1.0)


@given(st.floats(0, 120), st.floats(0, 120))
def test_normalize_age_monotone(a, b):
    lo, hi = sorted((a, b))
    assert normalize_age(lo) <= normalize_age(hi)


@given(st.floats(0, 120))
def test_normalize_age_roundtrip(a):
    once = normalize_age(a)
    assert normalize_age(denormalize_age(once)) == pytest.approx(once, abs=1e-15)


def test_labels_validation():
    assert MetadataLabels(54.0, "M").gender is Gender.M
    assert MetadataLabels(54.0, Gender.F).age_normalized == pytest.approx(0.54)
    with pytest.raises(ValidationError):
        MetadataLabels(54.0, "X")
    with pytest.raises(ValidationError):
        MetadataLabels(121.0, Gender.F)


def test_image_invariants():
    with pytest.raises(ValidationError):
        FundusImage("P", Eye.LEFT, "A", np.zeros((100, 100, 3)))
    with pytest.raises(ValidationError):
        FundusImage("P", Eye.LEFT, "A", np.full((224, 224, 3), 1.5))
    with pytest.raises(ValidationError):
        FundusImage("P", Eye.LEFT, "A", np.zeros((224, 224, 3)), retina_mask=np.full((224, 224), 2))
    img = make_image()
    assert img.effective_laterality is Eye.LEFT
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 0.1  # read-only


def test_record_and_pair_invariants():
    a, b = make_image("P1", "L"), make_image("P2", "R")
    with pytest.raises(ValidationError):
        PatientRecord("P1", [a, b], MetadataLabels(50, Gender.F))
    labels = MetadataLabels(50, Gender.F)
    with pytest.raises(ValidationError):
        PairSample(a, b, labels, cross_laterality=True)
    with pytest.raises(ValidationError):
        PairSample(a, a, labels, cross_laterality=False)
    c = make_image("P1", "R", acq=1)
    with pytest.raises(ValidationError):
        PairSample(a, c, labels, cross_laterality=False)
    pair = PairSample(a, c, labels, cross_laterality=True)
    assert pair.mirrored
