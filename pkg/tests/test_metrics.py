import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patientmae.core_types import ValidationError
from patientmae.metrics import auprc, auroc


def auroc_pairs(scores, labels):
    """Every (positive, negative) pair; ties score one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def auprc_thresholds(scores, labels):
    """Step-curve area from an explicit threshold loop over distinct scores."""
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        selected = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(selected)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / len(selected))
        prev_recall = recall
    return area


def random_draw(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    # coarse rounding forces ties
    scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    return scores, labels


def test_match_bruteforce_oracles():
    for seed in range(200):
        scores, labels = random_draw(seed)
        assert auroc(scores, labels) == pytest.approx(auroc_pairs(list(scores), list(labels)), abs=1e-9)
        assert auprc(scores, labels) == pytest.approx(auprc_thresholds(list(scores), list(labels)), abs=1e-9)


def test_perfect_ordering():
    scores = [0.1, 0.2, 0.8, 0.9]
    labels = [0, 0, 1, 1]
    assert auroc(scores, labels) == 1.0
    assert auprc(scores, labels) == 1.0


def test_all_tied():
    labels = [0, 1] * 5
    assert auroc(np.zeros(10), labels) == 0.5
    assert auprc(np.zeros(10), labels) == 0.5
    assert auprc(np.zeros(4), [1, 0, 0, 0]) == 0.25


def test_one_class_rejected():
    with pytest.raises(ValidationError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValidationError):
        auprc([0.1, 0.2], [0, 0])


def test_bad_inputs():
    with pytest.raises(ValidationError):
        auroc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(ValidationError):
        auroc([0.1, 0.2], [0, 2])


# integer scores keep the transforms below strictly monotone in floating point
distinct_scores = st.lists(st.integers(-1000, 1000), min_size=4, max_size=40, unique=True)


@settings(max_examples=100, deadline=None)
@given(distinct_scores, st.integers(0, 2**32 - 1))
def test_negation_complements(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[:2] = [0, 1]
    s = np.array(scores, dtype=float)
    assert auroc(s, labels) + auroc(-s, labels) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(distinct_scores, st.integers(0, 2**32 - 1))
def test_monotone_invariance(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[:2] = [0, 1]
    s = np.array(scores, dtype=float)
    assert auroc(np.exp(s / 100) * 3 + 1, labels) == auroc(s, labels)
    assert auprc(s**3 - 7, labels) == auprc(s, labels)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auprc_at_least_prevalence(seed):
    # a ranking whose precision never drops below prevalence at any cut-off
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 30))
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.normal(size=n) + 1.5 * labels
    order = np.argsort(-scores)
    prefix_precision = np.cumsum(labels[order]) / np.arange(1, n + 1)
    if prefix_precision.min() < labels.mean():
        return
    value = auprc(scores, labels)
    assert value == pytest.approx(auprc_thresholds(list(scores), list(labels)), abs=1e-9)
    assert value >= labels.mean() - 1e-12
