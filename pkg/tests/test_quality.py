import itertools
from math import comb

import numpy as np
import pytest

from crowdfer.quality import (QualityCurve, TaggerNoiseModel, quality_curve, subsample_agreement,
                              synth_votes)


def exact_agreement(tags, m, K):
    """Enumerate every m-subset of each item's tags (lowest-index ties)."""
    total = 0.0
    for row in tags:
        ref = np.argmax(np.bincount(row, minlength=K))
        subsets = list(itertools.combinations(range(len(row)), m))
        hit = sum(np.argmax(np.bincount(row[list(s)], minlength=K)) == ref for s in subsets)
        total += hit / len(subsets)
    return total / len(tags)


def test_enumeration_oracle_worked_example():
    # 6 A's (class 0) and 4 B's: AA=15 -> A, AB=24 tie -> A, BB=6 -> B
    row = np.array([[0] * 6 + [1] * 4])
    assert comb(10, 2) == 45
    assert exact_agreement(row, 2, 2) == pytest.approx(39 / 45)
    # with the labels swapped, ties go to the minority
    assert exact_agreement(1 - row, 2, 2) == pytest.approx(15 / 45)


def test_monte_carlo_matches_enumeration():
    rng = np.random.default_rng(0)
    row = np.array([[0] * 6 + [1] * 4])
    n = 20_000
    est = subsample_agreement(row, 2, n, rng, K=2)
    p = 39 / 45
    assert abs(est - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_full_panel_is_one(rng):
    tags = synth_votes(rng.integers(0, 8, 200), TaggerNoiseModel.symmetric(8, 0.6), 10, rng)
    assert subsample_agreement(tags, 10, 5, rng, 8) == 1.0


def test_unanimous_robust(rng):
    tags = np.repeat(rng.integers(0, 8, (50, 1)), 10, axis=1)
    for m in range(1, 11):
        assert subsample_agreement(tags, m, 3, rng, 8) == 1.0


def test_m_out_of_range(rng):
    with pytest.raises(ValueError):
        subsample_agreement(np.zeros((2, 10), dtype=int), 11, 1, rng)
    with pytest.raises(ValueError):
        subsample_agreement(np.zeros((2, 10), dtype=int), 0, 1, rng)


def test_identity_noise_flat_curve(rng):
    tags = synth_votes(rng.integers(0, 8, 100), TaggerNoiseModel.identity(8), 10, rng)
    curve = quality_curve(tags, 5, rng, 8)
    assert [a for _, a in curve.points] == [1.0] * 10


def test_noisy_curve_monotone(rng):
    tags = synth_votes(rng.integers(0, 8, 1000), TaggerNoiseModel.symmetric(8, 0.5), 10, rng)
    curve = quality_curve(tags, 20, rng, 8)
    a = [v for _, v in curve.points]
    assert all(y >= x - 0.01 for x, y in zip(a, a[1:]))
    assert a[0] < 1.0 and a[-1] == 1.0


def test_synth_identity(rng):
    truth = rng.integers(0, 8, 30)
    tags = synth_votes(truth, TaggerNoiseModel.identity(8), 10, rng)
    assert np.array_equal(tags, np.repeat(truth[:, None], 10, axis=1))


def test_synth_uniform_rows():
    rng = np.random.default_rng(1)
    tags = synth_votes(np.zeros(10_000, dtype=int), TaggerNoiseModel.uniform(8), 10, rng)
    freq = np.bincount(tags.ravel(), minlength=8) / tags.size
    sigma = np.sqrt((1 / 8) * (7 / 8) / tags.size)
    assert np.all(np.abs(freq - 1 / 8) < 3 * sigma)


def test_synth_deterministic():
    truth = np.arange(8)
    n = TaggerNoiseModel.symmetric(8, 0.3)
    assert np.array_equal(synth_votes(truth, n, 10, np.random.default_rng(3)),
                          synth_votes(truth, n, 10, np.random.default_rng(3)))


def test_noise_model_validation():
    with pytest.raises(ValueError):
        TaggerNoiseModel(np.array([[0.5, 0.4], [0.5, 0.5]]))
    np.testing.assert_allclose(TaggerNoiseModel.symmetric(4, 0.3).confusion.sum(axis=1), 1.0)


def test_tsv():
    text = QualityCurve([(1, 0.5), (2, 1.0)], 3, 4).to_tsv()
    assert text.splitlines()[0] == "m\tagreement\tn_items\tn_resamples"
    assert text.splitlines()[2] == "2\t1.000000\t3\t4"
