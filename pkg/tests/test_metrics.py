import logging
import math

import numpy as np
import pytest

from cicreg.errors import InvalidInputError, UndefinedMetricError
from cicreg.losses import ssim_map
from cicreg.metrics import (
    METRIC_FIELDS,
    MetricReport,
    dice,
    evaluate_all,
    gradient_similarity,
    mae,
    mse,
    mutual_information,
    ncc,
    psnr,
)
from cicreg.records import format_record, parse_record
from cicreg.volume import Volume
from phantoms import random_volume, smooth_volume

PAIRS = 50


def random_pairs(dims=(8, 8, 8)):
    for seed in range(PAIRS):
        yield random_volume(dims, 2 * seed), random_volume(dims, 2 * seed + 1)


def dyadic_volume(dims, seed):
    """Intensities k / 256, so small affine rescalings stay exact in float32."""
    return Volume(np.random.default_rng(seed).integers(0, 256, size=dims) / 256.0)


# --- brute-force oracles ---


def brute_pearson(x, y):
    xs = [float(v) for v in np.asarray(x, dtype=np.float64).ravel()]
    ys = [float(v) for v in np.asarray(y, dtype=np.float64).ravel()]
    mx = sum(xs) / len(xs)
    my = sum(ys) / len(ys)
    sxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = sum((a - mx) ** 2 for a in xs)
    syy = sum((b - my) ** 2 for b in ys)
    return sxy / math.sqrt(sxx * syy)


def brute_mi(a, b, bins=32):
    xs = [float(v) for v in a.data.ravel()]
    ys = [float(v) for v in b.data.ravel()]
    n = len(xs)

    def cell(value):
        return min(int(math.floor(min(max(value, 0.0), 1.0) * bins)), bins - 1)

    joint = {}
    for x, y in zip(xs, ys):
        key = (cell(x), cell(y))
        joint[key] = joint.get(key, 0) + 1
    pa, pb = {}, {}
    for (i, j), count in joint.items():
        pa[i] = pa.get(i, 0) + count
        pb[j] = pb.get(j, 0) + count
    total = 0.0
    for (i, j), count in joint.items():
        p = count / n
        total += p * math.log(p / ((pa[i] / n) * (pb[j] / n)))
    return total


def brute_gradient_magnitude(data):
    data = np.asarray(data, dtype=np.float64)
    out = np.zeros(data.shape)
    for index in np.ndindex(*data.shape):
        squares = 0.0
        for axis, n in enumerate(data.shape):
            i = index[axis]
            lo = list(index)
            hi = list(index)
            if i == 0:
                hi[axis] = 1
                d = data[tuple(hi)] - data[tuple(lo)]
            elif i == n - 1:
                lo[axis] = n - 2
                d = data[tuple(hi)] - data[tuple(lo)]
            else:
                lo[axis] = i - 1
                hi[axis] = i + 1
                d = (data[tuple(hi)] - data[tuple(lo)]) / 2.0
            squares += d * d
        out[index] = math.sqrt(squares)
    return out


class TestNcc:
    def test_self_correlation(self):
        v = random_volume((6, 6, 6))
        assert ncc(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_intensities(self):
        v = dyadic_volume((6, 6, 6), 1)
        assert ncc(v, Volume(1.0 - v.data)) == pytest.approx(-1.0, abs=1e-12)

    def test_matches_two_pass_oracle(self):
        for a, b in random_pairs():
            assert ncc(a, b) == pytest.approx(brute_pearson(a.data, b.data), abs=1e-10)

    def test_one_constant_input_is_zero(self):
        assert ncc(Volume(np.full((4, 4, 4), 0.5)), random_volume((4, 4, 4))) == 0.0

    def test_both_constant_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            ncc(Volume(np.zeros((4, 4, 4))), Volume(np.ones((4, 4, 4))))

    def test_affine_rescale_invariance(self):
        a, b = dyadic_volume((8, 8, 8), 1), dyadic_volume((8, 8, 8), 2)
        rescaled = Volume(3.0 * a.data + 0.25)
        assert ncc(rescaled, b) == pytest.approx(ncc(a, b), abs=1e-10)


class TestMutualInformation:
    def test_uniform_self_information_is_log_bins(self):
        values = (np.arange(512) % 32 + 0.5) / 32.0
        v = Volume(values.reshape(8, 8, 8))
        assert mutual_information(v, v) == pytest.approx(math.log(32), abs=1e-12)

    def test_constant_partner_carries_no_information(self):
        assert mutual_information(Volume(np.full((8, 8, 8), 0.4)), random_volume((8, 8, 8))) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_matches_histogram_oracle(self):
        for a, b in random_pairs():
            assert mutual_information(a, b) == pytest.approx(brute_mi(a, b), abs=1e-10)

    def test_self_information_is_entropy(self):
        v = random_volume((8, 8, 8))
        counts = np.bincount(np.minimum((v.data.ravel().astype(np.float64) * 32).astype(int), 31), minlength=32)
        p = counts[counts > 0] / counts.sum()
        assert mutual_information(v, v) == pytest.approx(float(-(p * np.log(p)).sum()), abs=1e-12)

    def test_top_value_lands_in_last_bin(self):
        a = Volume(np.array([0.0, 1.0] * 4).reshape(2, 2, 2))
        assert mutual_information(a, a) == pytest.approx(math.log(2), abs=1e-12)

    def test_bins_validated(self):
        with pytest.raises(InvalidInputError):
            mutual_information(random_volume((4, 4, 4)), random_volume((4, 4, 4)), bins=1)


class TestIntensityErrors:
    def test_identical(self):
        v = random_volume((5, 5, 5))
        assert mse(v, v) == 0.0
        assert mae(v, v) == 0.0
        assert psnr(v, v) == math.inf

    def test_constant_offset(self):
        a, b = Volume(np.zeros((4, 4, 4))), Volume(np.full((4, 4, 4), 0.1))
        assert mse(a, b) == pytest.approx(0.01, rel=1e-6)
        assert mae(a, b) == pytest.approx(0.1, rel=1e-6)
        assert psnr(a, b) == pytest.approx(20.0, rel=1e-6)

    def test_match_loop_oracle(self):
        for a, b in random_pairs():
            xs, ys = a.data.astype(np.float64).ravel(), b.data.astype(np.float64).ravel()
            n = len(xs)
            squared = sum((float(x) - float(y)) ** 2 for x, y in zip(xs, ys)) / n
            absolute = sum(abs(float(x) - float(y)) for x, y in zip(xs, ys)) / n
            assert mse(a, b) == pytest.approx(squared, abs=1e-12)
            assert mae(a, b) == pytest.approx(absolute, abs=1e-12)
            assert psnr(a, b) == pytest.approx(10.0 * math.log10(1.0 / squared), abs=1e-9)


class TestDice:
    def _mask_volume(self, indices):
        data = np.zeros(1000)
        data[list(indices)] = 1.0
        return Volume(data.reshape(10, 10, 10))

    def test_identical_masks(self):
        v = self._mask_volume(range(100))
        assert dice(v, v) == 1.0

    def test_partial_overlap(self):
        assert dice(self._mask_volume(range(100)), self._mask_volume(range(20, 120))) == pytest.approx(0.8)

    def test_two_empty_masks_agree(self):
        assert dice(Volume(np.zeros((4, 4, 4))), Volume(np.zeros((4, 4, 4)))) == 1.0

    def test_intensity_changes_below_threshold_crossing_are_ignored(self):
        a, b = random_volume((8, 8, 8), 1), random_volume((8, 8, 8), 2)
        data = b.data.astype(np.float64)
        remapped = Volume(np.where(data > 0.1, 0.5 + 0.5 * data, 0.5 * data))
        assert dice(a, remapped) == dice(a, b)


class TestGradientSimilarity:
    def test_self_similarity(self):
        v = smooth_volume((8, 8, 8))
        assert gradient_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_additive_shift_is_invisible(self):
        v = dyadic_volume((8, 8, 8), 3)
        assert gradient_similarity(v, Volume(v.data + 0.25)) == pytest.approx(1.0, abs=1e-12)

    def test_matches_composed_oracle(self):
        for seed in range(5):
            a, b = smooth_volume((8, 8, 8), seed=2 * seed), smooth_volume((8, 8, 8), seed=2 * seed + 1)
            expected = brute_pearson(brute_gradient_magnitude(a.data), brute_gradient_magnitude(b.data))
            assert gradient_similarity(a, b) == pytest.approx(expected, abs=1e-10)

    def test_affine_rescale_invariance(self):
        a, b = dyadic_volume((8, 8, 8), 4), dyadic_volume((8, 8, 8), 5)
        rescaled = Volume(3.0 * a.data + 0.25)
        assert gradient_similarity(rescaled, b) == pytest.approx(gradient_similarity(a, b), abs=1e-10)

    def test_needs_three_voxels_per_axis(self):
        with pytest.raises(InvalidInputError):
            gradient_similarity(random_volume((2, 4, 4)), random_volume((2, 4, 4)))


def test_symmetric_metrics_are_exactly_symmetric():
    for a, b in list(random_pairs())[:10]:
        assert ncc(a, b) == ncc(b, a)
        assert mse(a, b) == mse(b, a)
        assert mae(a, b) == mae(b, a)
        assert mutual_information(a, b) == mutual_information(b, a)
        assert dice(a, b) == dice(b, a)
        assert gradient_similarity(a, b) == gradient_similarity(b, a)


def test_dimension_mismatch_is_rejected():
    a, b = random_volume((4, 4, 4)), random_volume((4, 4, 5))
    for metric in (ncc, mutual_information, mse, mae, psnr, dice, gradient_similarity):
        with pytest.raises(InvalidInputError):
            metric(a, b)


class TestEvaluateAll:
    def test_identical_pair(self):
        v = smooth_volume((10, 10, 10))
        report = evaluate_all(v, v)
        assert report.ssim == pytest.approx(1.0, abs=1e-7)
        assert report.ncc == pytest.approx(1.0, abs=1e-12)
        assert (report.mse, report.mae, report.dice, report.psnr) == (0.0, 0.0, 1.0, math.inf)

    def test_fields_equal_standalone_metrics(self):
        a, b = smooth_volume((10, 10, 10), seed=1), smooth_volume((10, 10, 10), seed=2)
        report = evaluate_all(a, b)
        assert report.ssim == max(0.0, float(ssim_map(a, b)[0]))
        assert report.ncc == ncc(a, b)
        assert report.mi == mutual_information(a, b)
        assert report.psnr == psnr(a, b)
        assert report.mse == mse(a, b)
        assert report.mae == mae(a, b)
        assert report.dice == dice(a, b)
        assert report.gradient_similarity == gradient_similarity(a, b)

    def test_anticorrelated_pair_floors_ssim_at_zero(self):
        v = smooth_volume((10, 10, 10), seed=3)
        inverted = Volume(1.0 - v.data)
        assert ssim_map(v, inverted)[0] < 0
        report = evaluate_all(v, inverted)
        assert report.ssim == 0.0
        assert report.ncc == pytest.approx(-1.0, abs=1e-6)

    def test_undefined_metrics_become_null_with_warning(self, caplog):
        a, b = Volume(np.zeros((8, 8, 8))), Volume(np.full((8, 8, 8), 0.5))
        with caplog.at_level(logging.WARNING, logger="cicreg.metrics"):
            report = evaluate_all(a, b)
        assert report.ncc is None
        assert report.gradient_similarity is None
        assert any("ncc" in r.message for r in caplog.records)

    def test_record_layout(self):
        report = MetricReport(0.8585, 0.97, 1.2, 28.5, 0.0014, 0.02, 0.95, 0.9)
        line = format_record(report.as_record())
        assert line.split("\t")[0] == "ssim=0.8585"
        assert tuple(parse_record(line)) == METRIC_FIELDS
        assert format_record(MetricReport(1.0, 1.0, 2.0, math.inf, 0.0, 0.0, 1.0, None).as_record()).endswith(
            "psnr=inf\tmse=0.0\tmae=0.0\tdice=1.0\tgradient_similarity=null"
        )
