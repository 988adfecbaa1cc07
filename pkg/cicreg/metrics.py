"""
Pairwise evaluation metrics for registered volumes.

All metrics are global (full volume, no masking) and accumulate in float64. Intensities
are expected on [0, 1]; PSNR uses a fixed peak of 1.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Callable, Optional

import numpy as np
from scipy.stats import entropy

from cicreg.errors import InvalidInputError, UndefinedMetricError
from cicreg.losses import SsimParams, ssim_map
from cicreg.volume import Volume, binarize

logger = logging.getLogger(__name__)

MI_BINS = 32
DICE_THRESHOLD = 0.1


@dataclass(frozen=True)
class MetricReport:
    """One evaluated pair. A field is None when the metric is undefined for the inputs."""

    ssim: Optional[float]
    ncc: Optional[float]
    mi: Optional[float]
    psnr: Optional[float]
    mse: Optional[float]
    mae: Optional[float]
    dice: Optional[float]
    gradient_similarity: Optional[float]

    def as_record(self) -> dict[str, Any]:
        return asdict(self)


METRIC_FIELDS = tuple(MetricReport.__dataclass_fields__)


def _require_same_dims(a: Volume, b: Volume) -> None:
    if a.dims != b.dims:
        raise InvalidInputError(f"Volume dimensions differ: {a.dims} vs {b.dims}")


def _pearson(x: np.ndarray, y: np.ndarray, what: str) -> float:
    x_flat = x.ravel().astype(np.float64)
    y_flat = y.ravel().astype(np.float64)
    x_constant = x_flat.max() == x_flat.min()
    y_constant = y_flat.max() == y_flat.min()
    if x_constant and y_constant:
        raise UndefinedMetricError(f"{what} is undefined when both inputs are constant")
    if x_constant or y_constant:
        return 0.0
    dx = x_flat - x_flat.mean()
    dy = y_flat - y_flat.mean()
    value = float(np.sum(dx * dy) / math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy))))
    return min(1.0, max(-1.0, value))


def ncc(a: Volume, b: Volume) -> float:
    """
    Global Pearson correlation of intensities.

    Returns 0 when exactly one input is constant.

    Raises:
        InvalidInputError: If the dimensions differ.
        UndefinedMetricError: If both inputs are constant.
    """
    _require_same_dims(a, b)
    return _pearson(a.data, b.data, "NCC")


def _bin_indices(data: np.ndarray, bins: int) -> np.ndarray:
    values = np.clip(data.ravel().astype(np.float64), 0.0, 1.0)
    return np.minimum(np.floor(values * bins).astype(np.intp), bins - 1)


def mutual_information(a: Volume, b: Volume, bins: int = MI_BINS) -> float:
    """
    Histogram mutual information in nats over ``bins`` equal-width cells per axis on [0, 1].

    Values outside [0, 1] are clipped; 1.0 falls in the top bin.

    Raises:
        InvalidInputError: If the dimensions differ or bins < 2.
    """
    _require_same_dims(a, b)
    if bins < 2:
        raise InvalidInputError(f"bins must be at least 2, got {bins}")
    ia = _bin_indices(a.data, bins)
    ib = _bin_indices(b.data, bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).astype(np.float64)
    marginal_a = np.bincount(ia, minlength=bins).astype(np.float64)
    marginal_b = np.bincount(ib, minlength=bins).astype(np.float64)
    # sorted cells make the joint entropy independent of argument order
    value = (entropy(marginal_a) + entropy(marginal_b)) - entropy(np.sort(joint))
    return max(0.0, float(value))


def mse(a: Volume, b: Volume) -> float:
    _require_same_dims(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(diff * diff))


def mae(a: Volume, b: Volume) -> float:
    _require_same_dims(a, b)
    return float(np.mean(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))))


def psnr(a: Volume, b: Volume) -> float:
    """10 * log10(1 / MSE) in dB for unit peak; +inf for identical inputs."""
    error = mse(a, b)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / error)


def dice(a: Volume, b: Volume, threshold: float = DICE_THRESHOLD) -> float:
    """
    Dice overlap of the strict-greater threshold masks. Two empty masks score 1.0.

    Raises:
        InvalidInputError: If the dimensions differ.
    """
    _require_same_dims(a, b)
    mask_a = binarize(a, threshold).data.astype(bool)
    mask_b = binarize(b, threshold).data.astype(bool)
    size = int(mask_a.sum()) + int(mask_b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(mask_a & mask_b)) / size


def gradient_magnitude(v: Volume) -> np.ndarray:
    """Central-difference gradient magnitude, one-sided on the faces."""
    if min(v.dims) < 3:
        raise InvalidInputError(f"Gradient similarity needs every dimension >= 3, got {v.dims}")
    partials = np.gradient(v.data.astype(np.float64))
    return np.sqrt(sum(p * p for p in partials))


def gradient_similarity(a: Volume, b: Volume) -> float:
    """
    Pearson correlation of the two gradient-magnitude maps.

    Raises:
        InvalidInputError: If the dimensions differ or any dimension is below 3.
        UndefinedMetricError: If both magnitude maps are constant.
    """
    _require_same_dims(a, b)
    return _pearson(gradient_magnitude(a), gradient_magnitude(b), "Gradient similarity")


def _defined(name: str, fn: Callable[[], float]) -> Optional[float]:
    try:
        return fn()
    except UndefinedMetricError as e:
        logger.warning("Metric %s undefined, recorded as null: %s", name, e)
        return None


def evaluate_all(warped: Volume, fixed: Volume) -> MetricReport:
    """
    Every metric for one (warped, fixed) pair under default parameters.

    SSIM is the single full-resolution scale mean of :func:`ssim_map`, floored at 0.

    Raises:
        InvalidInputError: If the dimensions differ.
    """
    _require_same_dims(warped, fixed)
    return MetricReport(
        ssim=max(0.0, float(ssim_map(warped, fixed, SsimParams())[0])),
        ncc=_defined("ncc", lambda: ncc(warped, fixed)),
        mi=mutual_information(warped, fixed),
        psnr=psnr(warped, fixed),
        mse=mse(warped, fixed),
        mae=mae(warped, fixed),
        dice=dice(warped, fixed),
        gradient_similarity=_defined("gradient_similarity", lambda: gradient_similarity(warped, fixed)),
    )
