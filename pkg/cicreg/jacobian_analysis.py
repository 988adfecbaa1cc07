"""
Deformation-regularity audit: Jacobian determinants, log-Jacobian maps and folding statistics.

The Jacobian of phi(x) = x + u(x) is J = I + grad(u), with grad(u) taken by central
differences in the interior and one-sided differences on the faces (``numpy.gradient``
with unit spacing). The loss module's Jacobian penalty uses this same stencil.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Optional

import numpy as np

from cicreg.errors import InvalidInputError
from cicreg.volume import Volume
from cicreg.warp import DisplacementField, field_magnitude

logger = logging.getLogger(__name__)

LOG_JD_FLOOR = 1e-6


def _require_stencil_dims(dims) -> None:
    if min(dims) < 3:
        raise InvalidInputError(f"Jacobian analysis needs every dimension >= 3, got {tuple(dims)}")


def jacobian_matrix(u: np.ndarray) -> np.ndarray:
    """
    Per-voxel Jacobian of x + u(x) for a raw (3, nx, ny, nz) field.

    Returns:
        np.ndarray: (3, 3, nx, ny, nz) array with J[c, d] = delta_cd + d u_c / d x_d.
    """
    _require_stencil_dims(u.shape[1:])
    jac = np.empty((3, 3) + u.shape[1:], dtype=np.float64)
    for c in range(3):
        for d, partial in enumerate(np.gradient(u[c])):
            jac[c, d] = partial + (1.0 if c == d else 0.0)
    return jac


def determinant(jac: np.ndarray) -> np.ndarray:
    """Cofactor expansion of the per-voxel 3x3 determinant along the first row."""
    return (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )


def cofactors(jac: np.ndarray) -> np.ndarray:
    """d det / d J[c, d] for every entry, i.e. adj(J) transposed."""
    cof = np.empty_like(jac)
    cof[0, 0] = jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1]
    cof[0, 1] = -(jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
    cof[0, 2] = jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0]
    cof[1, 0] = -(jac[0, 1] * jac[2, 2] - jac[0, 2] * jac[2, 1])
    cof[1, 1] = jac[0, 0] * jac[2, 2] - jac[0, 2] * jac[2, 0]
    cof[1, 2] = -(jac[0, 0] * jac[2, 1] - jac[0, 1] * jac[2, 0])
    cof[2, 0] = jac[0, 1] * jac[1, 2] - jac[0, 2] * jac[1, 1]
    cof[2, 1] = -(jac[0, 0] * jac[1, 2] - jac[0, 2] * jac[1, 0])
    cof[2, 2] = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    return cof


def gradient_adjoint(grad: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of ``numpy.gradient`` (unit spacing, first-order edges) along one axis."""
    g = np.moveaxis(np.asarray(grad, dtype=np.float64), axis, 0)
    out = np.zeros_like(g)
    # interior rows use (f[i+1] - f[i-1]) / 2
    out[2:] += 0.5 * g[1:-1]
    out[:-2] -= 0.5 * g[1:-1]
    # first and last rows use one-sided differences
    out[1] += g[0]
    out[0] -= g[0]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return np.moveaxis(out, 0, axis)


def determinant_array(u: np.ndarray) -> np.ndarray:
    return determinant(jacobian_matrix(u))


def jacobian_determinant_field(u: DisplacementField) -> Volume:
    """
    Per-voxel det(I + grad u).

    Raises:
        InvalidInputError: If any dimension is below 3.
    """
    return Volume(determinant_array(u.data), u.spacing)


def _log_jd(det: np.ndarray, floor: float) -> np.ndarray:
    return np.log(np.maximum(det, floor))


def log_jd_map(u: DisplacementField, floor: float = LOG_JD_FLOOR) -> Volume:
    """ln(max(det, floor)); non-positive determinants sit on the ln(floor) plateau."""
    return Volume(_log_jd(determinant_array(u.data), floor), u.spacing)


@dataclass(frozen=True)
class JacobianReport:
    """Regularity statistics of one displacement field."""

    pct_nonpositive: float
    min_det: float
    max_det: float
    mean_log_jd: Optional[float]
    std_log_jd: Optional[float]
    mean_magnitude: float
    max_magnitude: float

    def as_record(self) -> dict[str, Any]:
        return asdict(self)


JACOBIAN_FIELDS = tuple(JacobianReport.__dataclass_fields__)


def jacobian_report(u: DisplacementField) -> JacobianReport:
    """
    Folding and regularity statistics over the full grid, faces included.

    Log statistics cover only det > 0 voxels and are None when there are none.
    """
    det = determinant_array(u.data)
    nonpositive = int(np.count_nonzero(det <= 0.0))
    positive = det[det > 0.0]
    if positive.size:
        logs = np.log(positive)
        mean_log, std_log = float(logs.mean()), float(logs.std())
    else:
        logger.warning("No voxel has a positive Jacobian determinant; log statistics are undefined")
        mean_log, std_log = None, None
    magnitude = field_magnitude(u).data.astype(np.float64)
    return JacobianReport(
        pct_nonpositive=100.0 * nonpositive / det.size,
        min_det=float(det.min()),
        max_det=float(det.max()),
        mean_log_jd=mean_log,
        std_log_jd=std_log,
        mean_magnitude=float(magnitude.mean()),
        max_magnitude=float(magnitude.max()),
    )
