"""
Value-and-gradient implementations of the registration objective.

Every term is differentiated analytically with respect to the displacement fields.
Terms are means over the full voxel grid and are accumulated in float64.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import model_validator
from sqlmodel import Field, SQLModel

from cicreg.errors import InvalidInputError
from cicreg.jacobian_analysis import cofactors, determinant, gradient_adjoint, jacobian_matrix
from cicreg.volume import (
    Volume,
    downsample_array,
    downsample_array_adjoint,
    gaussian_kernel,
    smooth_array,
    smooth_array_adjoint,
)
from cicreg.warp import (
    DisplacementField,
    compose,
    interpolate,
    interpolate_gradient,
    pullback_stencil,
    splat,
    warp_array_with_gradient,
)

# Standard five-scale MS-SSIM exponents, finest first.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MAX_ADAPTIVE_SCALES = 3


class LossWeights(SQLModel):
    """
    Coefficients of the composite objective and per-term toggles.

    A disabled term contributes exactly 0 to the breakdown and the gradients.
    """

    lambda_smooth: float = Field(default=0.5, ge=0)
    lambda_img_cyc: float = Field(default=10.0, ge=0)
    lambda_flow_cyc: float = Field(default=1.0, ge=0)
    lambda_jac: float = Field(default=1000.0, ge=0)
    use_similarity: bool = True
    use_smoothness: bool = True
    use_image_cycle: bool = True
    use_flow_cycle: bool = True
    use_jacobian: bool = True


class SsimParams(SQLModel):
    """Gaussian-window SSIM settings for intensities with dynamic range 1."""

    window_sigma: float = Field(default=1.5, gt=0)
    window_radius: int = Field(default=3, ge=1)
    c1: float = Field(default=1e-4, gt=0)
    c2: float = Field(default=9e-4, gt=0)
    num_scales: Optional[int] = Field(default=None, ge=1, le=len(MS_SSIM_WEIGHTS))
    scale_weights: Optional[list[float]] = None

    @model_validator(mode="after")
    def check_scale_weights(self) -> "SsimParams":
        if self.scale_weights is None:
            return self
        if any(w <= 0 for w in self.scale_weights):
            raise ValueError("scale_weights must all be positive")
        if not math.isclose(sum(self.scale_weights), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"scale_weights must sum to 1, got {sum(self.scale_weights)}")
        if self.num_scales is not None and len(self.scale_weights) != self.num_scales:
            raise ValueError(f"scale_weights has {len(self.scale_weights)} entries for {self.num_scales} scales")
        return self

    def window(self) -> np.ndarray:
        return gaussian_kernel(self.window_sigma, self.window_radius)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values of one objective evaluation; ``total`` is the weighted sum."""

    similarity: float
    smoothness: float
    image_cycle: float
    flow_cycle: float
    jacobian_penalty: float
    total: float

    @classmethod
    def combine(
        cls,
        weights: LossWeights,
        similarity: float,
        smoothness: float,
        image_cycle: float,
        flow_cycle: float,
        jacobian_penalty: float,
    ) -> "LossBreakdown":
        total = (
            similarity
            + weights.lambda_smooth * smoothness
            + weights.lambda_img_cyc * image_cycle
            + weights.lambda_flow_cyc * flow_cycle
            + weights.lambda_jac * jacobian_penalty
        )
        return cls(similarity, smoothness, image_cycle, flow_cycle, jacobian_penalty, total)

    def as_record(self) -> dict[str, Any]:
        return asdict(self)


# --- Structural similarity ---


def feasible_scales(dims: Sequence[int], p: SsimParams) -> int:
    """Largest scale count whose coarsest level still holds one full SSIM window."""
    window = 2 * p.window_radius + 1
    smallest = min(dims)
    count = 0
    while count < len(MS_SSIM_WEIGHTS) and smallest / 2**count >= window:
        count += 1
    return count


def resolve_num_scales(dims: Sequence[int], p: SsimParams) -> int:
    """
    Scale count for an MS-SSIM evaluation on ``dims``: the requested count, or min(3, feasible).

    Raises:
        InvalidInputError: If the volume cannot support the requested (or any) scale.
    """
    feasible = feasible_scales(dims, p)
    if p.num_scales is None:
        if feasible == 0:
            raise InvalidInputError(
                f"Volume dims {tuple(dims)} are smaller than one {2 * p.window_radius + 1}-voxel SSIM window"
            )
        return min(MAX_ADAPTIVE_SCALES, feasible)
    if p.num_scales > feasible:
        raise InvalidInputError(
            f"Volume dims {tuple(dims)} support at most {feasible} MS-SSIM scale(s), {p.num_scales} requested"
        )
    return p.num_scales


def scale_weights(scales: int, p: SsimParams) -> list[float]:
    """Exponents for ``scales`` levels: explicit weights, or the standard ones truncated and renormalized."""
    if p.scale_weights is not None:
        if len(p.scale_weights) != scales:
            raise InvalidInputError(f"scale_weights has {len(p.scale_weights)} entries for {scales} scales")
        return list(p.scale_weights)
    head = MS_SSIM_WEIGHTS[:scales]
    total = sum(head)
    return [w / total for w in head]


@dataclass
class _SsimStats:
    mu_a: np.ndarray
    mu_b: np.ndarray
    a1: np.ndarray
    b1: np.ndarray
    a2: np.ndarray
    b2: np.ndarray


def _ssim_stats(a: np.ndarray, b: np.ndarray, p: SsimParams) -> _SsimStats:
    window = p.window()
    mu_a = smooth_array(a, window)
    mu_b = smooth_array(b, window)
    var_a = smooth_array(a * a, window) - mu_a * mu_a
    var_b = smooth_array(b * b, window) - mu_b * mu_b
    cov = smooth_array(a * b, window) - mu_a * mu_b
    return _SsimStats(
        mu_a=mu_a,
        mu_b=mu_b,
        a1=2.0 * mu_a * mu_b + p.c1,
        b1=mu_a * mu_a + mu_b * mu_b + p.c1,
        a2=2.0 * cov + p.c2,
        b2=var_a + var_b + p.c2,
    )


def _ssim_component(
    a: np.ndarray, b: np.ndarray, p: SsimParams, full: bool, need_grad: bool
) -> tuple[float, Optional[np.ndarray], np.ndarray]:
    """
    Mean of the SSIM map (``full``) or of the contrast-structure map, and its gradient w.r.t. ``a``.

    The gradient routes d(map)/d(local statistic) back through the transposed window filter.
    """
    s = _ssim_stats(a, b, p)
    lum = s.a1 / s.b1
    cs = s.a2 / s.b2
    values = lum * cs if full else cs
    mean = float(values.mean())
    if not need_grad:
        return mean, None, values

    if full:
        d_mu_a = ((2.0 * s.mu_b - 2.0 * s.mu_a * lum) / s.b1) * cs + lum * ((-2.0 * s.mu_b + 2.0 * s.mu_a * cs) / s.b2)
        d_s_aa = -values / s.b2
        d_s_ab = 2.0 * lum / s.b2
    else:
        d_mu_a = (-2.0 * s.mu_b + 2.0 * s.mu_a * cs) / s.b2
        d_s_aa = -cs / s.b2
        d_s_ab = 2.0 / s.b2
    window = p.window()
    grad = (
        smooth_array_adjoint(d_mu_a, window)
        + 2.0 * a * smooth_array_adjoint(d_s_aa, window)
        + b * smooth_array_adjoint(d_s_ab, window)
    ) / a.size
    return mean, grad, values


def ms_ssim_value_grad(
    a: np.ndarray, b: np.ndarray, p: SsimParams, need_grad: bool = True
) -> tuple[float, Optional[np.ndarray]]:
    """MS-SSIM of raw arrays and its gradient w.r.t. ``a`` (None when ``need_grad`` is false)."""
    scales = resolve_num_scales(a.shape, p)
    exponents = scale_weights(scales, p)
    pyramid_a, pyramid_b = [np.asarray(a, dtype=np.float64)], [np.asarray(b, dtype=np.float64)]
    for _ in range(scales - 1):
        pyramid_a.append(downsample_array(pyramid_a[-1]))
        pyramid_b.append(downsample_array(pyramid_b[-1]))

    components, grads = [], []
    for level in range(scales):
        mean, grad, _ = _ssim_component(pyramid_a[level], pyramid_b[level], p, level == scales - 1, need_grad)
        components.append(mean)
        grads.append(grad)

    value = 1.0
    for mean, exponent in zip(components, exponents):
        value *= max(mean, 0.0) ** exponent
    if not need_grad:
        return value, None
    if value == 0.0:
        return value, np.zeros_like(pyramid_a[0])

    back = None
    for level in reversed(range(scales)):
        term = (exponents[level] * value / components[level]) * grads[level]
        back = term if back is None else term + downsample_array_adjoint(back, pyramid_a[level].shape)
    return value, back


def _require_same_volume_dims(a: Volume, b: Volume) -> None:
    if a.dims != b.dims:
        raise InvalidInputError(f"Volume dimensions differ: {a.dims} vs {b.dims}")


def ssim_map(a: Volume, b: Volume, p: Optional[SsimParams] = None) -> tuple[float, Volume]:
    """
    Single-scale SSIM with Gaussian-window local statistics.

    Returns:
        tuple: (mean SSIM, per-voxel SSIM map).

    Raises:
        InvalidInputError: If the dimensions differ.
    """
    p = p or SsimParams()
    _require_same_volume_dims(a, b)
    mean, _, values = _ssim_component(a.data.astype(np.float64), b.data.astype(np.float64), p, True, False)
    return mean, a.with_data(values)


def ms_ssim(a: Volume, b: Volume, p: Optional[SsimParams] = None) -> float:
    """
    Multi-scale SSIM, floored at 0 per component.

    Raises:
        InvalidInputError: If the dimensions differ or the volume is too small for the scale count.
    """
    p = p or SsimParams()
    _require_same_volume_dims(a, b)
    value, _ = ms_ssim_value_grad(a.data.astype(np.float64), b.data.astype(np.float64), p, need_grad=False)
    return value


def similarity_loss_grad(
    fixed: Volume, moving: Volume, u: DisplacementField, p: Optional[SsimParams] = None
) -> tuple[float, DisplacementField]:
    """
    1 - MS-SSIM(moving warped by u, fixed) and its gradient w.r.t. u.

    Raises:
        InvalidInputError: If the fixed grid and the field grid differ, or the grid is too small.
    """
    p = p or SsimParams()
    if fixed.dims != u.dims:
        raise InvalidInputError(f"Fixed image dims {fixed.dims} differ from field dims {u.dims}")
    warped, d_warped, _ = warp_array_with_gradient(moving.data, u.data)
    value, grad_image = ms_ssim_value_grad(warped, fixed.data.astype(np.float64), p)
    return 1.0 - value, DisplacementField(-grad_image * d_warped, u.spacing)


# --- Regularizers ---


def smoothness_loss_grad(u: DisplacementField) -> tuple[float, DisplacementField]:
    """
    Mean squared forward difference of every component along every axis (Neumann boundary).

    Raises:
        InvalidInputError: If any dimension is below 2.
    """
    if min(u.dims) < 2:
        raise InvalidInputError(f"Smoothness needs every dimension >= 2, got {u.dims}")
    n = u.data[0].size
    total = 0.0
    grad = np.zeros_like(u.data)
    for c in range(3):
        for axis in range(3):
            diff = np.diff(u.data[c], axis=axis)
            total += float(np.sum(diff * diff))
            g = np.moveaxis(grad[c], axis, 0)
            d = np.moveaxis(diff, axis, 0)
            g[:-1] -= 2.0 * d
            g[1:] += 2.0 * d
    return total / n, DisplacementField(grad / n, u.spacing)


def _require_cycle_dims(*items) -> None:
    dims = {item.dims for item in items}
    if len(dims) != 1:
        raise InvalidInputError(f"Images and fields must share one grid, got dims {sorted(dims)}")


def _image_cycle_half(image: np.ndarray, u_first: np.ndarray, u_second: np.ndarray):
    """0.5 * MSE(image warped by u_first then u_second, image) and gradients w.r.t. both fields."""
    intermediate, d_intermediate, _ = warp_array_with_gradient(image, u_first)
    outer = pullback_stencil(intermediate.shape, u_second)
    reconstructed = interpolate(intermediate, outer)
    residual = reconstructed - image
    loss = 0.5 * float(np.mean(residual * residual))
    err = residual / image.size
    grad_second = err * interpolate_gradient(intermediate, outer)
    grad_first = splat(err, outer) * d_intermediate
    return loss, grad_first, grad_second


def image_cycle_loss_grad(
    I_M: Volume, I_F: Volume, u_MF: DisplacementField, u_FM: DisplacementField
) -> tuple[float, DisplacementField, DisplacementField]:
    """
    Image-level inverse consistency: reconstruct each image through both warps and compare by MSE.

    loss = 0.5 * MSE(I_M -> u_MF -> u_FM, I_M) + 0.5 * MSE(I_F -> u_FM -> u_MF, I_F)

    Raises:
        InvalidInputError: If the images and fields do not share one grid.
    """
    _require_cycle_dims(I_M, I_F, u_MF, u_FM)
    image_m = I_M.data.astype(np.float64)
    image_f = I_F.data.astype(np.float64)
    loss_m, g_mf_m, g_fm_m = _image_cycle_half(image_m, u_MF.data, u_FM.data)
    loss_f, g_fm_f, g_mf_f = _image_cycle_half(image_f, u_FM.data, u_MF.data)
    return (
        loss_m + loss_f,
        DisplacementField(g_mf_m + g_mf_f, u_MF.spacing),
        DisplacementField(g_fm_m + g_fm_f, u_FM.spacing),
    )


def _flow_cycle_half(u_outer: np.ndarray, u_inner: np.ndarray):
    """0.5 * mean ||u_inner(x) + u_outer(x + u_inner(x))||^2 and gradients w.r.t. (u_outer, u_inner)."""
    st = pullback_stencil(u_outer.shape[1:], u_inner)
    residual = np.stack([u_inner[c] + interpolate(u_outer[c], st) for c in range(3)])
    n = residual[0].size
    loss = 0.5 * float(np.sum(residual * residual)) / n
    err = residual / n
    grad_inner = err.copy()
    for c in range(3):
        grad_inner += err[c] * interpolate_gradient(u_outer[c], st)
    grad_outer = np.stack([splat(err[c], st) for c in range(3)])
    return loss, grad_outer, grad_inner


def flow_cycle_loss_grad(
    u_MF: DisplacementField, u_FM: DisplacementField
) -> tuple[float, DisplacementField, DisplacementField]:
    """
    Flow-level inverse consistency on both grids.

    r_M(x) = u_FM(x) + u_MF(x + u_FM(x)),  r_F(x) = u_MF(x) + u_FM(x + u_MF(x)),
    loss = 0.5 * mean ||r_M||^2 + 0.5 * mean ||r_F||^2.

    Raises:
        InvalidInputError: If the field dimensions differ.
    """
    _require_cycle_dims(u_MF, u_FM)
    loss_m, g_mf_m, g_fm_m = _flow_cycle_half(u_MF.data, u_FM.data)
    loss_f, g_fm_f, g_mf_f = _flow_cycle_half(u_FM.data, u_MF.data)
    return (
        loss_m + loss_f,
        DisplacementField(g_mf_m + g_mf_f, u_MF.spacing),
        DisplacementField(g_fm_m + g_fm_f, u_FM.spacing),
    )


def cycle_residuals(u_MF: DisplacementField, u_FM: DisplacementField) -> tuple[DisplacementField, DisplacementField]:
    """The flow-cycle residual fields (r_M on the moving grid, r_F on the fixed grid)."""
    _require_cycle_dims(u_MF, u_FM)
    return compose(u_MF, u_FM), compose(u_FM, u_MF)


def mean_residual_norm(residual: DisplacementField) -> float:
    return float(np.mean(np.sqrt(np.sum(residual.data * residual.data, axis=0))))


def jacobian_penalty_grad(u: DisplacementField) -> tuple[float, DisplacementField]:
    """
    Hinge on folding: mean of max(0, -det(I + grad u)), with subgradient 0 wherever det >= 0.

    Raises:
        InvalidInputError: If any dimension is below 3.
    """
    jac = jacobian_matrix(u.data)
    det = determinant(jac)
    n = det.size
    loss = float(np.sum(np.maximum(-det, 0.0))) / n
    scale = np.where(det < 0.0, -1.0 / n, 0.0)
    cof = cofactors(jac)
    grad = np.zeros_like(u.data)
    for c in range(3):
        for d in range(3):
            grad[c] += gradient_adjoint(scale * cof[c, d], axis=d)
    return loss, DisplacementField(grad, u.spacing)


# --- Composite objective ---


def total_loss_grad(
    I_M: Volume,
    I_F: Volume,
    u_MF: DisplacementField,
    u_FM: DisplacementField,
    weights: Optional[LossWeights] = None,
    p: Optional[SsimParams] = None,
) -> tuple[LossBreakdown, DisplacementField, DisplacementField]:
    """
    The full bidirectional objective and its gradients.

    similarity, smoothness and Jacobian terms average both directions with weight 1/2;
    the cycle terms already cover both directions. For each field the gradient is

        0.5 * d_sim + lambda_smooth * (0.5 * d_smooth) + lambda_img_cyc * d_img
        + lambda_flow_cyc * d_flow + lambda_jac * (0.5 * d_jac)

    Raises:
        InvalidInputError: If the images and fields do not share one grid.
    """
    weights = weights or LossWeights()
    p = p or SsimParams()
    _require_cycle_dims(I_M, I_F, u_MF, u_FM)
    zeros = np.zeros_like(u_MF.data)

    similarity, sim_mf, sim_fm = 0.0, zeros, zeros
    if weights.use_similarity:
        loss_mf, g_mf = similarity_loss_grad(I_F, I_M, u_MF, p)
        loss_fm, g_fm = similarity_loss_grad(I_M, I_F, u_FM, p)
        similarity = 0.5 * loss_mf + 0.5 * loss_fm
        sim_mf, sim_fm = 0.5 * g_mf.data, 0.5 * g_fm.data

    smoothness, smooth_mf, smooth_fm = 0.0, zeros, zeros
    if weights.use_smoothness:
        loss_mf, g_mf = smoothness_loss_grad(u_MF)
        loss_fm, g_fm = smoothness_loss_grad(u_FM)
        smoothness = 0.5 * loss_mf + 0.5 * loss_fm
        smooth_mf, smooth_fm = 0.5 * g_mf.data, 0.5 * g_fm.data

    image_cycle, img_mf, img_fm = 0.0, zeros, zeros
    if weights.use_image_cycle:
        image_cycle, g_mf, g_fm = image_cycle_loss_grad(I_M, I_F, u_MF, u_FM)
        img_mf, img_fm = g_mf.data, g_fm.data

    flow_cycle, flow_mf, flow_fm = 0.0, zeros, zeros
    if weights.use_flow_cycle:
        flow_cycle, g_mf, g_fm = flow_cycle_loss_grad(u_MF, u_FM)
        flow_mf, flow_fm = g_mf.data, g_fm.data

    jacobian, jac_mf, jac_fm = 0.0, zeros, zeros
    if weights.use_jacobian:
        loss_mf, g_mf = jacobian_penalty_grad(u_MF)
        loss_fm, g_fm = jacobian_penalty_grad(u_FM)
        jacobian = 0.5 * loss_mf + 0.5 * loss_fm
        jac_mf, jac_fm = 0.5 * g_mf.data, 0.5 * g_fm.data

    breakdown = LossBreakdown.combine(weights, similarity, smoothness, image_cycle, flow_cycle, jacobian)
    grads = []
    for sim, smooth, img, flow, jac in (
        (sim_mf, smooth_mf, img_mf, flow_mf, jac_mf),
        (sim_fm, smooth_fm, img_fm, flow_fm, jac_fm),
    ):
        grads.append(
            sim
            + weights.lambda_smooth * smooth
            + weights.lambda_img_cyc * img
            + weights.lambda_flow_cyc * flow
            + weights.lambda_jac * jac
        )
    return breakdown, DisplacementField(grads[0], u_MF.spacing), DisplacementField(grads[1], u_FM.spacing)
