"""
Pairwise registration by joint coarse-to-fine Adam optimization of (u_MF, u_FM).

Both fields start at zero on the coarsest pyramid level and are carried to each finer
level with ``upsample_field2x``. Steps that would raise the objective are taken back, so
each level descends. The update is deterministic for a fixed configuration.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import model_validator
from sqlmodel import Field, SQLModel

from cicreg.errors import InvalidInputError
from cicreg.losses import LossBreakdown, LossWeights, SsimParams, resolve_num_scales, total_loss_grad
from cicreg.volume import Volume, downsample2x
from cicreg.warp import DisplacementField, upsample_field2x, warp_volume

logger = logging.getLogger(__name__)

# Consecutive sub-tolerance iterations that end a level early.
CALM_WINDOW = 5
DEBUG_EVERY = 10
# Step scaling after a rejected and an accepted trial.
STEP_BACKOFF = 0.5
STEP_GROWTH = 1.2


class RegistrationConfig(SQLModel):
    """
    Optimization schedule for one pair.

    ``iters_per_level`` runs coarse to fine. ``step_size`` is the largest step allowed at the
    coarsest level, in voxels of that level, and is halved at each finer one.
    """

    levels: int = Field(default=3, ge=1)
    iters_per_level: list[int] = Field(default_factory=lambda: [100, 100, 50])
    step_size: float = Field(default=0.1, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    rel_tol: float = Field(default=1e-6, ge=0)
    weights: LossWeights = Field(default_factory=LossWeights)
    ssim: SsimParams = Field(default_factory=SsimParams)
    seed: int = Field(default=42, ge=0)

    @model_validator(mode="after")
    def check_schedule(self) -> "RegistrationConfig":
        if len(self.iters_per_level) != self.levels:
            raise ValueError(
                f"iters_per_level has {len(self.iters_per_level)} entries but levels is {self.levels}"
            )
        if any(n <= 0 for n in self.iters_per_level):
            raise ValueError(f"iters_per_level entries must be positive, got {self.iters_per_level}")
        return self

    def level_step(self, stage: int) -> float:
        """Step size for the ``stage``-th level visited (0 = coarsest)."""
        return self.step_size * 0.5**stage


@dataclass(frozen=True)
class TraceEntry:
    """Objective of the accepted fields after one iteration: pyramid level (0 = finest), iteration, breakdown."""

    level: int
    iteration: int
    breakdown: LossBreakdown

    def as_record(self) -> dict[str, Any]:
        return {"level": self.level, "iteration": self.iteration, **self.breakdown.as_record()}


@dataclass
class RegistrationResult:
    """
    Output of :func:`register`.

    ``iterations_run`` and ``converged`` are ordered coarse to fine, like ``iters_per_level``.
    """

    u_MF: DisplacementField
    u_FM: DisplacementField
    warped_MF: Volume
    warped_FM: Volume
    trace: list[TraceEntry] = field(default_factory=list)
    iterations_run: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)

    @property
    def final_breakdown(self) -> Optional[LossBreakdown]:
        return self.trace[-1].breakdown if self.trace else None

    def trace_records(self) -> list[dict[str, Any]]:
        return [entry.as_record() for entry in self.trace]


@dataclass(frozen=True)
class AdamMoments:
    """Biased first and second moment estimates, shaped like the parameters."""

    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    moments: AdamMoments,
    t: int,
    cfg: RegistrationConfig,
    step_size: Optional[float] = None,
) -> tuple[np.ndarray, AdamMoments]:
    """
    One bias-corrected Adam update.

    Args:
        params: Current parameters.
        grads: Gradient of the objective at ``params``.
        moments: Moment estimates from step ``t - 1``.
        t: 1-based step counter.
        cfg: Supplies beta1, beta2 and epsilon.
        step_size: Step for the current level; defaults to ``cfg.step_size``.

    Returns:
        tuple: (new parameters, new moments). Inputs are not modified.

    Raises:
        InvalidInputError: If shapes disagree or t < 1.
    """
    if params.shape != grads.shape or params.shape != moments.m.shape:
        raise InvalidInputError(
            f"Shape mismatch: params {params.shape}, grads {grads.shape}, moments {moments.m.shape}"
        )
    if t < 1:
        raise InvalidInputError(f"Adam step counter must start at 1, got {t}")
    lr = cfg.step_size if step_size is None else step_size
    m = cfg.beta1 * moments.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * moments.v + (1.0 - cfg.beta2) * (grads * grads)
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    update = (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.epsilon)
    return params - update, AdamMoments(m, v)


def max_levels(dims: Sequence[int], min_size: int = 7) -> int:
    """Largest pyramid depth whose coarsest level keeps min(dims) / 2**(levels - 1) >= min_size."""
    smallest = min(dims)
    levels = 0
    while smallest / 2**levels >= min_size:
        levels += 1
    return levels


def build_pyramids(I_M: Volume, I_F: Volume, levels: int, min_size: int = 7) -> list[tuple[Volume, Volume]]:
    """
    Image pairs per pyramid level, level 0 being the originals and level ``levels - 1`` the coarsest.

    Raises:
        InvalidInputError: If the dims differ or cannot support ``levels``.
    """
    if I_M.dims != I_F.dims:
        raise InvalidInputError(f"Moving dims {I_M.dims} differ from fixed dims {I_F.dims}")
    if levels < 1:
        raise InvalidInputError(f"levels must be at least 1, got {levels}")
    feasible = max_levels(I_M.dims, min_size)
    if levels > feasible:
        raise InvalidInputError(
            f"Dims {I_M.dims} support at most {feasible} pyramid level(s) "
            f"(coarsest side must stay >= {min_size}), {levels} requested"
        )
    pyramid = [(I_M, I_F)]
    for _ in range(levels - 1):
        moving, fixed = pyramid[-1]
        pyramid.append((downsample2x(moving), downsample2x(fixed)))
    return pyramid


def _relative_change(previous: float, current: float) -> float:
    return abs(previous - current) / max(current, 1e-12)


def _evaluate(
    moving: Volume, fixed: Volume, params: np.ndarray, cfg: RegistrationConfig
) -> tuple[LossBreakdown, np.ndarray]:
    u_mf = DisplacementField(params[0], fixed.spacing)
    u_fm = DisplacementField(params[1], moving.spacing)
    breakdown, g_mf, g_fm = total_loss_grad(moving, fixed, u_mf, u_fm, cfg.weights, cfg.ssim)
    return breakdown, np.stack([g_mf.data, g_fm.data])


def register(I_M: Volume, I_F: Volume, cfg: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """
    Jointly estimate u_MF (pulls I_M onto the fixed grid) and u_FM (pulls I_F onto the moving grid).

    Every iteration tries one Adam step from the current fields. A trial whose total exceeds
    the current total is discarded: the step shrinks by ``STEP_BACKOFF`` and the moments
    restart. Accepted trials grow the step by ``STEP_GROWTH`` up to the level's step size.
    The trace therefore holds the objective of the accepted fields after each iteration and
    never rises within a level; the returned fields are the ones the last entry describes.

    Raises:
        InvalidInputError: If the dims differ, the pyramid is infeasible for ``cfg.levels``
            or the coarsest level cannot hold the requested MS-SSIM scales.
    """
    cfg = cfg or RegistrationConfig()
    min_size = 2 * cfg.ssim.window_radius + 1
    pyramid = build_pyramids(I_M, I_F, cfg.levels, min_size)
    resolve_num_scales(pyramid[-1][0].dims, cfg.ssim)

    trace: list[TraceEntry] = []
    iterations_run: list[int] = []
    converged: list[bool] = []
    params: Optional[np.ndarray] = None

    for stage, level in enumerate(reversed(range(cfg.levels))):
        moving, fixed = pyramid[level]
        if params is None:
            params = np.zeros((2, 3, *fixed.dims))
        else:
            params = np.stack([upsample_field2x(DisplacementField(p), fixed.dims).data for p in params])
        moments = AdamMoments.zeros_like(params)
        t = 0
        ceiling = cfg.level_step(stage)
        lr = ceiling
        breakdown, grads = _evaluate(moving, fixed, params, cfg)
        trace.append(TraceEntry(level, 0, breakdown))
        calm = 0
        rejected = 0
        done = False
        count = 1

        for iteration in range(1, cfg.iters_per_level[stage]):
            trial, trial_moments = adam_step(params, grads, moments, t + 1, cfg, lr)
            trial_breakdown, trial_grads = _evaluate(moving, fixed, trial, cfg)
            if trial_breakdown.total <= breakdown.total:
                change = _relative_change(breakdown.total, trial_breakdown.total)
                params, moments, t = trial, trial_moments, t + 1
                breakdown, grads = trial_breakdown, trial_grads
                lr = min(lr * STEP_GROWTH, ceiling)
            else:
                change = 0.0
                moments, t = AdamMoments.zeros_like(params), 0
                lr *= STEP_BACKOFF
                rejected += 1
            trace.append(TraceEntry(level, iteration, breakdown))
            count = iteration + 1
            if iteration % DEBUG_EVERY == 0:
                logger.debug(
                    "level %d iteration %d total=%.6g similarity=%.6g jacobian=%.6g step=%.3g",
                    level,
                    iteration,
                    breakdown.total,
                    breakdown.similarity,
                    breakdown.jacobian_penalty,
                    lr,
                )
            calm = calm + 1 if change < cfg.rel_tol else 0
            if calm >= CALM_WINDOW:
                done = True
                break

        iterations_run.append(count)
        converged.append(done)
        logger.info(
            "Level %d dims=%s: %d iteration(s), %d step(s) rejected, total=%.6g, converged=%s",
            level,
            fixed.dims,
            count,
            rejected,
            breakdown.total,
            done,
        )

    u_MF = DisplacementField(params[0], I_F.spacing)
    u_FM = DisplacementField(params[1], I_M.spacing)
    return RegistrationResult(
        u_MF=u_MF,
        u_FM=u_FM,
        warped_MF=warp_volume(I_M, u_MF),
        warped_FM=warp_volume(I_F, u_FM),
        trace=trace,
        iterations_run=iterations_run,
        converged=converged,
    )
