"""
Displacement fields and the spatial-transformer warp.

Fields use the pull-back convention: a field lives on the target grid, holds voxel-unit
displacements u, and the mapping is phi(x) = x + u(x). Warping samples the source at
phi(x) with trilinear interpolation and replicate (clamped) borders.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from cicreg.errors import InvalidInputError
from cicreg.volume import (
    Dims,
    PathLike,
    Volume,
    _as_dims,
    _as_spacing,
    downsample_array,
    read_channels,
    write_channels,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """
    Three-channel voxel-unit displacement field.

    Attributes:
        data (np.ndarray): float64 array of shape (3, nx, ny, nz) holding (ux, uy, uz), read-only.
        spacing (tuple): Voxel size in mm of the grid the field is defined on.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float64, copy=True)
        if array.ndim != 4 or array.shape[0] != 3:
            raise InvalidInputError(f"Field data must have shape (3, nx, ny, nz), got {array.shape}")
        _as_dims(array.shape[1:])
        if not np.all(np.isfinite(array)):
            raise InvalidInputError("Field contains NaN or infinite components")
        array.flags.writeable = False
        object.__setattr__(self, "data", array)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape[1:])  # type: ignore[return-value]


# --- Trilinear stencil ---


@dataclass(frozen=True)
class Stencil:
    """Trilinear cell corners and weights for a batch of sample points on a grid of ``dims``."""

    dims: Dims
    lo: tuple[np.ndarray, np.ndarray, np.ndarray]
    hi: tuple[np.ndarray, np.ndarray, np.ndarray]
    frac: tuple[np.ndarray, np.ndarray, np.ndarray]
    inside: tuple[np.ndarray, np.ndarray, np.ndarray]


def make_stencil(dims: Sequence[int], coords: Sequence[np.ndarray]) -> Stencil:
    lo, hi, frac, inside = [], [], [], []
    for n, c in zip(dims, coords):
        c = np.asarray(c, dtype=np.float64)
        clamped = np.clip(c, 0.0, n - 1.0)
        i0 = np.clip(np.floor(clamped), 0, max(n - 2, 0)).astype(np.intp)
        lo.append(i0)
        hi.append(np.minimum(i0 + 1, n - 1))
        frac.append(clamped - i0)
        inside.append((c >= 0.0) & (c <= n - 1.0))
    return Stencil(tuple(int(d) for d in dims), tuple(lo), tuple(hi), tuple(frac), tuple(inside))


def _corners(st: Stencil):
    """Yield (ix, iy, iz, weight) for the eight cell corners in fixed order."""
    (x0, y0, z0), (x1, y1, z1) = st.lo, st.hi
    fx, fy, fz = st.frac
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    yield x0, y0, z0, gx * gy * gz
    yield x1, y0, z0, fx * gy * gz
    yield x0, y1, z0, gx * fy * gz
    yield x1, y1, z0, fx * fy * gz
    yield x0, y0, z1, gx * gy * fz
    yield x1, y0, z1, fx * gy * fz
    yield x0, y1, z1, gx * fy * fz
    yield x1, y1, z1, fx * fy * fz


def interpolate(array: np.ndarray, st: Stencil) -> np.ndarray:
    """Trilinear samples of ``array`` at the stencil points."""
    out = None
    for ix, iy, iz, w in _corners(st):
        term = array[ix, iy, iz] * w
        out = term if out is None else out + term
    return out


def interpolate_gradient(array: np.ndarray, st: Stencil) -> np.ndarray:
    """Analytic derivative of the trilinear interpolant along x, y, z; zero along clamped axes."""
    (x0, y0, z0), (x1, y1, z1) = st.lo, st.hi
    fx, fy, fz = st.frac
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    a = array
    v000, v100, v010, v110 = a[x0, y0, z0], a[x1, y0, z0], a[x0, y1, z0], a[x1, y1, z0]
    v001, v101, v011, v111 = a[x0, y0, z1], a[x1, y0, z1], a[x0, y1, z1], a[x1, y1, z1]
    dx = gy * gz * (v100 - v000) + fy * gz * (v110 - v010) + gy * fz * (v101 - v001) + fy * fz * (v111 - v011)
    dy = gx * gz * (v010 - v000) + fx * gz * (v110 - v100) + gx * fz * (v011 - v001) + fx * fz * (v111 - v101)
    dz = gx * gy * (v001 - v000) + fx * gy * (v101 - v100) + gx * fy * (v011 - v010) + fx * fy * (v111 - v110)
    ins_x, ins_y, ins_z = st.inside
    return np.stack([dx * ins_x, dy * ins_y, dz * ins_z])


def splat(values: np.ndarray, st: Stencil) -> np.ndarray:
    """Transpose of :func:`interpolate`: scatter ``values`` onto the grid with the trilinear weights."""
    nx, ny, nz = st.dims
    out = np.zeros(nx * ny * nz, dtype=np.float64)
    for ix, iy, iz, w in _corners(st):
        flat = ((ix * ny + iy) * nz + iz).ravel()
        out += np.bincount(flat, weights=(values * w).ravel(), minlength=nx * ny * nz)
    return out.reshape(st.dims)


def _grid(dims: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(np.indices(tuple(dims), dtype=np.float64))  # type: ignore[return-value]


def pullback_stencil(source_dims: Sequence[int], u: np.ndarray) -> Stencil:
    gx, gy, gz = _grid(u.shape[1:])
    return make_stencil(source_dims, (gx + u[0], gy + u[1], gz + u[2]))


def warp_array(moving: np.ndarray, u: np.ndarray) -> np.ndarray:
    """float64 pull-back warp of a raw (nx, ny, nz) array by a raw (3, ...) field."""
    return interpolate(np.asarray(moving, dtype=np.float64), pullback_stencil(moving.shape, u))


def warp_array_with_gradient(moving: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, Stencil]:
    """Warped array, its derivative w.r.t. u, and the sampling stencil (for adjoints)."""
    source = np.asarray(moving, dtype=np.float64)
    st = pullback_stencil(source.shape, u)
    return interpolate(source, st), interpolate_gradient(source, st), st


# --- Public operations ---


def identity_field(dims: Sequence[int], spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
    """The all-zero field, i.e. phi = Id."""
    return DisplacementField(np.zeros((3, *_as_dims(dims))), spacing)


def sample_trilinear(v: Volume, x: Sequence[float]) -> float:
    """Trilinear value of ``v`` at a continuous coordinate, clamping each axis to [0, dim - 1]."""
    coords = [np.asarray([float(c)]) for c in x]
    if len(coords) != 3:
        raise InvalidInputError(f"Expected a coordinate triple, got {tuple(x)}")
    return float(interpolate(v.data.astype(np.float64), make_stencil(v.dims, coords))[0])


def warp_volume(moving: Volume, u: DisplacementField) -> Volume:
    """
    Pull-back warp: output(x) = moving(x + u(x)) on the field's grid.

    The identity field reproduces ``moving`` bit-exactly.
    """
    return Volume(warp_array(moving.data, u.data), u.spacing)


def warp_gradient(moving: Volume, u: DisplacementField) -> np.ndarray:
    """
    Derivative of the warped intensity at each voxel with respect to u at that voxel.

    Returns:
        np.ndarray: (3, nx, ny, nz) spatial gradient of the trilinear interpolant of ``moving``
        evaluated at x + u(x); zero along any axis whose coordinate was clamped.
    """
    return warp_array_with_gradient(moving.data, u.data)[1]


def _require_same_dims(a: DisplacementField, b: DisplacementField) -> None:
    if a.dims != b.dims:
        raise InvalidInputError(f"Field dimensions differ: {a.dims} vs {b.dims}")


def compose_arrays(u_outer: np.ndarray, u_inner: np.ndarray) -> np.ndarray:
    """Raw composition: u_inner(x) + u_outer(x + u_inner(x))."""
    st = pullback_stencil(u_outer.shape[1:], u_inner)
    return np.stack([u_inner[c] + interpolate(u_outer[c], st) for c in range(3)])


def compose(u_outer: DisplacementField, u_inner: DisplacementField) -> DisplacementField:
    """
    Field of phi_outer o phi_inner, so that warping by the result equals warping by u_outer then u_inner.

    Raises:
        InvalidInputError: If the dimensions differ.
    """
    _require_same_dims(u_outer, u_inner)
    return DisplacementField(compose_arrays(u_outer.data, u_inner.data), u_inner.spacing)


def upsample_field2x(u: DisplacementField, target_dims: Sequence[int]) -> DisplacementField:
    """
    Resample a coarse field onto the next finer pyramid grid, doubling the displacements.

    Fine voxel i corresponds to coarse coordinate i / 2.

    Raises:
        InvalidInputError: If a target dimension is not 2*dim - 1 or 2*dim.
    """
    target = _as_dims(target_dims)
    for n, t in zip(u.dims, target):
        if t not in (2 * n - 1, 2 * n):
            raise InvalidInputError(f"Cannot upsample dims {u.dims} to {target}: each must be 2*dim-1 or 2*dim")
    gx, gy, gz = _grid(target)
    st = make_stencil(u.dims, (gx / 2.0, gy / 2.0, gz / 2.0))
    spacing = tuple(s / 2.0 for s in u.spacing)
    return DisplacementField(np.stack([2.0 * interpolate(u.data[c], st) for c in range(3)]), spacing)


def downsample_field2x(u: DisplacementField) -> DisplacementField:
    """
    Move a field to the next coarser pyramid grid, halving the displacements.

    Raises:
        InvalidInputError: If any dimension is below 2.
    """
    if min(u.dims) < 2:
        raise InvalidInputError(f"Cannot downsample dims {u.dims}: every dimension must be at least 2")
    spacing = tuple(2.0 * s for s in u.spacing)
    return DisplacementField(np.stack([0.5 * downsample_array(u.data[c]) for c in range(3)]), spacing)


def field_magnitude(u: DisplacementField, spacing: Optional[Sequence[float]] = None) -> Volume:
    """
    Per-voxel displacement length.

    In voxels by default; with ``spacing`` each component is scaled to mm first.
    """
    data = u.data
    if spacing is not None:
        scale = np.asarray(_as_spacing(spacing), dtype=np.float64).reshape(3, 1, 1, 1)
        data = data * scale
    return Volume(np.sqrt(np.sum(data * data, axis=0)), u.spacing)


# --- Field I/O ---


def load_field(path: PathLike) -> DisplacementField:
    """
    Load a 3-channel field from MVOL or a 5-D NIfTI vector image.

    Raises:
        FormatError: If the file is malformed.
        InvalidInputError: If the file does not hold exactly 3 channels.
    """
    channels, spacing, _ = read_channels(path)
    if channels.shape[0] != 3:
        raise InvalidInputError(f"{path!s} holds {channels.shape[0]} channel(s); a displacement field needs 3")
    logger.debug("Loaded field %s dims=%s spacing=%s", path, channels.shape[1:], spacing)
    return DisplacementField(channels, spacing)


def save_field(u: DisplacementField, path: PathLike) -> None:
    """Save a field as 3-channel MVOL or NIfTI vector image (float32 on disk)."""
    write_channels(path, u.data, u.spacing)
