"""
Scalar 3D volumes, preprocessing, and volume file I/O.

Arrays are indexed ``data[x, y, z]``; the flat x-fastest order used by the file formats
(index = x + nx * (y + ny * z)) is Fortran order over that array.
"""

import gzip
import json
import logging
import math
import os
import pathlib
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError
from scipy.ndimage import correlate1d

from cicreg.errors import FormatError, InvalidInputError
from cicreg.records import atomic_write_bytes

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
Dims = tuple[int, int, int]

MVOL_MAGIC = b"MVOL1\x00\x00\x00"
MVOL_DTYPE = "f32le"
NIFTI_DTYPES = (np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32))
NIFTI_VECTOR_INTENT = 1007


def _as_dims(dims: Sequence[int]) -> Dims:
    values = tuple(int(d) for d in dims)
    if len(values) != 3 or any(d <= 0 for d in values):
        raise InvalidInputError(f"Dimensions must be three positive integers, got {tuple(dims)}")
    return values  # type: ignore[return-value]


def _as_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    values = tuple(float(s) for s in spacing)
    if len(values) != 3 or not all(math.isfinite(s) and s > 0 for s in values):
        raise InvalidInputError(f"Spacing must be three positive finite values, got {tuple(spacing)}")
    return values  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume:
    """
    A 3D scalar grid.

    Attributes:
        data (np.ndarray): float32 intensities of shape (nx, ny, nz), read-only.
        spacing (tuple): Voxel size in mm along x, y, z.
        affine (np.ndarray, optional): 4x4 voxel-to-world matrix kept from NIfTI input; carried, never resampled.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float32, copy=True)
        if array.ndim != 3:
            raise InvalidInputError(f"Volume data must be 3-dimensional, got shape {array.shape}")
        _as_dims(array.shape)
        if not np.all(np.isfinite(array)):
            raise InvalidInputError("Volume data contains NaN or infinite values")
        array.flags.writeable = False
        object.__setattr__(self, "data", array)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    @classmethod
    def from_flat(cls, dims: Sequence[int], flat: Sequence[float], spacing=(1.0, 1.0, 1.0)) -> "Volume":
        """Build a volume from x-fastest flat intensities."""
        dims = _as_dims(dims)
        values = np.asarray(flat, dtype=np.float32)
        if values.size != dims[0] * dims[1] * dims[2]:
            raise InvalidInputError(f"Expected {dims[0] * dims[1] * dims[2]} values for dims {dims}, got {values.size}")
        return cls(values.reshape(dims, order="F"), spacing)

    def flat(self) -> np.ndarray:
        """Intensities in x-fastest order."""
        return self.data.ravel(order="F")

    def with_data(self, data: np.ndarray) -> "Volume":
        """A volume on the same geometry holding new intensities."""
        return Volume(data, self.spacing, self.affine)


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary mask; ``data`` is a read-only uint8 array holding only 0 and 1."""

    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, dtype=np.uint8, copy=True)
        if array.ndim != 3:
            raise InvalidInputError(f"Mask data must be 3-dimensional, got shape {array.shape}")
        if np.any(array > 1):
            raise InvalidInputError("Mask values must be 0 or 1")
        array.flags.writeable = False
        object.__setattr__(self, "data", array)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


# --- Separable filtering shared with the warp and loss modules ---


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Sampled 1D Gaussian on [-radius, radius], renormalized to sum to 1."""
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(taps**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


PYRAMID_KERNEL = gaussian_kernel(1.0, 3)


def smooth_array(array: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation along every axis with replicate borders, in float64."""
    out = np.asarray(array, dtype=np.float64)
    for axis in range(out.ndim):
        out = correlate1d(out, kernel, axis=axis, mode="nearest")
    return out


def _correlate1d_adjoint(array: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    moved = np.moveaxis(array, axis, 0)
    n = moved.shape[0]
    padded = np.zeros((n + 2 * radius,) + moved.shape[1:], dtype=np.float64)
    for tap, weight in enumerate(kernel):
        padded[tap : tap + n] += weight * moved
    out = padded[radius : radius + n].copy()
    # replicate padding folds every out-of-range tap back onto the border sample
    out[0] += padded[:radius].sum(axis=0)
    out[-1] += padded[radius + n :].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def smooth_array_adjoint(array: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Transpose of :func:`smooth_array` for the same kernel."""
    out = np.asarray(array, dtype=np.float64)
    for axis in reversed(range(out.ndim)):
        out = _correlate1d_adjoint(out, kernel, axis)
    return out


def downsample_array(array: np.ndarray) -> np.ndarray:
    """Pyramid reduction: smooth with sigma 1 then keep every second sample from index 0."""
    smoothed = smooth_array(array, PYRAMID_KERNEL)
    return smoothed[tuple(slice(None, None, 2) for _ in range(smoothed.ndim))]


def downsample_array_adjoint(grad: np.ndarray, full_shape: Sequence[int]) -> np.ndarray:
    """Transpose of :func:`downsample_array` back onto a grid of ``full_shape``."""
    upsampled = np.zeros(tuple(full_shape), dtype=np.float64)
    upsampled[tuple(slice(None, None, 2) for _ in full_shape)] = grad
    return smooth_array_adjoint(upsampled, PYRAMID_KERNEL)


# --- Preprocessing ---


def minmax_normalize(v: Volume) -> Volume:
    """
    Rescale intensities linearly onto [0, 1].

    A constant volume maps to all zeros.

    Raises:
        InvalidInputError: If the volume has no voxels.
    """
    if v.data.size == 0:
        raise InvalidInputError("Cannot normalize an empty volume")
    data = v.data.astype(np.float64)
    low, high = data.min(), data.max()
    if high == low:
        return v.with_data(np.zeros_like(data))
    return v.with_data((data - low) / (high - low))


def binarize(v: Volume, threshold: float = 0.1) -> MaskVolume:
    """
    Strict-greater threshold mask. Expects intensities normalized to [0, 1] (not enforced).

    The threshold is compared at the stored float32 precision so that voxels stored as
    exactly ``threshold`` stay background.
    """
    return MaskVolume((v.data > np.float32(threshold)).astype(np.uint8))


def crop_or_pad(v: Volume, target_dims: Sequence[int], fill: float = 0.0) -> Volume:
    """Center the volume in a grid of ``target_dims``; uneven excess goes to the high side."""
    target = _as_dims(target_dims)
    out = np.full(target, fill, dtype=np.float32)
    src, dst = [], []
    for n, t in zip(v.dims, target):
        if t >= n:
            low = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(low, low + n))
        else:
            start = (n - t) // 2
            src.append(slice(start, start + t))
            dst.append(slice(0, t))
    out[tuple(dst)] = v.data[tuple(src)]
    return v.with_data(out)


def gaussian_smooth(v: Volume, sigma: float) -> Volume:
    """
    Separable Gaussian smoothing with kernel radius ceil(3 * sigma) and replicate borders.

    Raises:
        InvalidInputError: If sigma is negative.
    """
    if sigma < 0 or not math.isfinite(sigma):
        raise InvalidInputError(f"sigma must be a non-negative finite value, got {sigma}")
    if sigma == 0:
        return v
    kernel = gaussian_kernel(sigma, int(math.ceil(3.0 * sigma)))
    return v.with_data(smooth_array(v.data, kernel))


def downsample2x(v: Volume) -> Volume:
    """
    Halve the resolution: sigma-1 smoothing then decimation; dims become ceil(dim / 2).

    Raises:
        InvalidInputError: If any dimension is below 2.
    """
    if min(v.dims) < 2:
        raise InvalidInputError(f"Cannot downsample dims {v.dims}: every dimension must be at least 2")
    spacing = tuple(2.0 * s for s in v.spacing)
    return Volume(downsample_array(v.data), spacing)


# --- MVOL codec ---


def encode_mvol(channels: np.ndarray, spacing: Sequence[float]) -> bytes:
    """Serialize a (C, nx, ny, nz) array as MVOL bytes."""
    channels = np.asarray(channels)
    header = {
        "dims": [int(d) for d in channels.shape[1:]],
        "channels": int(channels.shape[0]),
        "spacing": [float(s) for s in spacing],
        "dtype": MVOL_DTYPE,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(c.ravel(order="F"), dtype="<f4").tobytes() for c in channels)
    return MVOL_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def decode_mvol(blob: bytes, path: str = "") -> tuple[np.ndarray, tuple[float, float, float]]:
    """
    Parse MVOL bytes into a float32 (C, nx, ny, nz) array and the voxel spacing.

    Raises:
        FormatError: On a bad magic, malformed header, unsupported dtype, size mismatch or non-finite values.
    """
    if len(blob) < len(MVOL_MAGIC) or blob[: len(MVOL_MAGIC)] != MVOL_MAGIC:
        raise FormatError("not an MVOL file (bad magic)", path, offset=0)
    if len(blob) < 12:
        raise FormatError("missing header length", path, offset=8)
    (header_len,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + header_len:
        raise FormatError(f"header truncated: expected {header_len} bytes, found {len(blob) - 12}", path, offset=12)
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"malformed header text ({e})", path, offset=12) from e
    if not isinstance(header, dict):
        raise FormatError("header is not a key/value object", path, offset=12)
    if header.get("dtype") != MVOL_DTYPE:
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}, expected {MVOL_DTYPE!r}", path, offset=12)
    try:
        dims = _as_dims(header["dims"])
        channels = int(header["channels"])
        spacing = _as_spacing(header.get("spacing", (1.0, 1.0, 1.0)))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid header field ({e})", path, offset=12) from e
    if channels <= 0:
        raise FormatError(f"channel count must be positive, got {channels}", path, offset=12)

    start = 12 + header_len
    count = dims[0] * dims[1] * dims[2] * channels
    expected = count * 4
    actual = len(blob) - start
    if actual != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, found {actual}", path, offset=start)
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=start).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite voxel value", path, offset=start + 4 * int(bad[0]))
    voxels = dims[0] * dims[1] * dims[2]
    array = np.stack([values[c * voxels : (c + 1) * voxels].reshape(dims, order="F") for c in range(channels)])
    return array, spacing


# --- NIfTI-1 subset ---


def is_nifti(path: PathLike) -> bool:
    name = str(path).lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _format_of(path: PathLike) -> str:
    name = str(path).lower()
    if is_nifti(name):
        return "nifti"
    if name.endswith(".mvol"):
        return "mvol"
    raise InvalidInputError(f"Cannot infer file format from {path!s}; use .mvol, .nii or .nii.gz")


def read_nifti(path: PathLike) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    """
    Read a NIfTI-1 file into a float64 (C, nx, ny, nz) array with scl_slope/scl_inter applied.

    Accepts 3-D volumes, 4-D volumes with a singleton fourth axis, and 5-D vector images
    shaped [nx, ny, nz, 1, C].

    Raises:
        FormatError: On a malformed header, unsupported datatype, unsupported shape or truncated data.
    """
    try:
        img = nib.load(str(path))
    except (ImageFileError, HeaderDataError, EOFError, ValueError) as e:
        raise FormatError(f"malformed NIfTI header ({e})", str(path), offset=0) from e
    if not isinstance(img, nib.Nifti1Image):
        raise FormatError(f"expected NIfTI-1, found {type(img).__name__}", str(path), offset=0)
    header = img.header
    dtype = header.get_data_dtype().newbyteorder("=")
    if dtype not in NIFTI_DTYPES:
        raise FormatError(f"unsupported datatype {dtype}; supported: uint8, int16, float32", str(path), offset=70)
    shape = img.shape
    if len(shape) == 3:
        layout = "scalar"
    elif len(shape) == 4 and shape[3] == 1:
        layout = "scalar"
    elif len(shape) == 5 and shape[3] == 1:
        layout = "vector"
    else:
        raise FormatError(f"unsupported image shape {shape}", str(path), offset=40)
    try:
        data = img.get_fdata(dtype=np.float64)
    except (OSError, EOFError, ValueError) as e:
        raise FormatError(f"voxel data unreadable ({e})", str(path), offset=int(header["vox_offset"])) from e
    if layout == "scalar":
        channels = data.reshape(shape[:3])[None]
    else:
        channels = np.moveaxis(data[:, :, :, 0, :], -1, 0)
    spacing = tuple(float(z) for z in header.get_zooms()[:3])
    return channels, _as_spacing(spacing), np.asarray(img.affine, dtype=np.float64)


def encode_nifti(channels: np.ndarray, spacing: Sequence[float], affine: Optional[np.ndarray], gz: bool) -> bytes:
    """Serialize a (C, nx, ny, nz) array as float32 NIfTI-1; C > 1 is written as a vector image."""
    channels = np.asarray(channels, dtype=np.float32)
    if affine is None:
        affine = np.diag([*[float(s) for s in spacing], 1.0])
    if channels.shape[0] == 1:
        data = channels[0]
    else:
        data = np.moveaxis(channels, 0, -1)[:, :, :, None, :]
    img = nib.Nifti1Image(data, affine)
    img.header.set_data_dtype(np.float32)
    img.header.set_zooms(tuple(float(s) for s in spacing) + (1.0,) * (data.ndim - 3))
    img.header.set_xyzt_units("mm")
    if channels.shape[0] > 1:
        img.header.set_intent(NIFTI_VECTOR_INTENT)
    raw = img.to_bytes()
    return gzip.compress(raw, mtime=0) if gz else raw


# --- Volume I/O ---


def read_channels(path: PathLike) -> tuple[np.ndarray, tuple[float, float, float], Optional[np.ndarray]]:
    """Read any supported file into a (C, nx, ny, nz) array, its spacing and affine (NIfTI only)."""
    fmt = _format_of(path)
    if fmt == "mvol":
        channels, spacing = decode_mvol(pathlib.Path(path).read_bytes(), str(path))
        return channels, spacing, None
    return read_nifti(path)


def encode_channels(path: PathLike, channels: np.ndarray, spacing, affine: Optional[np.ndarray] = None) -> bytes:
    """File bytes for a (C, nx, ny, nz) array in the format implied by the extension of ``path``."""
    if _format_of(path) == "mvol":
        return encode_mvol(channels, spacing)
    return encode_nifti(channels, spacing, affine, gz=str(path).lower().endswith(".gz"))


def write_channels(path: PathLike, channels: np.ndarray, spacing, affine: Optional[np.ndarray] = None) -> None:
    """Atomically write a (C, nx, ny, nz) array in the format implied by the extension."""
    atomic_write_bytes(path, encode_channels(path, channels, spacing, affine))


def load_volume(path: PathLike) -> Volume:
    """
    Load a scalar volume from .mvol, .nii or .nii.gz.

    Raises:
        FormatError: If the file is malformed.
        InvalidInputError: If the file holds more than one channel.
    """
    channels, spacing, affine = read_channels(path)
    if channels.shape[0] != 1:
        raise InvalidInputError(f"{path!s} holds {channels.shape[0]} channels; a volume needs exactly 1")
    logger.debug("Loaded volume %s dims=%s spacing=%s", path, channels.shape[1:], spacing)
    return Volume(channels[0], spacing, affine)


def save_volume(v: Volume, path: PathLike) -> None:
    """Save a volume; MVOL round-trips bit-exactly, NIfTI is always written as float32."""
    write_channels(path, v.data[None], v.spacing, v.affine)

