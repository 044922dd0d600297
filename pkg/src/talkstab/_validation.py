"""Small input-checking helpers shared by the estimators and functions."""

import numbers

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError, ValidationError


def as_float_vector(x, name="x", min_length=1):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.shape[0] < min_length:
        raise ValidationError(f"{name} needs at least {min_length} values, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_same_length(a, b, names=("a", "b")):
    if len(a) != len(b):
        raise DimensionMismatchError(
            f"length mismatch: {names[0]} has {len(a)}, {names[1]} has {len(b)}"
        )


def check_same_shape(a, b, names=("a", "b")):
    if tuple(a) != tuple(b):
        raise DimensionMismatchError(
            f"dimension mismatch: {names[0]} is {tuple(a)}, {names[1]} is {tuple(b)}"
        )


def check_nonconstant(x, message):
    if np.ptp(x) == 0:
        raise DegenerateInputError(message)


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be positive and finite, got {value!r}")
    return float(value)


def to_gray(raster):
    """Convert an 8-bit raster (H, W) or (H, W, 3) to float64 luminance in [0, 1]."""
    arr = np.asarray(raster)
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            arr = arr[..., 0]
        elif arr.shape[2] == 3:
            arr = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
        else:
            raise ValidationError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    elif arr.ndim != 2:
        raise ValidationError(f"expected a 2-D or 3-D raster, got shape {arr.shape}")
    arr = np.asarray(arr, dtype=np.float64)
    if np.issubdtype(np.asarray(raster).dtype, np.integer):
        arr = arr / 255.0
    return arr
