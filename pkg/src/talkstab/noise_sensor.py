"""Gaussian-prior noise sensing and spatially adaptive temporal stabilization.

Per pixel, the temporal samples of the generated flow are compared with the
reference flow. The part of the generated variance that a linear function
of the reference cannot explain is treated as jitter/flicker noise; its
per-pixel magnitude ``D`` drives a temporal Gaussian filter whose width grows
with the noise.
"""

import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_vector, check_int, check_same_length, check_same_shape
from .errors import DegenerateInputError, ValidationError
from .media_io import (
    FlowField,
    FlowSeries,
    FrameSequence,
    RegionMask,
    load_flow,
    load_mask,
    store_flow,
    store_mask,
)
from .swilk import MAX_N, MIN_N, shapiro_wilk_batch

D_FLOOR = 1e-6
DEFAULT_HALF_WIDTH = 2
DEFAULT_MIN_SAMPLES = 8
DEFAULT_LEVELS = (0.90, 0.95, 0.99)


# --------------------------------------------------------------------------
# Containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PixelFlowStats:
    """Per-pixel Gaussian fit of the temporal flow samples.

    ``mean`` is ``(H, W, 2)``, ``covariance`` ``(H, W, 2, 2)`` (unbiased);
    entries outside ``valid`` are NaN.
    """

    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    valid: np.ndarray


@dataclass(frozen=True)
class NormalityReport:
    levels: tuple
    w: dict        # component -> (H, W) W statistic, NaN where untested
    p: dict        # component -> (H, W) p-value
    tested: dict   # component -> (H, W) bool
    gaussian_at: dict            # level -> pooled non-rejection fraction
    per_component: dict          # component -> {level -> fraction}

    def to_dict(self):
        summary = {}
        for comp in ("x", "y"):
            sel = self.tested[comp]
            summary[comp] = {
                "tested_pixels": int(sel.sum()),
                "median_w": float(np.median(self.w[comp][sel])) if sel.any() else None,
                "median_p": float(np.median(self.p[comp][sel])) if sel.any() else None,
                "fractions": {_level_key(c): f for c, f in self.per_component[comp].items()},
            }
        return {
            "levels": [float(c) for c in self.levels],
            "fractions": {_level_key(c): f for c, f in self.gaussian_at.items()},
            "per_pixel_summary": summary,
        }


def _level_key(c):
    return f"{c:.2f}"


@dataclass(frozen=True)
class NoisePatternMap:
    """Per-pixel noise magnitude ``D`` (pixels/frame) and its validity mask."""

    D: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.D, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        check_same_shape(d.shape, valid.shape, ("D", "valid"))
        if d.ndim != 2:
            raise ValidationError(f"noise pattern must be 2-D, got {d.shape}")
        d = np.where(valid, d, 0.0)
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValidationError("noise pattern must be finite and non-negative")
        d.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "D", d)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def uniform(cls, height, width, value):
        return cls(np.full((height, width), float(value)), np.ones((height, width), dtype=bool))

    @property
    def shape(self):
        return self.D.shape


@dataclass(frozen=True)
class TemporalKernel:
    half_width: int
    weights: np.ndarray

    @property
    def offsets(self):
        return np.arange(-self.half_width, self.half_width + 1)


class NoiseVariance(NamedTuple):
    value: float
    raw: float


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def _resolve_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = mask.membership if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    check_same_shape(m.shape, shape, ("mask", "flow"))
    return m


def pixel_stats(series, mask=None):
    """Sample mean and unbiased covariance of every masked pixel's flow vectors."""
    n = len(series)
    if n < 2:
        raise ValidationError(f"series too short: need >= 2 fields, got {n}")
    m = _resolve_mask(mask, series.shape)
    samples = np.stack([series.u, series.v], axis=-1)  # (N, H, W, 2)
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = np.einsum("nhwi,nhwj->hwij", centered, centered) / (n - 1)
    mean = np.where(m[..., None], mean, np.nan)
    cov = np.where(m[..., None, None], cov, np.nan)
    return PixelFlowStats(mean=mean, covariance=cov, sample_count=n, valid=m.copy())


def normality_survey(series, mask=None, levels=DEFAULT_LEVELS):
    """Componentwise Shapiro-Wilk test of every masked pixel's temporal flow samples.

    ``gaussian_at[c]`` is the fraction of tested (pixel, component) samples with
    ``p > 1 - c``; zero-variance components are not counted.
    """
    n = len(series)
    if not MIN_N <= n <= MAX_N:
        raise ValidationError(f"normality survey needs {MIN_N}..{MAX_N} samples per pixel, got {n}")
    m = _resolve_mask(mask, series.shape)
    if not m.any():
        raise ValidationError("no pixels under test: mask is empty")
    levels = tuple(float(c) for c in levels)
    for c in levels:
        if not 0.0 < c < 1.0:
            raise ValidationError(f"confidence level must lie in (0, 1), got {c}")

    w_maps, p_maps, tested = {}, {}, {}
    for comp, stack in (("x", series.u), ("y", series.v)):
        rows = stack[:, m].T  # (pixels, n)
        w, p, ok = shapiro_wilk_batch(rows)
        w_map = np.full(series.shape, np.nan)
        p_map = np.full(series.shape, np.nan)
        t_map = np.zeros(series.shape, dtype=bool)
        w_map[m], p_map[m], t_map[m] = w, p, ok
        w_maps[comp], p_maps[comp], tested[comp] = w_map, p_map, t_map

    total = int(tested["x"].sum() + tested["y"].sum())
    if total == 0:
        raise DegenerateInputError("no pixels under test: every masked pixel has zero variance")
    per_component = {}
    for comp in ("x", "y"):
        count = int(tested[comp].sum())
        per_component[comp] = {
            c: (float(np.sum(p_maps[comp][tested[comp]] > 1.0 - c)) / count if count else None)
            for c in levels
        }
    pooled = {}
    for c in levels:
        hits = sum(int(np.sum(p_maps[comp][tested[comp]] > 1.0 - c)) for comp in ("x", "y"))
        pooled[c] = hits / total
    return NormalityReport(levels, w_maps, p_maps, tested, pooled, per_component)


def linear_mmse_fit(target, predictor):
    """Least-squares ``(alpha, beta)`` for ``target ~ alpha * predictor + beta``.

    ``alpha = Cov(target, predictor) / Var(predictor)`` and
    ``beta = mean(target) - alpha * mean(predictor)``.
    """
    t = as_float_vector(target, "target", min_length=2)
    x = as_float_vector(predictor, "predictor", min_length=2)
    check_same_length(t, x, ("target", "predictor"))
    if np.ptp(x) == 0:
        raise DegenerateInputError("zero predictor variance")
    xc = x - x.mean()
    alpha = float(np.dot(t - t.mean(), xc) / np.dot(xc, xc))
    beta = float(t.mean() - alpha * x.mean())
    return alpha, beta


def _noise_variance_raw(fake, real, axis=0):
    """Unexplained variance of ``fake`` given ``real`` along ``axis`` (unbiased moments).

    Algebraically ``(s_ff - c^2 / s_rr) / (n - 1)``, but evaluated as the sum
    of squared regression residuals: the moment form cancels catastrophically
    when the noise is tiny next to the signal. One refinement pass removes the
    rounding left in the slope. Identical inputs give exactly zero.
    """
    n = fake.shape[axis]
    df = fake - fake.mean(axis=axis, keepdims=True)
    dr = real - real.mean(axis=axis, keepdims=True)
    s_rr = (dr * dr).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        resid = df - ((df * dr).sum(axis=axis, keepdims=True) / s_rr) * dr
        resid = resid - ((resid * dr).sum(axis=axis, keepdims=True) / s_rr) * dr
        out = (resid * resid).sum(axis=axis) / (n - 1)
    return np.where(np.squeeze(s_rr, axis=axis) > 0, out, np.nan)


def noise_variance(fake, real):
    """Variance of the generated noise not explained linearly by the reference.

    ``Var(fake) - Cov(fake, real)^2 / Var(real)``; returns the value clamped at
    zero together with the raw (possibly rounding-negative) number.
    """
    f = as_float_vector(fake, "fake", min_length=2)
    r = as_float_vector(real, "real", min_length=2)
    check_same_length(f, r, ("fake", "real"))
    if np.ptp(r) == 0:
        raise DegenerateInputError("zero real variance: reference flow constant; noise undefined")
    raw = float(_noise_variance_raw(f, r))
    return NoiseVariance(max(raw, 0.0), raw)


def noise_pattern(fake_series, real_series, mask=None, min_samples=DEFAULT_MIN_SAMPLES):
    """Per-pixel noise magnitude ``D = sqrt(var_x + var_y)`` of the generated flow.

    Pixels outside the mask, with fewer than ``min_samples`` paired samples, or
    whose reference component is constant in time are marked invalid.
    """
    check_same_length(fake_series, real_series, ("fake series", "real series"))
    check_same_shape(fake_series.shape, real_series.shape, ("fake series", "real series"))
    n = len(fake_series)
    if n < 2:
        raise ValidationError(f"series too short: need >= 2 paired fields, got {n}")
    check_int(min_samples, "min_samples", minimum=2)
    m = _resolve_mask(mask, fake_series.shape)
    if not m.any():
        raise ValidationError("no pixels under test: mask is empty")

    var_x = _noise_variance_raw(fake_series.u, real_series.u)
    var_y = _noise_variance_raw(fake_series.v, real_series.v)
    moving = (np.ptp(real_series.u, axis=0) > 0) & (np.ptp(real_series.v, axis=0) > 0)
    valid = m & moving & (n >= min_samples)
    d = np.sqrt(np.maximum(np.where(valid, var_x, 0.0), 0.0) + np.maximum(np.where(valid, var_y, 0.0), 0.0))
    return NoisePatternMap(np.where(valid, d, 0.0), valid)


def mean_noise_pattern(pattern, mask=None):
    """Mean of ``D`` over masked, valid pixels."""
    sel = pattern.valid & _resolve_mask(mask, pattern.shape)
    if not sel.any():
        raise ValidationError("empty selection: no masked valid pixels")
    return float(pattern.D[sel].mean())


# --------------------------------------------------------------------------
# Temporal filtering
# --------------------------------------------------------------------------


def _kernel_weights(d, half_width):
    """Weights of shape ``d.shape + (2K+1,)``; delta kernel where ``d <= D_FLOOR``."""
    d = np.asarray(d, dtype=np.float64)
    k = np.arange(-half_width, half_width + 1, dtype=np.float64)
    delta = d <= D_FLOOR
    safe = np.where(delta, 1.0, d)
    # softmax over offsets; the k=0 logit is the maximum, so no shift is needed
    logits = -(k * k) / (2.0 * safe[..., None] ** 2)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    impulse = (k == 0).astype(np.float64)
    return np.where(delta[..., None], impulse, w)


def build_kernel(d, half_width=DEFAULT_HALF_WIDTH):
    """Normalised Gaussian weights over offsets ``-K..K`` with standard deviation ``d``."""
    if not math.isfinite(d) or d < 0:
        raise ValidationError(f"D must be finite and >= 0, got {d!r}")
    half_width = check_int(half_width, "half_width", minimum=0)
    return TemporalKernel(half_width, _kernel_weights(d, half_width))


def stabilize(seq, pattern, half_width=DEFAULT_HALF_WIDTH, mask=None):
    """Temporally filter masked, valid pixels with their own Gaussian kernel.

    Boundaries use replicate padding; other pixels pass through untouched and
    the result is rounded half away from zero back to 8 bits.
    """
    half_width = check_int(half_width, "half_width", minimum=0)
    check_same_shape(pattern.shape, (seq.height, seq.width), ("noise pattern", "frames"))
    sel = pattern.valid & _resolve_mask(mask, pattern.shape)
    if half_width == 0 or not sel.any():
        return FrameSequence(seq.frames.copy(), frame_rate=seq.frame_rate)

    frames = seq.frames
    src = frames.astype(np.float64)
    if src.ndim == 3:
        src = src[..., None]
    weights = _kernel_weights(pattern.D[sel], half_width)  # (P, 2K+1)
    pixels = src[:, sel, :]  # (T, P, C)
    t_len = pixels.shape[0]
    acc = np.zeros_like(pixels)
    for j, k in enumerate(range(-half_width, half_width + 1)):
        idx = np.clip(np.arange(t_len) + k, 0, t_len - 1)
        acc += weights[None, :, j, None] * pixels[idx]
    # values are non-negative, so floor(x + 0.5) rounds half away from zero
    quantized = np.clip(np.floor(acc + 0.5), 0, 255).astype(np.uint8)
    out = frames.copy()
    if out.ndim == 3:
        out[:, sel] = quantized[..., 0]
    else:
        out[:, sel, :] = quantized
    return FrameSequence(out, frame_rate=seq.frame_rate)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def _validity_path(path):
    return os.fspath(path) + ".valid.pgm"


def store_noise_pattern(pattern, path):
    """Store ``D`` as a single-channel ``.flo`` (v = 0).

    When some pixels are invalid a ``<path>.valid.pgm`` mask is written next to it.
    """
    store_flow(FlowField(pattern.D, np.zeros_like(pattern.D)), path)
    vpath = _validity_path(path)
    if not pattern.valid.all():
        store_mask(RegionMask(pattern.valid), vpath)
    elif os.path.exists(vpath):
        os.remove(vpath)


def load_noise_pattern(path):
    field = load_flow(path)
    vpath = _validity_path(path)
    if os.path.exists(vpath):
        valid = load_mask(vpath).membership
        check_same_shape(valid.shape, field.shape, ("validity mask", "noise pattern"))
    else:
        valid = np.ones(field.shape, dtype=bool)
    return NoisePatternMap(field.u.astype(np.float64), valid)


# --------------------------------------------------------------------------
# Estimator
# --------------------------------------------------------------------------


class NoiseSensor(BaseEstimator):
    """Estimate the noise pattern of generated flow and stabilize frames with it.

    ``fit(X, y)`` takes the generated :class:`FlowSeries` ``X`` and the aligned
    reference series ``y``; ``transform`` filters a :class:`FrameSequence`.

    Parameters
    ----------
    half_width : int, default=2
        Temporal kernel half-width K (kernel size 2K+1).
    mask : RegionMask or None
        Region to analyse and filter; None means the whole frame.
    min_samples : int, default=8
        Minimum number of paired samples for a pixel to be estimated.
    levels : tuple of float or None
        Confidence levels for the Shapiro-Wilk survey run during ``fit``;
        None skips the survey.
    """

    def __init__(self, half_width=DEFAULT_HALF_WIDTH, mask=None, min_samples=DEFAULT_MIN_SAMPLES,
                 levels=DEFAULT_LEVELS):
        self.half_width = half_width
        self.mask = mask
        self.min_samples = min_samples
        self.levels = levels

    def fit(self, X, y):
        if not isinstance(X, FlowSeries) or not isinstance(y, FlowSeries):
            raise ValidationError("NoiseSensor.fit expects two FlowSeries (generated, reference)")
        self.noise_pattern_ = noise_pattern(X, y, self.mask, self.min_samples)
        self.mnp_ = mean_noise_pattern(self.noise_pattern_, self.mask)
        self.stats_ = pixel_stats(X, self.mask)
        self.normality_ = None
        if self.levels is not None and MIN_N <= len(X) <= MAX_N:
            self.normality_ = normality_survey(X, self.mask, self.levels)
        return self

    def transform(self, X):
        check_is_fitted(self, "noise_pattern_")
        return stabilize(X, self.noise_pattern_, self.half_width, self.mask)

    def score(self, X, y):
        """Negative mean noise pattern of ``X`` against ``y`` (higher is smoother)."""
        check_is_fitted(self, "noise_pattern_")
        return -mean_noise_pattern(noise_pattern(X, y, self.mask, self.min_samples), self.mask)
