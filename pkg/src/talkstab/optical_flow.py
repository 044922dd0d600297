"""Dense Horn-Schunck optical flow over a Gaussian (binomial) pyramid."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_int, check_positive, check_same_shape, to_gray
from .errors import ValidationError
from .media_io import FlowField, FlowSeries, FrameSequence

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_HS_AVERAGE = np.array(
    [[1 / 12, 1 / 6, 1 / 12],
     [1 / 6, 0.0, 1 / 6],
     [1 / 12, 1 / 6, 1 / 12]]
)


@dataclass(frozen=True)
class FlowParams:
    """Horn-Schunck settings.

    ``regularization`` is the smoothness weight expressed in 8-bit gray levels:
    with intensities on [0, 1] the energy is
    ``sum (Ix u + Iy v + It)^2 + (regularization / 255)^2 * (|grad u|^2 + |grad v|^2)``,
    which matches the classical formulation run on 0..255 images.
    """

    regularization: float = 15.0
    iterations: int = 100
    levels: int = 3

    def __post_init__(self):
        check_positive(self.regularization, "regularization")
        check_int(self.iterations, "iterations", minimum=1)
        check_int(self.levels, "levels", minimum=1)


def worker_count():
    """Thread cap from ``TALKSTAB_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("TALKSTAB_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"TALKSTAB_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValidationError("TALKSTAB_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _gradient(img, axis):
    # central differences inside, one-sided at the borders
    if img.shape[axis] < 2:
        return np.zeros_like(img)
    return np.gradient(img, axis=axis)


def _reduce(img):
    smooth = ndimage.convolve1d(img, _BINOMIAL5, axis=0, mode="reflect")
    smooth = ndimage.convolve1d(smooth, _BINOMIAL5, axis=1, mode="reflect")
    return smooth[::2, ::2]


def _pyramid(img, levels):
    pyr = [img]
    while len(pyr) < levels:
        h, w = pyr[-1].shape
        if (h + 1) // 2 < 2 or (w + 1) // 2 < 2:
            break
        pyr.append(_reduce(pyr[-1]))
    return pyr


def _sample(img, rows, cols):
    return ndimage.map_coordinates(img, [rows, cols], order=1, mode="nearest")


def _upsample_flow(u, v, shape):
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h) / 2.0, np.arange(w) / 2.0, indexing="ij")
    rows = np.minimum(rows, u.shape[0] - 1)
    cols = np.minimum(cols, u.shape[1] - 1)
    return 2.0 * _sample(u, rows, cols), 2.0 * _sample(v, rows, cols)


def _warp(img, u, v):
    if not (u.any() or v.any()):
        return img
    h, w = img.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _sample(img, rows + v, cols + u)


def _solve_level(prev, nxt, u, v, alpha2, iterations):
    warped = _warp(nxt, u, v)
    ix = 0.5 * (_gradient(prev, 1) + _gradient(warped, 1))
    iy = 0.5 * (_gradient(prev, 0) + _gradient(warped, 0))
    # linearised about the incoming flow: Ix*u + Iy*v + it = 0 for the total flow
    it = (warped - prev) - ix * u - iy * v
    denom = alpha2 + ix * ix + iy * iy
    for _ in range(iterations):
        u_avg = ndimage.convolve(u, _HS_AVERAGE, mode="nearest")
        v_avg = ndimage.convolve(v, _HS_AVERAGE, mode="nearest")
        common = (ix * u_avg + iy * v_avg + it) / denom
        u = u_avg - ix * common
        v = v_avg - iy * common
    return u, v


def dense_flow(prev, nxt, params=None):
    """Flow from raster ``prev`` to raster ``nxt``.

    RGB rasters are reduced to luminance. Pyramid depth is cut back silently
    when the image is too small for the requested number of levels.
    """
    params = params or FlowParams()
    prev_arr, next_arr = np.asarray(prev), np.asarray(nxt)
    check_same_shape(prev_arr.shape, next_arr.shape, ("prev", "next"))
    g0, g1 = to_gray(prev_arr), to_gray(next_arr)
    alpha2 = (params.regularization / 255.0) ** 2

    pyr0 = _pyramid(g0, params.levels)
    pyr1 = _pyramid(g1, len(pyr0))
    u = np.zeros_like(pyr0[-1])
    v = np.zeros_like(pyr0[-1])
    for level in range(len(pyr0) - 1, -1, -1):
        if u.shape != pyr0[level].shape:
            u, v = _upsample_flow(u, v, pyr0[level].shape)
        u, v = _solve_level(pyr0[level], pyr1[level], u, v, alpha2, params.iterations)
    return FlowField(u, v)


def flow_series(seq, params=None, n_jobs=None):
    """Flow for every consecutive pair of ``seq``; element t maps frame t to t+1."""
    if len(seq) < 2:
        raise ValidationError(f"need >= 2 frames to compute flow, got {len(seq)}")
    params = params or FlowParams()
    n_jobs = worker_count() if n_jobs is None else max(1, n_jobs)

    def pair(t):
        return dense_flow(seq[t], seq[t + 1], params)

    if n_jobs == 1 or len(seq) == 2:
        fields = [pair(t) for t in range(len(seq) - 1)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            fields = list(pool.map(pair, range(len(seq) - 1)))
    return FlowSeries.from_fields(fields)


class HornSchunckFlow(TransformerMixin, BaseEstimator):
    """Transformer turning a :class:`FrameSequence` into its :class:`FlowSeries`.

    Stateless; ``fit`` only validates the hyper-parameters.

    Parameters
    ----------
    regularization : float, default=15
        Smoothness weight in 8-bit gray-level units.
    iterations : int, default=100
        Jacobi iterations per pyramid level.
    levels : int, default=3
        Pyramid levels (downsampling by 2).
    n_jobs : int or None
        Worker threads; None defers to ``TALKSTAB_THREADS``.
    """

    def __init__(self, regularization=15.0, iterations=100, levels=3, n_jobs=None):
        self.regularization = regularization
        self.iterations = iterations
        self.levels = levels
        self.n_jobs = n_jobs

    def _params(self):
        return FlowParams(self.regularization, self.iterations, self.levels)

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def transform(self, X):
        if not isinstance(X, FrameSequence):
            X = FrameSequence(np.asarray(X))
        return flow_series(X, self._params(), n_jobs=self.n_jobs)
