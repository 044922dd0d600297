"""Lip-sync and sharpness metrics that need no pretrained network:
Procrustes disparity, cosine similarity and Pearson correlation of lip
distance series, and the CPBD no-reference sharpness score."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import as_float_vector, check_same_length, to_gray
from .errors import DegenerateInputError, DimensionMismatchError, ValidationError
from .structure_controller import lip_distances


@dataclass(frozen=True)
class AlignmentResult:
    """Similarity alignment of ``b`` onto ``a``: ``scale * b @ rotation + translation``."""

    disparity: float
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation + self.translation


def _landmark_set(x, name):
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ValidationError(f"{name} must be a (points, 2|3) array, got shape {pts.shape}")
    if pts.shape[0] < 2:
        raise ValidationError(f"{name} needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise ValidationError(f"{name} has non-finite coordinates")
    return pts


def _rotation(b, a):
    """Proper rotation R minimizing ||a - b R||, plus the sign-corrected singular values."""
    u, s, vt = np.linalg.svd(b.T @ a)
    signs = np.ones_like(s)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        signs[-1] = -1.0
    return (u * signs) @ vt, s * signs


def procrustes_disparity(a, b, scaling=True):
    """Align ``b`` to ``a`` and return the residual sum of squares.

    With ``scaling`` both sets are centred and normalised to unit size, and
    ``b`` is additionally scaled optimally (the usual Procrustes disparity,
    symmetric in its arguments). Without it only translation and rotation
    are removed and the residual is in the input units.
    """
    a = _landmark_set(a, "a")
    b = _landmark_set(b, "b")
    if a.shape != b.shape:
        raise DimensionMismatchError(f"landmark sets differ: {a.shape} vs {b.shape}")
    a_mean, b_mean = a.mean(axis=0), b.mean(axis=0)
    ac, bc = a - a_mean, b - b_mean
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0 or nb == 0:
        raise DegenerateInputError("degenerate landmark set: all points coincide")
    if scaling:
        an, bn = ac / na, bc / nb
        rot, s = _rotation(bn, an)
        k = float(s.sum())
        disparity = float(np.sum((an - k * bn @ rot) ** 2))
        scale = k * na / nb
    else:
        rot, _ = _rotation(bc, ac)
        disparity = float(np.sum((ac - bc @ rot) ** 2))
        scale = 1.0
    translation = a_mean - scale * b_mean @ rot
    return AlignmentResult(max(disparity, 0.0), rot, float(scale), translation)


def _series_pair(a, b, min_length):
    x = as_float_vector(a, "a", min_length=min_length)
    y = as_float_vector(b, "b", min_length=min_length)
    check_same_length(x, y, ("a", "b"))
    return x, y


def csld(a, b):
    """Cosine similarity of two lip distance series."""
    x, y = _series_pair(a, b, 1)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise DegenerateInputError("zero vector: cosine similarity undefined")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def pcld(a, b):
    """Pearson correlation of two lip distance series."""
    x, y = _series_pair(a, b, 2)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("constant series: correlation undefined")
    zx = x - x.mean()
    zy = y - y.mean()
    zx /= np.linalg.norm(zx)
    zy /= np.linalg.norm(zy)
    # chord form 1 - |zx - zy|^2 / 2: affinely related series land on exactly +-1
    if np.dot(zx, zy) >= 0:
        r = 1.0 - 0.5 * np.dot(zx - zy, zx - zy)
    else:
        r = 0.5 * np.dot(zx + zy, zx + zy) - 1.0
    return float(np.clip(r, -1.0, 1.0))


def lip_series(track, scheme="ibug68"):
    """Per-frame lip distances of a landmark track."""
    return lip_distances(track, scheme)


# --------------------------------------------------------------------------
# CPBD
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CPBDConfig:
    beta: float = 3.6
    block_size: int = 64
    edge_block_fraction: float = 0.002
    # P_blur values are binned to whole percent; bins up to this one count as sharp
    jnb_percent: int = 63
    contrast_split: int = 50
    jnb_width_low_contrast: float = 5.0
    jnb_width_high_contrast: float = 3.0


def _sobel_edges(img):
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    strength = gx * gx + gy * gy
    mean = strength.mean()
    if mean == 0:
        return np.zeros(img.shape, dtype=bool), gx, gy
    strength = np.where(strength > 4.0 * mean, strength, 0.0)
    padded = np.pad(strength, 1)
    centre = padded[1:-1, 1:-1]
    # ties resolved toward the first pixel so pixel-aligned steps still produce one edge
    horiz = (centre > padded[1:-1, :-2]) & (centre >= padded[1:-1, 2:])
    vert = (centre > padded[:-2, 1:-1]) & (centre >= padded[2:, 1:-1])
    return (centre > 0) & (horiz | vert), gx, gy


def _monotone_runs(img, axis):
    """Lengths of strictly increasing/decreasing runs ending at and starting from each pixel."""
    arr = np.moveaxis(img, axis, -1)
    diff = np.diff(arr, axis=-1)
    n = arr.shape[-1]
    inc_before = np.zeros(arr.shape, dtype=np.int64)
    dec_before = np.zeros(arr.shape, dtype=np.int64)
    inc_after = np.zeros(arr.shape, dtype=np.int64)
    dec_after = np.zeros(arr.shape, dtype=np.int64)
    for k in range(1, n):
        up, down = diff[..., k - 1] > 0, diff[..., k - 1] < 0
        inc_before[..., k] = np.where(up, inc_before[..., k - 1] + 1, 0)
        dec_before[..., k] = np.where(down, dec_before[..., k - 1] + 1, 0)
    for k in range(n - 2, -1, -1):
        up, down = diff[..., k] > 0, diff[..., k] < 0
        inc_after[..., k] = np.where(up, inc_after[..., k + 1] + 1, 0)
        dec_after[..., k] = np.where(down, dec_after[..., k + 1] + 1, 0)
    runs = (inc_before, inc_after, dec_before, dec_after)
    return tuple(np.moveaxis(r, -1, axis) for r in runs)


def edge_widths(img, edges, gx, gy):
    """Width of each edge pixel: span between the luminance extrema bracketing
    it along the dominant gradient axis (0 where not an edge)."""
    widths = np.zeros(img.shape, dtype=np.int64)
    horizontal = np.abs(gx) >= np.abs(gy)
    for axis, along, grad in ((1, horizontal, gx), (0, ~horizontal, gy)):
        inc_b, inc_a, dec_b, dec_a = _monotone_runs(img, axis)
        w = np.where(grad > 0, inc_b + inc_a, dec_b + dec_a)
        sel = edges & along
        widths[sel] = w[sel]
    return widths


def cpbd(frame, config=None):
    """Cumulative probability of blur detection, in [0, 1]; higher is sharper."""
    cfg = config or CPBDConfig()
    img = to_gray(frame) * 255.0
    h, w = img.shape
    bs = cfg.block_size
    if min(h, w) < bs:
        raise ValidationError(f"image too small for CPBD: {h}x{w}, need at least {bs}x{bs}")
    edges, gx, gy = _sobel_edges(img)
    if not edges.any():
        raise DegenerateInputError("no edges found")
    widths = edge_widths(img, edges, gx, gy)

    probabilities = []
    for r in range(0, h - bs + 1, bs):
        for c in range(0, w - bs + 1, bs):
            block_edges = edges[r:r + bs, c:c + bs]
            if block_edges.sum() <= cfg.edge_block_fraction * bs * bs:
                continue
            block = img[r:r + bs, c:c + bs]
            contrast = int(block.max() - block.min())
            jnb = cfg.jnb_width_low_contrast if contrast <= cfg.contrast_split else cfg.jnb_width_high_contrast
            bw = widths[r:r + bs, c:c + bs][block_edges]
            bw = bw[bw > 0].astype(np.float64)
            probabilities.append(1.0 - np.exp(-((bw / jnb) ** cfg.beta)))
    if not probabilities:
        raise DegenerateInputError("no edges found in any block")
    p = np.concatenate(probabilities)
    if p.size == 0:
        raise DegenerateInputError("no edges found")
    return float(np.mean(np.rint(p * 100.0) <= cfg.jnb_percent))
