"""Lip-distance driven refinement of structure embeddings.

The frame with the smallest lip opening serves as the anchor. Each later
frame's embedding is pushed along the anchor->current line by the ratio of
consecutive reference lip distances: opening lips (ratio > 1) extrapolate
past the current embedding, closing lips pull it back toward the anchor.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_vector, check_same_length
from .errors import DimensionMismatchError, ValidationError
from .media_io import LandmarkTrack

DEFAULT_LAMBDA_BOUNDS = (0.25, 4.0)
DEFAULT_EPSILON_GAMMA = 1e-6


class LipScheme(NamedTuple):
    """Landmark index convention: the inner-lip sets used for the lip distance
    and the full lip contour used for shape alignment."""

    name: str
    upper: tuple
    lower: tuple
    lips: tuple


SCHEMES = {
    # 68-point iBUG layout, 0-based; inner lip contour is 60..67
    "ibug68": LipScheme("ibug68", (61, 62, 63), (65, 66, 67), tuple(range(48, 68))),
    # compact six-point layout: three upper then three lower inner-lip points
    "inner6": LipScheme("inner6", (0, 1, 2), (3, 4, 5), tuple(range(6))),
}


def get_scheme(scheme):
    if isinstance(scheme, LipScheme):
        return scheme
    try:
        return SCHEMES[scheme]
    except KeyError:
        raise ValidationError(f"unknown landmark scheme {scheme!r}; known: {sorted(SCHEMES)}") from None


def lip_distance(landmarks, scheme="ibug68"):
    """Distance between the centroids of the upper and lower inner-lip points."""
    sch = get_scheme(scheme)
    pts = np.asarray(landmarks, dtype=np.float64)
    if pts.ndim != 2:
        raise ValidationError(f"expected a (points, dims) landmark set, got shape {pts.shape}")
    needed = max(sch.upper + sch.lower)
    if pts.shape[0] <= needed:
        raise ValidationError(
            f"landmark set has {pts.shape[0]} points; scheme {sch.name!r} needs index {needed}"
        )
    upper = pts[list(sch.upper)]
    lower = pts[list(sch.lower)]
    if not (np.all(np.isfinite(upper)) and np.all(np.isfinite(lower))):
        raise ValidationError("non-finite lip landmark coordinates")
    return float(np.linalg.norm(upper.mean(axis=0) - lower.mean(axis=0)))


def lip_distances(track, scheme="ibug68"):
    pts = track.points if isinstance(track, LandmarkTrack) else np.asarray(track, dtype=np.float64)
    if len(pts) == 0:
        raise ValidationError("empty track")
    return np.array([lip_distance(frame, scheme) for frame in pts])


@dataclass(frozen=True)
class ControllerState:
    anchor_embedding: np.ndarray
    anchor_gamma: float
    lambda_bounds: tuple = DEFAULT_LAMBDA_BOUNDS
    epsilon_gamma: float = DEFAULT_EPSILON_GAMMA

    def __post_init__(self):
        lo, hi = self.lambda_bounds
        if not 0 < lo <= 1 <= hi:
            raise ValidationError(f"lambda bounds must satisfy 0 < min <= 1 <= max, got {self.lambda_bounds}")
        if not self.epsilon_gamma > 0:
            raise ValidationError("epsilon_gamma must be positive")
        emb = as_float_vector(self.anchor_embedding, "anchor_embedding")
        emb.setflags(write=False)
        object.__setattr__(self, "anchor_embedding", emb)
        object.__setattr__(self, "lambda_bounds", (float(lo), float(hi)))


def select_anchor(track, embeddings, scheme="ibug68", lambda_bounds=DEFAULT_LAMBDA_BOUNDS,
                  epsilon_gamma=DEFAULT_EPSILON_GAMMA):
    """Index of the least-open frame (lowest index on ties) and the matching state."""
    gammas = lip_distances(track, scheme) if not _is_gamma_series(track) else np.asarray(track, float)
    if len(gammas) == 0:
        raise ValidationError("empty track")
    check_same_length(gammas, embeddings, ("track", "embeddings"))
    index = int(np.argmin(gammas))
    state = ControllerState(np.asarray(embeddings[index], dtype=np.float64), float(gammas[index]),
                            tuple(lambda_bounds), epsilon_gamma)
    return index, state


def _is_gamma_series(x):
    if isinstance(x, LandmarkTrack):
        return False
    return np.asarray(x).ndim == 1


def compute_lambda(gamma_current, gamma_previous, state=None):
    """Clamped ratio ``gamma_current / max(gamma_previous, epsilon)``."""
    if gamma_current < 0 or gamma_previous < 0:
        raise ValidationError("lip distances must be non-negative")
    if not (math.isfinite(gamma_current) and math.isfinite(gamma_previous)):
        raise ValidationError("lip distances must be finite")
    lo, hi = state.lambda_bounds if state is not None else DEFAULT_LAMBDA_BOUNDS
    eps = state.epsilon_gamma if state is not None else DEFAULT_EPSILON_GAMMA
    lam = gamma_current / max(gamma_previous, eps)
    return float(min(max(lam, lo), hi))


def adjust_embedding(state, e_current, lam):
    """``(1 - lam) * anchor + lam * current``."""
    cur = as_float_vector(e_current, "e_current")
    anchor = state.anchor_embedding
    if cur.shape != anchor.shape:
        raise DimensionMismatchError(f"dimension mismatch: embedding {cur.shape[0]} vs anchor {anchor.shape[0]}")
    if lam == 1:
        return cur.copy()
    if lam == 0:
        return anchor.copy()
    return (1.0 - lam) * anchor + lam * cur


class QuasiMonotonicityVerdict(NamedTuple):
    holds: bool
    case: object  # None, "lower", "mid" or "upper"
    lam: object
    tolerance: float

    def to_dict(self):
        return {
            "verdict": "holds" if self.holds else "violated",
            "case": self.case,
            "lambda": self.lam,
            "tolerance": self.tolerance,
        }


def quasi_monotonicity_check(f_values, grid, rel_tolerance=0.02, tolerance_floor=1e-9):
    """Check sampled lip distances ``f(lam)`` along a line against the three-case bound.

    The first endpoint (``lam = 0``) is taken as the closed-mouth one, as with
    the anchor: for ``lam <= 0`` f must not exceed ``min(f(0), f(1))``, inside
    ``(0, 1)`` it stays between the endpoint values, and for ``lam >= 1`` it
    must reach at least ``max(f(0), f(1))``. Returns the first violation in
    grid order.
    """
    lam = np.asarray(grid, dtype=np.float64)
    f = np.asarray(f_values, dtype=np.float64)
    if lam.ndim != 1 or f.shape != lam.shape:
        raise DimensionMismatchError("f_values and grid must be equal-length 1-D sequences")
    if np.any(np.diff(lam) < 0):
        raise ValidationError("grid must be sorted")
    # f is a lip distance in practice, but sampled affine test families may dip below
    # zero at extrapolated grid points, so only finiteness is required
    if not np.all(np.isfinite(f)):
        raise ValidationError("f values must be finite")
    at0 = np.flatnonzero(lam == 0.0)
    at1 = np.flatnonzero(lam == 1.0)
    if at0.size == 0 or at1.size == 0:
        raise ValidationError("missing endpoint samples: grid must contain 0 and 1")
    f0, f1 = f[at0[0]], f[at1[0]]
    lo, hi = min(f0, f1), max(f0, f1)
    tol = max(rel_tolerance * abs(f1 - f0), tolerance_floor)
    for x, fx in zip(lam, f):
        if x <= 0:
            ok, case = fx <= lo + tol, "lower"
        elif x < 1:
            ok, case = lo - tol <= fx <= hi + tol, "mid"
        else:
            ok, case = fx >= hi - tol, "upper"
        if not ok:
            return QuasiMonotonicityVerdict(False, case, float(x), float(tol))
    return QuasiMonotonicityVerdict(True, None, None, float(tol))


class StructureController(TransformerMixin, BaseEstimator):
    """Anchor selection plus per-frame embedding adjustment.

    ``fit(X, y)`` takes the embeddings ``X`` (``(T, d)``) and the lip reference
    ``y`` (a :class:`LandmarkTrack` or a 1-D series of lip distances) and picks
    the anchor. ``transform(X, y)`` returns the adjusted embeddings; frame 0 has
    no predecessor and is passed through.

    Attributes
    ----------
    anchor_index_ : int
    state_ : ControllerState
    lambdas_ : ndarray of shape (T - 1,)
        Ratios used by the most recent ``transform``.
    gammas_ : ndarray of shape (T,)
        Lip distances seen by the most recent ``fit`` or ``transform``.
    """

    def __init__(self, lambda_bounds=DEFAULT_LAMBDA_BOUNDS, epsilon_gamma=DEFAULT_EPSILON_GAMMA,
                 scheme="ibug68"):
        self.lambda_bounds = lambda_bounds
        self.epsilon_gamma = epsilon_gamma
        self.scheme = scheme

    def _gammas(self, y):
        if y is None:
            raise ValidationError("StructureController needs the lip reference (landmarks or lip distances)")
        if _is_gamma_series(y):
            g = as_float_vector(y, "lip distances")
            if np.any(g < 0):
                raise ValidationError("lip distances must be non-negative")
            return g
        return lip_distances(y, self.scheme)

    def fit(self, X, y=None):
        emb = np.asarray(X, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValidationError(f"embeddings must be a non-empty (T, d) array, got {emb.shape}")
        self.gammas_ = self._gammas(y)
        self.anchor_index_, self.state_ = select_anchor(
            self.gammas_, emb, self.scheme, tuple(self.lambda_bounds), self.epsilon_gamma
        )
        return self

    def transform(self, X, y=None):
        check_is_fitted(self, "state_")
        emb = np.asarray(X, dtype=np.float64)
        gammas = self._gammas(y)
        check_same_length(gammas, emb, ("lip reference", "embeddings"))
        out = emb.copy()
        lambdas = np.empty(max(len(emb) - 1, 0))
        for t in range(1, len(emb)):
            lam = compute_lambda(gammas[t], gammas[t - 1], self.state_)
            lambdas[t - 1] = lam
            out[t] = adjust_embedding(self.state_, emb[t], lam)
        self.lambdas_ = lambdas
        self.gammas_ = gammas
        return out

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
