"""Linear 3D morphable model: synthesis, shape fitting, shape/texture mixing
and orthographic landmark projection.

Shapes and textures are flat ``3n`` vectors ``(x0, y0, z0, x1, ...)``; bases
are stored row-wise, ``(M, 3n)``.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_float_vector
from .errors import DegenerateInputError, DimensionMismatchError, FormatError, ValidationError

ARRAY_MAGIC = b"MM3D"
ARRAY_VERSION = 1
_MAX_CONDITION = 1e12


@dataclass(frozen=True)
class MorphableModel:
    mean_shape: np.ndarray
    mean_texture: np.ndarray
    shape_basis: np.ndarray
    texture_basis: np.ndarray
    shape_eigen: np.ndarray
    texture_eigen: np.ndarray
    landmark_indices: tuple = ()
    norm_tolerance: float = 1e-9

    def __post_init__(self):
        ms = as_float_vector(self.mean_shape, "mean_shape", min_length=3)
        mt = as_float_vector(self.mean_texture, "mean_texture", min_length=3)
        if ms.shape[0] % 3 or mt.shape != ms.shape:
            raise ValidationError("mean shape and texture must both have length 3n")
        sb = np.atleast_2d(np.asarray(self.shape_basis, dtype=np.float64))
        tb = np.atleast_2d(np.asarray(self.texture_basis, dtype=np.float64))
        m = sb.shape[0]
        for name, basis in (("shape_basis", sb), ("texture_basis", tb)):
            if basis.shape != (m, ms.shape[0]):
                raise DimensionMismatchError(f"{name} must be (M, 3n) = ({m}, {ms.shape[0]}), got {basis.shape}")
            if not np.all(np.isfinite(basis)):
                raise ValidationError(f"{name} has non-finite entries")
            norms = np.linalg.norm(basis, axis=1)
            if np.any(np.abs(norms - 1.0) > self.norm_tolerance):
                raise ValidationError(f"{name} vectors must have unit norm")
            gram = basis @ basis.T
            if not np.isfinite(np.linalg.cond(gram)) or np.linalg.cond(gram) > _MAX_CONDITION:
                raise DegenerateInputError(f"{name} is not linearly independent")
        se = as_float_vector(self.shape_eigen, "shape_eigen")
        te = as_float_vector(self.texture_eigen, "texture_eigen")
        for name, eig in (("shape_eigen", se), ("texture_eigen", te)):
            if eig.shape != (m,):
                raise DimensionMismatchError(f"{name} must have M = {m} entries, got {eig.shape[0]}")
            if np.any(eig <= 0) or np.any(np.diff(eig) > 0):
                raise ValidationError(f"{name} must be strictly positive and non-increasing")
        idx = tuple(int(i) for i in self.landmark_indices)
        n = ms.shape[0] // 3
        if any(i < 0 or i >= n for i in idx):
            raise ValidationError(f"landmark index out of range for {n} vertices")
        for name, arr in (("mean_shape", ms), ("mean_texture", mt), ("shape_basis", sb),
                          ("texture_basis", tb), ("shape_eigen", se), ("texture_eigen", te)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "landmark_indices", idx)

    @property
    def n_vertices(self):
        return self.mean_shape.shape[0] // 3

    @property
    def n_components(self):
        return self.shape_basis.shape[0]

    def scaled_shape_basis(self):
        return self.shape_eigen[:, None] * self.shape_basis

    def scaled_texture_basis(self):
        return self.texture_eigen[:, None] * self.texture_basis


@dataclass(frozen=True)
class FaceParams:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = as_float_vector(self.alpha, "alpha")
        b = as_float_vector(self.beta, "beta")
        if a.shape != b.shape:
            raise DimensionMismatchError(f"alpha has {a.shape[0]} entries, beta has {b.shape[0]}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def to_dict(self):
        return {"alpha": [float(x) for x in self.alpha], "beta": [float(x) for x in self.beta]}

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict) or "alpha" not in doc or "beta" not in doc:
            raise FormatError("face parameters must be an object with 'alpha' and 'beta'")
        return cls(doc["alpha"], doc["beta"])


def _check_params(model, params):
    m = model.n_components
    if params.alpha.shape[0] != m:
        raise DimensionMismatchError(f"dimension mismatch: model has M={m}, params have {params.alpha.shape[0]}")


def synthesize(model, params):
    """Return ``(shape, texture)`` as mean plus eigenvalue-scaled basis combinations."""
    _check_params(model, params)
    shape = model.mean_shape + (params.alpha * model.shape_eigen) @ model.shape_basis
    texture = model.mean_texture + (params.beta * model.texture_eigen) @ model.texture_basis
    return shape, texture


def fit_shape(model, observed_shape, return_residual=False):
    """Least-squares shape coefficients for ``observed_shape`` via the normal equations.

    With ``return_residual`` also returns the Euclidean norm of the part of
    the observation outside the model's affine span.
    """
    obs = as_float_vector(observed_shape, "observed_shape")
    if obs.shape != model.mean_shape.shape:
        raise DimensionMismatchError(f"observed shape has {obs.shape[0]} values, model needs {model.mean_shape.shape[0]}")
    basis = model.scaled_shape_basis()
    gram = basis @ basis.T
    if np.linalg.cond(gram) > _MAX_CONDITION:
        raise DegenerateInputError("rank-deficient scaled shape basis")
    delta = obs - model.mean_shape
    alpha = np.linalg.solve(gram, basis @ delta)
    if return_residual:
        return alpha, float(np.linalg.norm(delta - alpha @ basis))
    return alpha


def mix_parameters(lip, identity):
    """Shape coefficients from ``lip``, texture coefficients from ``identity``."""
    if lip.alpha.shape != identity.alpha.shape:
        raise DimensionMismatchError(
            f"dimension mismatch: lip has M={lip.alpha.shape[0]}, identity has M={identity.alpha.shape[0]}"
        )
    return FaceParams(lip.alpha.copy(), identity.beta.copy())


def project_landmarks(shape, model):
    """Orthographic (x, y) projection of the model's landmark vertices."""
    s = as_float_vector(shape, "shape")
    if s.shape != model.mean_shape.shape:
        raise DimensionMismatchError("shape length does not match the model")
    verts = s.reshape(-1, 3)
    idx = list(model.landmark_indices)
    if any(i >= verts.shape[0] for i in idx):
        raise ValidationError("landmark index out of range")
    return verts[idx, :2].copy()


class ShapeCoefficientEncoder(TransformerMixin, BaseEstimator):
    """Map observed shapes ``(k, 3n)`` to shape coefficients ``(k, M)`` and back."""

    def __init__(self, model):
        self.model = model

    def fit(self, X=None, y=None):
        if not isinstance(self.model, MorphableModel):
            raise ValidationError("model must be a MorphableModel")
        self.n_components_ = self.model.n_components
        return self

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.vstack([fit_shape(self.model, row) for row in X])

    def inverse_transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.model.n_components:
            raise DimensionMismatchError(f"expected {self.model.n_components} coefficients, got {X.shape[1]}")
        return self.model.mean_shape + (X * self.model.shape_eigen) @ self.model.shape_basis


# --------------------------------------------------------------------------
# Container: JSON descriptor + raw float32 sidecars
# --------------------------------------------------------------------------

_ARRAY_FIELDS = ("mean_shape", "mean_texture", "shape_basis", "texture_basis")


def write_array(path, array):
    """Store a 1-D or 2-D array as ``MM3D`` | u32 version | u32 rows | u32 cols | float32 LE data."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError("only 1-D or 2-D arrays can be stored")
    with open(path, "wb") as fh:
        fh.write(ARRAY_MAGIC)
        fh.write(struct.pack("<III", ARRAY_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_array(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != ARRAY_MAGIC:
        raise FormatError(f"{path}: bad magic (expected MM3D)")
    version, rows, cols = struct.unpack("<III", data[4:16])
    if version != ARRAY_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = data[16:]
    if len(payload) != 4 * rows * cols:
        raise FormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite values")
    return arr


def save_model(model, path):
    """Write ``path`` (JSON) plus one ``.bin`` sidecar per array next to it."""
    base = os.path.splitext(os.fspath(path))[0]
    directory = os.path.dirname(os.path.abspath(path))
    files = {}
    for name in _ARRAY_FIELDS:
        fname = f"{os.path.basename(base)}.{name}.bin"
        write_array(os.path.join(directory, fname), getattr(model, name))
        files[name] = fname
    doc = {
        "format": "MM3D",
        "version": ARRAY_VERSION,
        "n": model.n_vertices,
        "M": model.n_components,
        "shape_eigen": [float(x) for x in model.shape_eigen],
        "texture_eigen": [float(x) for x in model.texture_eigen],
        "landmark_indices": list(model.landmark_indices),
        "arrays": files,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path, norm_tolerance=1e-6):
    """Load a model written by :func:`save_model`.

    Sidecars hold float32, so unit norms only survive to about 1e-7; the
    default tolerance reflects that.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})") from None
    try:
        n, m = int(doc["n"]), int(doc["M"])
        files = doc["arrays"]
        directory = os.path.dirname(os.path.abspath(path))
        arrays = {name: read_array(os.path.join(directory, files[name])) for name in _ARRAY_FIELDS}
        shape_eigen, texture_eigen = doc["shape_eigen"], doc["texture_eigen"]
        landmarks = doc.get("landmark_indices", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model descriptor ({exc})") from None
    for name in ("mean_shape", "mean_texture"):
        if arrays[name].shape != (1, 3 * n):
            raise FormatError(f"{path}: {name} sidecar has shape {arrays[name].shape}, expected (1, {3 * n})")
        arrays[name] = arrays[name][0]
    for name in ("shape_basis", "texture_basis"):
        if arrays[name].shape != (m, 3 * n):
            raise FormatError(f"{path}: {name} sidecar has shape {arrays[name].shape}, expected ({m}, {3 * n})")
    return MorphableModel(shape_eigen=shape_eigen, texture_eigen=texture_eigen,
                          landmark_indices=tuple(landmarks), norm_tolerance=norm_tolerance, **arrays)


def load_params(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc.msg})") from None
    return FaceParams.from_dict(doc)


def store_params(params, path):
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, sort_keys=True)
        fh.write("\n")
