"""Synthetic ground-truth assets for tests and demonstrations.

Every generator draws from :class:`PinnedRandom`, a Philox4x64-10 stream
keyed by ``(seed, 0)`` with the counter starting at zero. Uniform doubles
take the top 53 bits of each 64-bit output; normals use Box-Muller on
consecutive uniform pairs. Nothing depends on numpy's ``Generator`` method
implementations, so streams stay fixed across numpy versions.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._validation import check_int
from .errors import ValidationError
from .media_io import (
    FlowField,
    FlowSeries,
    FrameSequence,
    LandmarkTrack,
    RegionMask,
    store_flow_series,
    store_frames,
    store_landmarks,
    store_mask,
)
from .structurist import FaceParams, MorphableModel, project_landmarks, save_model, store_params, synthesize

_TWO53 = float(2 ** 53)


class PinnedRandom:
    """Deterministic random stream (Philox4x64-10, key ``(seed, 0)``)."""

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        self._bits = np.random.Philox(key=np.array([seed, 0], dtype=np.uint64))

    def raw(self, n):
        return self._bits.random_raw(int(n))

    def uniform(self, size=None, low=0.0, high=1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) / _TWO53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(shape)

    def normal(self, size=None, loc=0.0, scale=1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).ravel()[:n]
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(shape)

    def integers(self, low, high, size=None):
        u = self.uniform(size)
        return (low + np.floor(np.asarray(u) * (high - low))).astype(np.int64) if size is not None else int(
            low + math.floor(u * (high - low))
        )

    def orthonormal(self, rows, cols):
        """``rows`` orthonormal row vectors of length ``cols`` (QR of a Gaussian matrix)."""
        q, r = np.linalg.qr(self.normal((cols, rows)))
        q = q * np.sign(np.diag(r))
        return q.T.copy()


# --------------------------------------------------------------------------
# Textures
# --------------------------------------------------------------------------


def _to_uint8(img):
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def noise_texture(rng, height, width, smooth=2.0, low=20.0, high=235.0):
    tex = rng.uniform((height, width))
    if smooth > 0:
        tex = ndimage.gaussian_filter(tex, smooth, mode="wrap")
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return low + (high - low) * tex


def _texture(kind, rng, height, width, smooth):
    if kind == "noise":
        return noise_texture(rng, height, width, smooth)
    if kind == "ramp":
        return np.tile(np.linspace(20.0, 235.0, width), (height, 1))
    if kind == "blocks":
        # piecewise-constant tiles: isolated step edges that widen under motion blur
        tile = max(int(smooth), 2)
        grid = rng.uniform((height // tile + 1, width // tile + 1), 20.0, 235.0)
        return np.kron(grid, np.ones((tile, tile)))[:height, :width]
    if kind == "bars":
        cols = np.arange(width)
        return np.tile(np.where((cols // 4) % 2 == 0, 40.0, 215.0), (height, 1))
    raise ValidationError(f"unknown texture {kind!r}")


class BlobPattern:
    """Smooth analytic image: a sum of isotropic Gaussian blobs, evaluable at
    arbitrary (sub-pixel) coordinates, so displaced frames need no resampling."""

    def __init__(self, rng, height, width, n_blobs=60, radius=(2.5, 6.0), low=30.0, high=225.0):
        margin = 8.0
        self.cy = rng.uniform(n_blobs, -margin, height + margin)
        self.cx = rng.uniform(n_blobs, -margin, width + margin)
        self.r = rng.uniform(n_blobs, *radius)
        self.amp = rng.uniform(n_blobs, -1.0, 1.0)
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        ref = self._raw(ys, xs)
        self._lo, self._hi = ref.min(), ref.max()
        self.low, self.high = low, high

    def _raw(self, ys, xs):
        out = np.zeros_like(ys)
        for cy, cx, r, a in zip(self.cy, self.cx, self.r, self.amp):
            out += a * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * r * r))
        return out

    def __call__(self, ys, xs):
        t = (self._raw(ys, xs) - self._lo) / (self._hi - self._lo)
        return self.low + (self.high - self.low) * np.clip(t, -0.1, 1.1)


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------


def translation_sequence(seed=0, dx=1, dy=0, frames=4, height=64, width=64, texture="noise", smooth=2.0):
    """Integer translation by ``(dx, dy)`` pixels per frame; content moves toward +x/+y."""
    dx, dy = check_int(dx, "dx"), check_int(dy, "dy")
    frames = check_int(frames, "frames", minimum=1)
    rng = PinnedRandom(seed)
    pad_y, pad_x = abs(dy) * (frames - 1), abs(dx) * (frames - 1)
    canvas = _to_uint8(_texture(texture, rng, height + 2 * pad_y, width + 2 * pad_x, smooth))
    out = []
    for t in range(frames):
        y0, x0 = pad_y - t * dy, pad_x - t * dx
        out.append(canvas[y0:y0 + height, x0:x0 + width])
    return FrameSequence(np.stack(out))


def ellipse_mask(height, width, ry=None, rx=None):
    ry = ry or height * 0.3
    rx = rx or width * 0.35
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    return RegionMask(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0)


@dataclass
class FlickerClip:
    real: FrameSequence
    fake: FrameSequence
    real_flow: FlowSeries
    fake_flow: FlowSeries
    mask: RegionMask
    true_component_variance: tuple
    jitter: np.ndarray = field(repr=False)


def flicker_clip(seed=0, frames=48, height=64, width=64, amplitude=1.5, period=16.0,
                 jitter=0.5, intensity_noise=0.0):
    """Reference clip with a smooth elliptical oscillation (mostly vertical) plus a jittered copy.

    The jittered clip adds a per-frame random displacement (std ``jitter`` px
    per component) weighted by a smooth window centred on the mouth region,
    and optional additive intensity flicker (std ``intensity_noise`` on the
    0..1 scale) inside the same window. Exact flows are kept as bookkeeping:
    within the mask the window is ~1, so those flows are the true motion there.
    """
    frames = check_int(frames, "frames", minimum=2)
    rng = PinnedRandom(seed)
    pattern = BlobPattern(rng, height, width)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ry, rx = height * 0.3, width * 0.35
    rho2 = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
    window = np.clip(1.5 - 0.5 * rho2, 0.0, 1.0)  # 1 inside the ellipse, fading to 0 at 3x its area
    mask = RegionMask(rho2 <= 1.0)

    t = np.arange(frames, dtype=np.float64)
    phase = 2.0 * math.pi * t / period
    base = amplitude * np.stack([0.5 * np.cos(phase), np.sin(phase)], axis=1)  # (T, [x, y])
    jit = rng.normal((frames, 2), scale=jitter)
    noise = rng.normal((frames, height, width), scale=intensity_noise * 255.0) if intensity_noise > 0 else None

    real, fake = [], []
    for k in range(frames):
        bx, by = base[k]
        real.append(_to_uint8(pattern(ys - by, xs - bx)))
        px = bx + window * jit[k, 0]
        py = by + window * jit[k, 1]
        img = pattern(ys - py, xs - px)
        if noise is not None:
            img = img + window * noise[k]
        fake.append(_to_uint8(img))

    real_step = np.diff(base, axis=0)
    jit_step = np.diff(jit, axis=0)
    shape = (frames - 1, height, width)
    real_u = np.broadcast_to(real_step[:, 0, None, None], shape)
    real_v = np.broadcast_to(real_step[:, 1, None, None], shape)
    fake_u = real_u + window[None] * jit_step[:, 0, None, None]
    fake_v = real_v + window[None] * jit_step[:, 1, None, None]
    var = tuple(float(np.var(jit_step[:, c], ddof=1)) for c in range(2))
    return FlickerClip(
        real=FrameSequence(np.stack(real)),
        fake=FrameSequence(np.stack(fake)),
        real_flow=FlowSeries(real_u, real_v),
        fake_flow=FlowSeries(fake_u, fake_v),
        mask=mask,
        true_component_variance=var,
        jitter=jit,
    )


def gaussian_flow(seed=0, fields=200, height=8, width=8, mean=(0.5, -0.2),
                  cov=((0.04, 0.01), (0.01, 0.09)), noise_variance=0.01, gain=1.0, offset=0.0):
    """Per-pixel i.i.d. Gaussian reference flow and ``gain*real + offset + noise``.

    Returns ``(fake, real)``; the noise is independent per component with
    variance ``noise_variance``.
    """
    fields = check_int(fields, "fields", minimum=1)
    rng = PinnedRandom(seed)
    chol = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    z = rng.normal((fields, height, width, 2))
    real = np.asarray(mean, dtype=np.float64) + z @ chol.T
    noise = rng.normal((fields, height, width, 2), scale=math.sqrt(noise_variance))
    fake = gain * real + offset + noise
    return (FlowSeries(fake[..., 0], fake[..., 1]), FlowSeries(real[..., 0], real[..., 1]))


def random_model(seed=0, n_vertices=10, n_components=4, eigen_range=(0.5, 3.0), landmark_indices=()):
    """Well-conditioned random model with orthonormal bases and decreasing eigenvalues."""
    rng = PinnedRandom(seed)
    dim = 3 * n_vertices
    shape_eigen = np.sort(rng.uniform(n_components, *eigen_range))[::-1]
    texture_eigen = np.sort(rng.uniform(n_components, *eigen_range))[::-1]
    return MorphableModel(
        mean_shape=rng.normal(dim),
        mean_texture=rng.uniform(dim),
        shape_basis=rng.orthonormal(n_components, dim),
        texture_basis=rng.orthonormal(n_components, dim),
        shape_eigen=shape_eigen,
        texture_eigen=texture_eigen,
        landmark_indices=tuple(landmark_indices),
    )


MOUTH_UPPER = (0, 1, 2)
MOUTH_LOWER = (3, 4, 5)
MOUTH_REST_GAP = 0.2


def mouth_model(seed=0, n_vertices=20, n_components=4, shape_eigen=None, texture_eigen=None):
    """Model whose first shape component opens the lips.

    Vertices 0-2 are the upper inner lip at y = +0.1, vertices 3-5 the lower
    inner lip at y = -0.1, so the rest opening is 0.2. The first shape basis
    moves the upper vertices up and the lower ones down by ``1/sqrt(6)`` per
    unit of ``alpha_1 * sigma_1``, making the opening
    ``0.2 + 2 * sigma_1 * alpha_1 / sqrt(6)``. Landmark indices are the six lip
    vertices, matching the ``inner6`` scheme.
    """
    if n_vertices < 6:
        raise ValidationError("mouth model needs at least 6 vertices")
    rng = PinnedRandom(seed)
    dim = 3 * n_vertices
    mean = rng.normal(dim)
    half = MOUTH_REST_GAP / 2.0
    for i, x in zip(MOUTH_UPPER, (-0.2, 0.0, 0.2)):
        mean[3 * i:3 * i + 3] = (x, half, 0.0)
    for i, x in zip(MOUTH_LOWER, (-0.2, 0.0, 0.2)):
        mean[3 * i:3 * i + 3] = (x, -half, 0.0)
    opener = np.zeros(dim)
    for i in MOUTH_UPPER:
        opener[3 * i + 1] = 1.0
    for i in MOUTH_LOWER:
        opener[3 * i + 1] = -1.0
    opener /= np.linalg.norm(opener)
    # complete the opener to an orthonormal set
    q, r = np.linalg.qr(np.column_stack([opener, rng.normal((dim, n_components - 1))]))
    q = q * np.sign(np.diag(r))
    shape_basis = q.T.copy()
    shape_basis[0] = opener
    return MorphableModel(
        mean_shape=mean,
        mean_texture=rng.uniform(dim),
        shape_basis=shape_basis,
        texture_basis=rng.orthonormal(n_components, dim),
        shape_eigen=np.asarray(shape_eigen or np.linspace(2.0, 0.5, n_components)),
        texture_eigen=np.asarray(texture_eigen or np.linspace(3.0, 0.5, n_components)),
        landmark_indices=MOUTH_UPPER + MOUTH_LOWER,
    )


def mouth_gamma(model, alpha1):
    return MOUTH_REST_GAP + 2.0 * model.shape_eigen[0] * alpha1 / math.sqrt(6.0)


def blur_ladder(seed=0, size=256, sigmas=(0.0, 1.0, 2.0, 4.0), amplitude=120.0, offset=10.0):
    """One i.i.d. noise image and its Gaussian-blurred versions, as 8-bit rasters."""
    rng = PinnedRandom(seed)
    img = offset + amplitude * rng.uniform((size, size))
    out = []
    for s in sigmas:
        b = ndimage.gaussian_filter(img, s) if s > 0 else img
        out.append(_to_uint8(b))
    return out


# --------------------------------------------------------------------------
# make_fixture
# --------------------------------------------------------------------------

KINDS = ("translation", "flicker", "mouth_model", "gaussian_flow", "blur_ladder")


@dataclass(frozen=True)
class FixtureSpec:
    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown fixture kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")


def _write_manifest(out_dir, manifest):
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def make_fixture(spec, out_dir):
    """Write the assets of ``spec`` under ``out_dir`` and return the manifest dict.

    The manifest (also written as ``manifest.json``) records the kind, seed,
    parameters, the relative asset paths and the ground truth.
    """
    os.makedirs(out_dir, exist_ok=True)
    p = dict(spec.params)
    manifest = {"kind": spec.kind, "seed": int(spec.seed), "params": p, "assets": {}, "truth": {}}

    if spec.kind == "translation":
        seq = translation_sequence(spec.seed, **p)
        store_frames(seq, os.path.join(out_dir, "frames"))
        manifest["assets"]["frames"] = "frames/frame_%05d.pgm"
        manifest["truth"]["true_flow"] = [p.get("dx", 1), p.get("dy", 0)]
    elif spec.kind == "flicker":
        clip = flicker_clip(spec.seed, **p)
        store_frames(clip.real, os.path.join(out_dir, "real"))
        store_frames(clip.fake, os.path.join(out_dir, "fake"))
        store_flow_series(clip.real_flow, os.path.join(out_dir, "real_flow"))
        store_flow_series(clip.fake_flow, os.path.join(out_dir, "fake_flow"))
        store_mask(clip.mask, os.path.join(out_dir, "mask.pgm"))
        manifest["assets"].update(real="real/frame_%05d.pgm", fake="fake/frame_%05d.pgm",
                                  real_flow="real_flow", fake_flow="fake_flow", mask="mask.pgm")
        manifest["truth"]["true_component_variance"] = list(clip.true_component_variance)
        manifest["truth"]["jitter"] = clip.jitter.tolist()
    elif spec.kind == "mouth_model":
        grid = [float(a) for a in p.pop("alpha_grid", (0.0, 0.5, 1.0))]
        model = mouth_model(spec.seed, **p)
        save_model(model, os.path.join(out_dir, "model.json"))
        lms, gammas = [], []
        for k, a1 in enumerate(grid):
            alpha = np.zeros(model.n_components)
            alpha[0] = a1
            params = FaceParams(alpha, np.zeros(model.n_components))
            store_params(params, os.path.join(out_dir, f"params_{k:03d}.json"))
            shape, _ = synthesize(model, params)
            lms.append(project_landmarks(shape, model))
            gammas.append(mouth_gamma(model, a1))
        store_landmarks(LandmarkTrack(np.stack(lms), scheme="inner6"), os.path.join(out_dir, "landmarks.csv"))
        manifest["params"]["alpha_grid"] = grid
        manifest["assets"].update(model="model.json", params="params_%03d.json", landmarks="landmarks.csv")
        manifest["truth"].update(alpha=grid, gamma=gammas, scheme="inner6")
    elif spec.kind == "gaussian_flow":
        fake, real = gaussian_flow(spec.seed, **p)
        store_flow_series(fake, os.path.join(out_dir, "fake_flow"))
        store_flow_series(real, os.path.join(out_dir, "real_flow"))
        nv = float(p.get("noise_variance", 0.01))
        manifest["assets"].update(fake_flow="fake_flow", real_flow="real_flow")
        manifest["truth"].update(true_component_variance=[nv, nv], true_noise_pattern=math.sqrt(2 * nv))
    elif spec.kind == "blur_ladder":
        sigmas = [float(s) for s in p.get("sigmas", (0.0, 1.0, 2.0, 4.0))]
        images = blur_ladder(spec.seed, **{**p, "sigmas": sigmas})
        os.makedirs(os.path.join(out_dir, "ladder"), exist_ok=True)
        store_frames(FrameSequence(np.stack(images)), os.path.join(out_dir, "ladder"))
        manifest["assets"]["ladder"] = "ladder/frame_%05d.pgm"
        manifest["truth"]["sigmas"] = sigmas
    return _write_manifest(out_dir, manifest)
