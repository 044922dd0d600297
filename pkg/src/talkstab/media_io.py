"""On-disk formats: PGM/PPM frames, Middlebury ``.flo`` flow, landmark CSV,
embedding JSON and PGM region masks.

All loaders validate eagerly and raise :class:`~talkstab.errors.FormatError`
(or a :class:`~talkstab.errors.ValidationError` subclass for semantic
problems) instead of returning partial data.
"""

import csv
import glob
import io
import json
import math
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, FormatError, ValidationError

FLO_MAGIC = 202021.25
_FLO_MAGIC_BYTES = struct.pack("<f", FLO_MAGIC)
SIGNIFICANT_DIGITS = 9


def _fmt(x):
    return format(float(x), f".{SIGNIFICANT_DIGITS}g")


# --------------------------------------------------------------------------
# Domain containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameSequence:
    """Time-ordered stack of equally sized 8-bit frames.

    ``frames`` has shape ``(T, H, W)`` for grayscale or ``(T, H, W, 3)`` for RGB.
    """

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        arr = np.asarray(self.frames)
        if arr.ndim == 4 and arr.shape[3] == 1:
            arr = arr[..., 0]
        if arr.ndim not in (3, 4) or (arr.ndim == 4 and arr.shape[3] != 3):
            raise ValidationError(f"frames must be (T, H, W) or (T, H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValidationError("empty sequence")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 255:
                arr = arr.astype(np.uint8)
            else:
                raise ValidationError("frames must hold 8-bit values in [0, 255]")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, t):
        return self.frames[t]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def channels(self):
        return 1 if self.frames.ndim == 3 else 3

    def as_float(self):
        """Frames as float64 in [0, 1]."""
        return self.frames.astype(np.float64) / 255.0


@dataclass(frozen=True)
class FlowField:
    """Dense 2-D motion between two frames, ``u`` horizontal and ``v`` vertical (pixels/frame)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValidationError(f"u and v must be equal 2-D grids, got {u.shape} and {v.shape}")
        for arr in (u, v):
            arr.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    @property
    def shape(self):
        return self.u.shape


@dataclass(frozen=True)
class FlowSeries:
    """Stack of flow fields, one per consecutive frame pair.

    ``u`` and ``v`` have shape ``(N, H, W)`` and are kept in float64 for statistics.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 3 or u.shape != v.shape:
            raise ValidationError(f"flow series must be two equal (N, H, W) stacks, got {u.shape} and {v.shape}")
        if u.shape[0] < 1:
            raise ValidationError("empty flow series")
        for arr in (u, v):
            arr.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_fields(cls, fields):
        fields = list(fields)
        if not fields:
            raise ValidationError("empty flow series")
        shape = fields[0].shape
        for f in fields[1:]:
            if f.shape != shape:
                raise DimensionMismatchError(f"dimension mismatch: {f.shape} vs {shape}")
        return cls(np.stack([f.u for f in fields]), np.stack([f.v for f in fields]))

    def __len__(self):
        return self.u.shape[0]

    def __getitem__(self, t):
        if isinstance(t, slice):
            return FlowSeries(self.u[t], self.v[t])
        return FlowField(self.u[t], self.v[t])

    @property
    def fields(self):
        return [self[t] for t in range(len(self))]

    @property
    def height(self):
        return self.u.shape[1]

    @property
    def width(self):
        return self.u.shape[2]

    @property
    def shape(self):
        return self.u.shape[1:]


@dataclass(frozen=True)
class LandmarkTrack:
    """Per-frame landmark sets, ``points`` of shape ``(T, P, D)`` with D in {2, 3}."""

    points: np.ndarray
    scheme: str = "ibug68"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] not in (2, 3):
            raise ValidationError(f"landmark track must be (T, P, 2|3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def __getitem__(self, t):
        return self.points[t]

    @property
    def n_points(self):
        return self.points.shape[1]

    @property
    def dimensionality(self):
        return self.points.shape[2]


@dataclass(frozen=True)
class RegionMask:
    membership: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.membership, dtype=bool)
        if m.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "membership", m)

    @classmethod
    def full(cls, height, width):
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self):
        return self.membership.shape[0]

    @property
    def width(self):
        return self.membership.shape[1]

    @property
    def shape(self):
        return self.membership.shape

    @property
    def count(self):
        return int(self.membership.sum())


# --------------------------------------------------------------------------
# PNM
# --------------------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm_bytes(data, path="<bytes>"):
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file (expected P5 or P6)")
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    values = []
    for _ in range(3):
        m = _PNM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: malformed header")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"{path}: malformed header token {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: malformed header (non-positive size)")
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: malformed header (missing separator)")
    pos += 1
    expected = width * height * channels
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def read_pnm(path):
    """Read one binary PGM (P5) or PPM (P6) image with maxval 255."""
    with open(path, "rb") as fh:
        return _read_pnm_bytes(fh.read(), path)


def write_pnm(path, raster):
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        raise ValidationError("PNM output requires uint8 pixels")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValidationError(f"cannot store raster of shape {arr.shape} as PNM")
    header = b"%s\n%d %d\n255\n" % (magic, arr.shape[1], arr.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def _natural_key(path):
    name = os.path.basename(path)
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", name)]


def expand_pattern(path_pattern):
    """Expand a glob or printf-style (``frame_%05d.pgm``) pattern to an ordered path list."""
    if re.search(r"%0?\d*d", path_pattern):
        paths = []
        start = 0 if os.path.exists(path_pattern % 0) else 1
        i = start
        while os.path.exists(path_pattern % i):
            paths.append(path_pattern % i)
            i += 1
        return paths
    if os.path.isdir(path_pattern):
        path_pattern = os.path.join(path_pattern, "*")
    return sorted(glob.glob(path_pattern), key=_natural_key)


def load_frames(path_pattern, frame_rate=25.0):
    """Load a frame sequence from files matching ``path_pattern`` in numeric order."""
    paths = expand_pattern(path_pattern)
    paths = [p for p in paths if p.lower().endswith((".pgm", ".ppm", ".pnm"))] or paths
    if not paths:
        raise ValidationError(f"empty sequence: no files match {path_pattern!r}")
    frames = []
    for p in paths:
        img = read_pnm(p)
        if frames and img.shape != frames[0].shape:
            raise DimensionMismatchError(
                f"inconsistent dimensions: {p} is {img.shape}, expected {frames[0].shape}"
            )
        frames.append(img)
    return FrameSequence(np.stack(frames), frame_rate=frame_rate)


def store_frames(seq, out_dir, prefix="frame_"):
    """Write ``seq`` as ``<prefix>%05d.pgm`` (grayscale) or ``.ppm`` (RGB); returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    ext = "pgm" if seq.channels == 1 else "ppm"
    paths = []
    for t in range(len(seq)):
        p = os.path.join(out_dir, f"{prefix}{t:05d}.{ext}")
        write_pnm(p, seq[t])
        paths.append(p)
    return paths


def load_mask(path):
    """Load a P5 mask; pixels above 127 are members."""
    img = read_pnm(path)
    if img.ndim != 2:
        raise FormatError(f"{path}: mask must be a grayscale (P5) image")
    return RegionMask(img > 127)


def store_mask(mask, path):
    write_pnm(path, np.where(mask.membership, 255, 0).astype(np.uint8))


# --------------------------------------------------------------------------
# Middlebury .flo
# --------------------------------------------------------------------------


def _decode_flo(data, path="<bytes>"):
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != _FLO_MAGIC_BYTES:
        raise FormatError(f"{path}: bad magic {struct.unpack('<f', data[:4])[0]!r}")
    width, height = struct.unpack("<ii", data[4:12])
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 8 * width * height
    payload = data[12:]
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite flow values")
    return FlowField(arr[..., 0].astype(np.float32), arr[..., 1].astype(np.float32))


def load_flow(path):
    with open(path, "rb") as fh:
        return _decode_flo(fh.read(), path)


def encode_flow(field):
    h, w = field.shape
    out = io.BytesIO()
    out.write(_FLO_MAGIC_BYTES)
    out.write(struct.pack("<ii", w, h))
    inter = np.empty((h, w, 2), dtype="<f4")
    inter[..., 0] = field.u
    inter[..., 1] = field.v
    out.write(inter.tobytes())
    return out.getvalue()


def store_flow(field, path):
    if not (np.all(np.isfinite(field.u)) and np.all(np.isfinite(field.v))):
        raise ValidationError("refusing to store non-finite flow values")
    with open(path, "wb") as fh:
        fh.write(encode_flow(field))


def load_flow_series(directory):
    """Load every ``.flo`` file of ``directory`` in numeric filename order."""
    paths = [p for p in expand_pattern(directory) if p.endswith(".flo")]
    if not paths:
        raise ValidationError(f"empty sequence: no .flo files in {directory!r}")
    return FlowSeries.from_fields(load_flow(p) for p in paths)


def store_flow_series(series, out_dir, prefix="flow_"):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t in range(len(series)):
        p = os.path.join(out_dir, f"{prefix}{t:05d}.flo")
        store_flow(series[t], p)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# Landmark CSV
# --------------------------------------------------------------------------


def load_landmarks(path, scheme="ibug68"):
    """Read a ``frame,point,x,y[,z]`` CSV into a :class:`LandmarkTrack`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if header not in (["frame", "point", "x", "y"], ["frame", "point", "x", "y", "z"]):
            raise FormatError(f"{path}: header must be frame,point,x,y[,z], got {','.join(header)}")
        dim = len(header) - 2
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                frame, point = int(row[0]), int(row[1])
                coords = [float(c) for c in row[2:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from None
            if not all(math.isfinite(c) for c in coords):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate")
            rows.append((frame, point, coords))
    if not rows:
        raise ValidationError(f"{path}: empty track")

    frames = {}
    prev = None
    for frame, point, coords in rows:
        key = (frame, point)
        if prev is not None and key <= prev:
            raise FormatError(f"{path}: rows must be sorted by (frame, point)")
        prev = key
        frames.setdefault(frame, []).append((point, coords))
    indices = sorted(frames)
    if indices != list(range(len(indices))):
        missing = sorted(set(range(indices[-1] + 1)) - set(indices))
        raise FormatError(f"{path}: frame gap (missing frame {missing[0]})")
    counts = {len(frames[f]) for f in indices}
    if len(counts) != 1:
        raise FormatError(f"{path}: ragged point counts across frames {sorted(counts)}")
    for f in indices:
        if [p for p, _ in frames[f]] != list(range(len(frames[f]))):
            raise FormatError(f"{path}: point indices in frame {f} must be contiguous from 0")
    pts = np.array([[c for _, c in frames[f]] for f in indices], dtype=np.float64)
    return LandmarkTrack(pts.reshape(len(indices), -1, dim), scheme=scheme)


def store_landmarks(track, path):
    pts = track.points
    header = ["frame", "point", "x", "y", "z"][: 2 + pts.shape[2]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for t in range(pts.shape[0]):
            for p in range(pts.shape[1]):
                writer.writerow([t, p, *(_fmt(c) for c in pts[t, p])])


# --------------------------------------------------------------------------
# Embedding JSON
# --------------------------------------------------------------------------


def _parse_embeddings(doc, path):
    if not isinstance(doc, dict) or "dim" not in doc or "vectors" not in doc:
        raise FormatError(f"{path}: expected an object with 'dim' and 'vectors'")
    dim = doc["dim"]
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
        raise FormatError(f"{path}: 'dim' must be a positive integer")
    vectors = doc["vectors"]
    if not isinstance(vectors, list):
        raise FormatError(f"{path}: 'vectors' must be a list")
    out = []
    for i, vec in enumerate(vectors):
        if not isinstance(vec, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in vec
        ):
            raise FormatError(f"{path}: vector {i} is not a numeric list")
        if len(vec) != dim:
            raise ValidationError(f"{path}: dim mismatch (vector {i} has {len(vec)}, dim is {dim})")
        arr = np.array(vec, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{path}: vector {i} has non-finite entries")
        out.append(arr)
    return out


def load_embeddings(path):
    """Read ``{"dim": d, "vectors": [[...], ...]}`` into a list of float64 vectors."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc.msg})") from None
    return _parse_embeddings(doc, path)


def embeddings_document(vectors):
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        raise ValidationError("no vectors to store")
    dim = vectors[0].shape[0]
    for v in vectors:
        if v.shape != (dim,):
            raise DimensionMismatchError("ragged vectors")
        if not np.all(np.isfinite(v)):
            raise ValidationError("non-finite entries")
    return {"dim": int(dim), "vectors": [[float(_fmt(x)) for x in v] for v in vectors]}


def store_embeddings(vectors, path):
    with open(path, "w") as fh:
        json.dump(embeddings_document(vectors), fh)
        fh.write("\n")
