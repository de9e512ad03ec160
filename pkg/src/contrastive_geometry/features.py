"""Feature containers, normalization, similarity kernels and the DCLF dump format.

All arithmetic runs in float64. Dumps store float32 and are widened on load.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import (
    DegenerateInputError,
    FormatError,
    InvalidInputError,
    InvalidParameterError,
)

NORM_TOL = 1e-6
DEFAULT_EPS = 1e-12

DCLF_MAGIC = b"DCLF"
DCLF_VERSION = 1
_DCLF_HEADER = struct.Struct("<4s6I")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _check_unit_columns(cols: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(cols, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise InvalidInputError(f"{what} flagged normalized but max |norm - 1| = {worst:.3g}")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense features of one view, stored channel-first as ``(d, H, W)``."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"FeatureMap needs shape (d, H, W) with every axis >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("FeatureMap contains non-finite entries")
        object.__setattr__(self, "data", _frozen(data))
        if self.normalized:
            _check_unit_columns(self.columns(), "FeatureMap")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def hw(self) -> int:
        return self.data.shape[1] * self.data.shape[2]

    def columns(self) -> np.ndarray:
        """Spatial vectors as an ``(HW, d)`` array in row-major spatial order."""
        return self.data.reshape(self.dim, -1).T

    @classmethod
    def from_columns(cls, cols, height: int, width: int, normalized: bool = False) -> "FeatureMap":
        cols = np.asarray(cols, dtype=np.float64)
        if cols.ndim != 2 or cols.shape[0] != height * width:
            raise InvalidInputError(f"expected ({height * width}, d) columns, got {cols.shape}")
        return cls(cols.T.reshape(cols.shape[1], height, width), normalized=normalized)


@dataclass(frozen=True, eq=False)
class InstanceVector:
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 1 or data.shape[0] < 1:
            raise InvalidInputError(f"InstanceVector needs a non-empty 1-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("InstanceVector contains non-finite entries")
        object.__setattr__(self, "data", _frozen(data))
        if self.normalized:
            _check_unit_columns(self.data, "InstanceVector")


@dataclass(frozen=True, eq=False)
class ViewPairBatch:
    """N instances with two views each, held as one ``(N, 2, d, H, W)`` array.

    ``normalized`` means every spatial vector of both views has unit norm.
    """

    views: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        views = np.asarray(self.views)
        if views.ndim != 5 or views.shape[1] != 2 or min(views.shape) < 1:
            raise InvalidInputError(f"ViewPairBatch needs shape (N, 2, d, H, W), got {views.shape}")
        if not np.all(np.isfinite(views)):
            raise InvalidInputError("ViewPairBatch contains non-finite entries")
        object.__setattr__(self, "views", _frozen(views))
        if self.normalized:
            _check_unit_columns(self.flat(), "ViewPairBatch")

    @classmethod
    def from_maps(cls, pairs: Sequence[tuple]) -> "ViewPairBatch":
        if len(pairs) < 1:
            raise InvalidInputError("a batch needs at least one instance")
        shape = pairs[0][0].shape
        for a, b in pairs:
            if a.shape != shape or b.shape != shape:
                raise InvalidInputError(f"batch is not shape-homogeneous: {a.shape}/{b.shape} vs {shape}")
        normalized = all(a.normalized and b.normalized for a, b in pairs)
        views = np.stack([np.stack([a.data, b.data]) for a, b in pairs])
        return cls(views, normalized=normalized)

    @classmethod
    def from_flat(cls, flat, height: int, width: int, normalized: bool = False) -> "ViewPairBatch":
        """Build from an ``(N, 2, HW, d)`` array."""
        flat = np.asarray(flat, dtype=np.float64)
        n, v, hw, d = flat.shape
        if hw != height * width:
            raise InvalidInputError(f"HW={hw} does not match {height}x{width}")
        views = np.moveaxis(flat, 3, 2).reshape(n, v, d, height, width)
        return cls(views, normalized=normalized)

    @property
    def n(self) -> int:
        return self.views.shape[0]

    @property
    def dim(self) -> int:
        return self.views.shape[2]

    @property
    def height(self) -> int:
        return self.views.shape[3]

    @property
    def width(self) -> int:
        return self.views.shape[4]

    @property
    def hw(self) -> int:
        return self.height * self.width

    @property
    def instances(self) -> list:
        return [
            (FeatureMap(self.views[i, 0], self.normalized), FeatureMap(self.views[i, 1], self.normalized))
            for i in range(self.n)
        ]

    def view(self, v: int) -> list:
        return [FeatureMap(self.views[i, v], self.normalized) for i in range(self.n)]

    def flat(self) -> np.ndarray:
        """``(N, 2, HW, d)`` view of the spatial vectors."""
        n, v, d = self.views.shape[:3]
        return np.moveaxis(self.views.reshape(n, v, d, -1), 2, 3)

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`flat` for arrays of the same layout (e.g. gradients)."""
        n, v, hw, d = flat.shape
        return np.moveaxis(flat, 3, 2).reshape(n, v, d, self.height, self.width)


def _normalize_rows(cols: np.ndarray, epsilon: float) -> np.ndarray:
    norms = np.linalg.norm(cols, axis=-1, keepdims=True)
    return cols / np.maximum(norms, epsilon)


def l2_normalize(obj, epsilon: float = DEFAULT_EPS):
    """Divide every spatial vector by ``max(norm, epsilon)``.

    Accepts a FeatureMap, InstanceVector or ViewPairBatch and returns the same
    type with ``normalized`` set. All-zero vectors stay zero (the flag is then
    only nominal, see :func:`zero_columns`).
    """
    if not epsilon > 0:
        raise InvalidParameterError(f"epsilon must be > 0, got {epsilon}")
    if isinstance(obj, FeatureMap):
        cols = _normalize_rows(obj.columns(), epsilon)
        return _build_unchecked(FeatureMap, cols.T.reshape(obj.shape))
    if isinstance(obj, InstanceVector):
        return _build_unchecked(InstanceVector, _normalize_rows(obj.data, epsilon))
    if isinstance(obj, ViewPairBatch):
        flat = _normalize_rows(obj.flat(), epsilon)
        return _build_unchecked(ViewPairBatch, obj.unflatten(flat))
    arr = np.asarray(obj, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite entries")
    return _normalize_rows(arr, epsilon)


def _build_unchecked(cls, data):
    # zero columns cannot pass the unit-norm check, so bypass it after normalizing
    out = cls(data, normalized=False)
    object.__setattr__(out, "normalized", True)
    return out


def zero_columns(obj) -> np.ndarray:
    """Indices of all-zero spatial vectors (reported by batch paths)."""
    if isinstance(obj, ViewPairBatch):
        cols = obj.flat().reshape(-1, obj.dim)
    elif isinstance(obj, FeatureMap):
        cols = obj.columns()
    else:
        cols = np.atleast_2d(np.asarray(obj))
    return np.flatnonzero(~np.any(cols != 0.0, axis=-1))


def cosine_sim(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError(f"cosine_sim needs equal-length vectors, got {x.shape} and {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInputError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def gaussian_potential(x, y, t: float = 2.0) -> float:
    """``exp(-t * ||x - y||^2)``. The conventional uniformity kernel uses t = 2."""
    if not t > 0:
        raise InvalidParameterError(f"kernel sharpness t must be > 0, got {t}")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-t * np.dot(diff, diff)))


def pairwise_cos_matrix(a: FeatureMap, b: FeatureMap) -> np.ndarray:
    """``(HW_a, HW_b)`` matrix of cosine similarities between spatial vectors."""
    if a.dim != b.dim:
        raise InvalidInputError(f"feature dimension mismatch: {a.dim} vs {b.dim}")
    ua = _normalize_rows(a.columns(), DEFAULT_EPS)
    ub = _normalize_rows(b.columns(), DEFAULT_EPS)
    return np.clip(ua @ ub.T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# DCLF v1 dumps

PathLike = Union[str, Path]


def encode_dclf(arr) -> bytes:
    """Serialize an ``(N, V, d, H, W)`` array to DCLF v1 bytes."""
    arr = np.asarray(arr)
    if arr.ndim != 5:
        raise InvalidInputError(f"DCLF payload must be (N, V, d, H, W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("refusing to dump non-finite values")
    header = _DCLF_HEADER.pack(DCLF_MAGIC, DCLF_VERSION, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_dclf(buf: bytes) -> np.ndarray:
    """Parse DCLF v1 bytes into a float64 ``(N, V, d, H, W)`` array."""
    if len(buf) < 4 or buf[:4] != DCLF_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {DCLF_MAGIC!r}", offset=0)
    if len(buf) < _DCLF_HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, version, *shape = _DCLF_HEADER.unpack_from(buf, 0)
    if version != DCLF_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    count = int(np.prod(shape, dtype=np.int64))
    expected = _DCLF_HEADER.size + 4 * count
    if len(buf) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {len(buf)}", offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload", offset=expected)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_DCLF_HEADER.size)
    return data.astype(np.float64).reshape(shape)


def write_dclf(path: PathLike, arr) -> None:
    Path(path).write_bytes(encode_dclf(arr))


def read_dclf(path: PathLike) -> np.ndarray:
    return decode_dclf(Path(path).read_bytes())


def batch_from_dump(arr: np.ndarray) -> ViewPairBatch:
    if arr.shape[1] != 2:
        raise InvalidInputError(f"pair batches need V = 2, dump has V = {arr.shape[1]}")
    return ViewPairBatch(arr)


def maps_from_dump(arr: np.ndarray, view: int = 0) -> list:
    return [FeatureMap(arr[i, view]) for i in range(arr.shape[0])]


def pool_instances(maps: Iterable[FeatureMap], epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Global-average-pool each map and renormalize; returns ``(N, d)``."""
    pooled = np.stack([m.columns().mean(axis=0) for m in maps])
    return _normalize_rows(pooled, epsilon)
