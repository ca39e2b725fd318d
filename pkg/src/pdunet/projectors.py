"""Ray-driven forward projection, its exact adjoint, and filtered back-projection.

Image convention: array ``img[i, j]`` is the pixel centred at
``x = j - (N - 1) / 2``, ``y = i - (N - 1) / 2``. A parallel ray at angle ``s``
and detector offset ``t`` is the line ``{t * (cos s, sin s) + l * (-sin s, cos s)}``.
A fan ray at gantry angle ``b`` starts at ``-R_s * (-sin b, cos b)`` and ends on a
flat detector through ``R_d * (-sin b, cos b)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .geometry import FanGeometry, Geometry, ParallelGeometry

# production ray marching step in pixels
RAY_STEP = 0.5
# above this many estimated matrix entries the projector recomputes weights per call
MATERIALIZE_LIMIT = 3e7
_CHUNK_ENTRIES = 4_000_000


class TruncationWarning(UserWarning):
    """Rays of the geometry do not cover the image's inscribed circle."""


class DimensionError(ValueError):
    """Array shape does not match the geometry."""


@dataclass
class Sinogram:
    """Projection data ``[n_angles, n_detectors]`` (optionally with leading batch axes)."""

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.data = np.asarray(self.data)
        expected = (self.geometry.n_angles, self.geometry.n_detectors)
        if self.data.shape[-2:] != expected:
            raise DimensionError(f"sinogram shape {self.data.shape} does not match geometry {expected}")

    @property
    def n_angles(self) -> int:
        return self.geometry.n_angles

    def copy(self) -> "Sinogram":
        return Sinogram(self.data.copy(), self.geometry)


def ray_lines(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Closest-to-isocentre points and unit directions of every ray, each ``[A, D, 2]``."""
    s = geom.angles[:, None]
    u = geom.detector_positions[None, :]
    theta = np.stack(np.broadcast_arrays(-np.sin(s), np.cos(s)), axis=-1)
    theta_perp = np.stack(np.broadcast_arrays(np.cos(s), np.sin(s)), axis=-1)
    if isinstance(geom, ParallelGeometry):
        origin = u[..., None] * theta_perp
        direction = np.broadcast_to(theta, origin.shape).copy()
        return origin, direction
    src = -geom.source_iso_dist * theta
    det = geom.detector_iso_dist * theta + u[..., None] * theta_perp
    d = det - src
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origin = src - np.sum(src * d, axis=-1, keepdims=True) * d
    return origin, d


def check_coverage(geom: Geometry, size: int) -> bool:
    radius = size / 2
    half_span = geom.n_detectors * geom.detector_spacing / 2
    if isinstance(geom, FanGeometry):
        reach = geom.source_iso_dist * math.sin(geom.fan_half_angle)
    else:
        reach = half_span
    if reach < radius:
        warnings.warn(
            f"geometry covers radius {reach:.1f} px but the image needs {radius:.1f} px",
            TruncationWarning,
            stacklevel=3,
        )
        return False
    return True


def _linear_chunk(geom: Geometry, size: int, a0: int, a1: int, origin, direction):
    """Bilinear sampling weights for angles ``a0:a1``; returns ``(idx, w)`` of shape ``[a, D, S]``."""
    half = size / math.sqrt(2) + 1.0
    n_half = int(math.ceil(half / RAY_STEP))
    ls = np.arange(-n_half, n_half + 1) * RAY_STEP
    o = origin[a0:a1, :, None, :]
    d = direction[a0:a1, :, None, :]
    pos = o + ls[:, None] * d
    c = (size - 1) / 2
    cx = pos[..., 0] + c
    cy = pos[..., 1] + c
    j0 = np.floor(cx)
    i0 = np.floor(cy)
    fx = cx - j0
    fy = cy - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)
    idx_parts = []
    w_parts = []
    for di, dj, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ii = i0 + di
        jj = j0 + dj
        ok = (ii >= 0) & (ii < size) & (jj >= 0) & (jj < size)
        idx_parts.append(np.where(ok, ii * size + jj, 0))
        w_parts.append(np.where(ok, w * RAY_STEP, 0.0))
    idx = np.concatenate(idx_parts, axis=-1)
    w = np.concatenate(w_parts, axis=-1)
    return idx, w


def _siddon_ray(p, d, size):
    """Exact pixel intersection lengths of the line ``p + l d`` with the image grid."""
    lo, hi = -size / 2, size / 2
    tmin, tmax = -np.inf, np.inf
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if p[k] <= lo or p[k] >= hi:
                return np.empty(0, np.int64), np.empty(0)
            continue
        t1 = (lo - p[k]) / d[k]
        t2 = (hi - p[k]) / d[k]
        tmin = max(tmin, min(t1, t2))
        tmax = min(tmax, max(t1, t2))
    if tmax <= tmin:
        return np.empty(0, np.int64), np.empty(0)
    planes = np.arange(size + 1) - size / 2
    ts = [np.array([tmin, tmax])]
    for k in range(2):
        if abs(d[k]) >= 1e-15:
            t = (planes - p[k]) / d[k]
            ts.append(t[(t > tmin) & (t < tmax)])
    t = np.unique(np.concatenate(ts))
    seg = np.diff(t)
    mid = (t[:-1] + t[1:]) / 2
    keep = seg > 1e-12
    seg, mid = seg[keep], mid[keep]
    x = p[0] + mid * d[0]
    y = p[1] + mid * d[1]
    j = np.clip(np.floor(x + size / 2).astype(np.int64), 0, size - 1)
    i = np.clip(np.floor(y + size / 2).astype(np.int64), 0, size - 1)
    return i * size + j, seg


class Projector:
    """Linear operator ``image[N, N] -> sinogram[A, D]`` and its adjoint.

    ``mode="linear"`` marches each ray in steps of 0.5 px with bilinear
    interpolation; ``mode="exact"`` uses exact ray/pixel intersection lengths.
    Forward and adjoint share one set of weights, so they are adjoint to
    rounding error.
    """

    def __init__(self, geom: Geometry, size: int, mode: str = "linear"):
        if mode not in ("linear", "exact"):
            raise ValueError(f"unknown projector mode {mode!r}")
        self.geom = geom
        self.size = size
        self.mode = mode
        check_coverage(geom, size)
        self._origin, self._direction = ray_lines(geom)
        self._matrix = None
        self._matrix32 = None
        n_samples = 4 * (2 * math.ceil((size / math.sqrt(2) + 1) / RAY_STEP) + 1)
        self._per_angle = geom.n_detectors * n_samples
        estimate = geom.n_angles * size * size * 4
        if mode == "exact" or estimate <= MATERIALIZE_LIMIT:
            self._matrix = self._build_matrix()

    @property
    def shape(self):
        return (self.geom.n_angles * self.geom.n_detectors, self.size * self.size)

    def _chunks(self):
        step = max(1, _CHUNK_ENTRIES // self._per_angle)
        for a0 in range(0, self.geom.n_angles, step):
            yield a0, min(self.geom.n_angles, a0 + step)

    def _build_matrix(self) -> sp.csr_matrix:
        n_det = self.geom.n_detectors
        if self.mode == "exact":
            rows, cols, vals = [], [], []
            for a in range(self.geom.n_angles):
                for d in range(n_det):
                    idx, seg = _siddon_ray(self._origin[a, d], self._direction[a, d], self.size)
                    rows.append(np.full(idx.size, a * n_det + d))
                    cols.append(idx)
                    vals.append(seg)
            m = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=self.shape
            )
            return m.tocsr()
        blocks = []
        for a0, a1 in self._chunks():
            idx, w = _linear_chunk(self.geom, self.size, a0, a1, self._origin, self._direction)
            rows = np.broadcast_to(np.arange((a1 - a0) * n_det).reshape(a1 - a0, n_det, 1), idx.shape)
            nz = w != 0
            block = sp.coo_matrix(
                (w[nz], (rows[nz], idx[nz])), shape=((a1 - a0) * n_det, self.size * self.size)
            ).tocsr()
            block.sum_duplicates()
            blocks.append(block)
        return sp.vstack(blocks, format="csr")

    def matrix(self, dtype=np.float64) -> sp.csr_matrix:
        if self._matrix is None:
            self._matrix = self._build_matrix()
        if np.dtype(dtype) == np.float32:
            if self._matrix32 is None:
                self._matrix32 = self._matrix.astype(np.float32)
            return self._matrix32
        return self._matrix

    def _check_image(self, img):
        if img.shape[-2:] != (self.size, self.size):
            raise DimensionError(f"image shape {img.shape} does not match size {self.size}")

    def _check_sino(self, sino):
        expected = (self.geom.n_angles, self.geom.n_detectors)
        if sino.shape[-2:] != expected:
            raise DimensionError(f"sinogram shape {sino.shape} does not match geometry {expected}")

    def forward(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img)
        self._check_image(img)
        dtype = np.float32 if img.dtype == np.float32 else np.float64
        lead = img.shape[:-2]
        flat = img.reshape(-1, self.size * self.size).astype(dtype, copy=False)
        out_shape = lead + (self.geom.n_angles, self.geom.n_detectors)
        if self._matrix is not None:
            out = (self.matrix(dtype) @ flat.T).T
            return np.ascontiguousarray(out).reshape(out_shape)
        out = np.empty((flat.shape[0], self.geom.n_angles, self.geom.n_detectors), dtype)
        for a0, a1 in self._chunks():
            idx, w = _linear_chunk(self.geom, self.size, a0, a1, self._origin, self._direction)
            w = w.astype(dtype, copy=False)
            for b in range(flat.shape[0]):
                out[b, a0:a1] = np.einsum("ads,ads->ad", flat[b][idx], w)
        return out.reshape(out_shape)

    def adjoint(self, sino: np.ndarray) -> np.ndarray:
        sino = np.asarray(sino)
        self._check_sino(sino)
        dtype = np.float32 if sino.dtype == np.float32 else np.float64
        lead = sino.shape[:-2]
        flat = sino.reshape(-1, self.geom.n_angles * self.geom.n_detectors).astype(dtype, copy=False)
        out_shape = lead + (self.size, self.size)
        if self._matrix is not None:
            out = (self.matrix(dtype).T @ flat.T).T
            return np.ascontiguousarray(out).reshape(out_shape)
        n_det = self.geom.n_detectors
        out = np.zeros((flat.shape[0], self.size * self.size), np.float64)
        for a0, a1 in self._chunks():
            idx, w = _linear_chunk(self.geom, self.size, a0, a1, self._origin, self._direction)
            for b in range(flat.shape[0]):
                y = flat[b, a0 * n_det : a1 * n_det].reshape(a1 - a0, n_det, 1)
                out[b] += np.bincount(idx.ravel(), weights=(w * y).ravel(), minlength=self.size**2)
        return out.astype(dtype, copy=False).reshape(out_shape)

    def opnorm_sq(self, n_iter: int = 30, seed: int = 0) -> float:
        """Largest eigenvalue of ``A^T A`` by power iteration."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((self.size, self.size))
        lam = 0.0
        for _ in range(n_iter):
            x /= np.linalg.norm(x)
            x = self.adjoint(self.forward(x))
            lam = float(np.linalg.norm(x))
        return lam


@lru_cache(maxsize=16)
def get_projector(geom: Geometry, size: int, mode: str = "linear") -> Projector:
    return Projector(geom, size, mode)


@lru_cache(maxsize=16)
def projector_opnorm_sq(geom: Geometry, size: int) -> float:
    return get_projector(geom, size).opnorm_sq()


def forward_project(img: np.ndarray, geom: Geometry, mode: str = "linear") -> np.ndarray:
    """Discrete line integrals of ``img`` along every ray of ``geom``."""
    img = np.asarray(img)
    return get_projector(geom, img.shape[-1], mode).forward(img)


def back_project(sino, geom: Geometry, out_size: int, mode: str = "linear") -> np.ndarray:
    """Exact adjoint of :func:`forward_project`."""
    data = sino.data if isinstance(sino, Sinogram) else np.asarray(sino)
    return get_projector(geom, out_size, mode).adjoint(data)


# ---------------------------------------------------------------- filtering


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


@dataclass(frozen=True)
class RampFilter:
    """Ram-Lak filter sampled on a padded detector grid.

    The frequency response is the DFT of the band-limited spatial kernel
    ``h[0] = 1/(4 tau^2)``, ``h[k odd] = -1/(pi k tau)^2``, scaled by the
    convolution quadrature weight ``tau``. The zero-frequency response is the
    kernel's truncation tail, ``O(1/length)``; forcing it to exactly 0 biases
    the reconstructed mean downwards.
    """

    length: int
    spacing: float = 1.0
    kind: str = "ram-lak"

    def __post_init__(self):
        if self.kind != "ram-lak":
            raise ValueError(f"unsupported filter kind {self.kind!r}")

    @property
    def frequency_response(self) -> np.ndarray:
        return _ramlak_response(self.length, self.spacing)

    @classmethod
    def for_detectors(cls, n_detectors: int, spacing: float = 1.0) -> "RampFilter":
        return cls(length=_next_pow2(2 * n_detectors), spacing=spacing)


@lru_cache(maxsize=32)
def _ramlak_response(length: int, spacing: float) -> np.ndarray:
    n = np.arange(length)
    k = np.where(n <= length // 2, n, n - length)
    h = np.zeros(length)
    h[0] = 1 / (4 * spacing**2)
    odd = k % 2 == 1
    h[odd] = -1 / (np.pi * k[odd] * spacing) ** 2
    resp = np.real(np.fft.fft(h)) * spacing
    resp.setflags(write=False)
    return resp


def filter_projections(sino, filt: RampFilter, pad: bool = True) -> np.ndarray:
    """Convolve every projection (last axis) with the ramp filter.

    With ``pad=True`` the rows are zero-padded to the filter length (linear
    convolution); with ``pad=False`` the filter length must equal the row length
    and the convolution is circular.
    """
    data = sino.data if isinstance(sino, Sinogram) else np.asarray(sino)
    n = data.shape[-1]
    if filt.length < n:
        raise DimensionError(f"filter length {filt.length} shorter than {n} detectors")
    if not pad and filt.length != n:
        raise DimensionError("circular filtering needs filter length equal to the detector count")
    spec = np.fft.rfft(data, n=filt.length, axis=-1)
    resp = filt.frequency_response[: filt.length // 2 + 1]
    out = np.fft.irfft(spec * resp, n=filt.length, axis=-1)[..., :n]
    return out.astype(data.dtype if data.dtype == np.float32 else np.float64, copy=False)


def _interp_rows(q: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Linear interpolation of rows ``q[..., D]`` at fractional bin positions ``u`` (zero outside)."""
    n = q.shape[-1]
    u0 = np.floor(u).astype(np.int64)
    f = u - u0
    out = np.zeros(q.shape[:-1] + u.shape, dtype=np.float64)
    for off, w in ((0, 1 - f), (1, f)):
        idx = u0 + off
        ok = (idx >= 0) & (idx < n)
        out += np.where(ok, w, 0.0) * q[..., np.clip(idx, 0, n - 1)]
    return out


def fbp(sino, geom: Geometry, out_size: int) -> np.ndarray:
    """Filtered back-projection for parallel or flat-detector fan-beam data.

    Accepts ``[A, D]`` or batched ``[..., A, D]`` arrays (or a :class:`Sinogram`).
    """
    data = sino.data if isinstance(sino, Sinogram) else np.asarray(sino)
    if data.shape[-2:] != (geom.n_angles, geom.n_detectors):
        raise DimensionError(f"sinogram shape {data.shape} does not match geometry")
    out_dtype = np.float32 if data.dtype == np.float32 else np.float64
    data = data.astype(np.float64)
    c = (out_size - 1) / 2
    coords = np.arange(out_size) - c
    x = coords[None, :]
    y = coords[:, None]
    lead = data.shape[:-2]
    out = np.zeros(lead + (out_size, out_size))
    if isinstance(geom, ParallelGeometry):
        tau = geom.detector_spacing
        q = filter_projections(data, RampFilter.for_detectors(geom.n_detectors, tau))
        for a, s in enumerate(geom.angles):
            t = x * math.cos(s) + y * math.sin(s)
            u = t / tau + (geom.n_detectors - 1) / 2
            out += _interp_rows(q[..., a, :], u)
        out *= geom.angle_step
        return out.astype(out_dtype)
    # flat fan detector rescaled to a virtual detector through the isocentre
    D = geom.source_iso_dist
    tau = geom.detector_spacing / geom.magnification
    a_pos = geom.detector_positions / geom.magnification
    weighted = data * (D / np.sqrt(D**2 + a_pos**2))
    q = 0.5 * filter_projections(weighted, RampFilter.for_detectors(geom.n_detectors, tau))
    for a, b in enumerate(geom.angles):
        along = -x * math.sin(b) + y * math.cos(b)
        across = x * math.cos(b) + y * math.sin(b)
        U = (D + along) / D
        a_hit = across / U
        u = a_hit / tau + (geom.n_detectors - 1) / 2
        out += _interp_rows(q[..., a, :], u) / U**2
    out *= geom.angle_step
    return out.astype(out_dtype)
