"""Sparsification, angular upsampling and the sinogram/image normalisation protocol."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SparsityPattern, sparse_geometry
from .projectors import DimensionError, Sinogram


class DegenerateInputError(ValueError):
    """Normalisation statistics are undefined (constant data or non-positive scale)."""


@dataclass(frozen=True)
class NormStats:
    mu_s: float
    sigma_s: float
    p99: float = 1.0

    def __post_init__(self):
        if not self.sigma_s > 0:
            raise DegenerateInputError(f"sigma_s must be positive, got {self.sigma_s}")
        if not self.p99 > 0:
            raise DegenerateInputError(f"p99 must be positive, got {self.p99}")

    def to_dict(self) -> dict:
        return {"mu_s": self.mu_s, "sigma_s": self.sigma_s, "p99": self.p99}


def sparsify(sino: Sinogram, pattern: SparsityPattern) -> Sinogram:
    if pattern.n_angles != sino.n_angles:
        raise DimensionError(f"pattern built for {pattern.n_angles} angles, sinogram has {sino.n_angles}")
    rows = sino.data[..., list(pattern.kept_indices), :]
    return Sinogram(np.ascontiguousarray(rows), sparse_geometry(sino.geometry, pattern))


def _infer_factor(sino: Sinogram, target_angles: int) -> int:
    full_step = sino.geometry.full_range / target_angles
    return max(1, int(round(sino.geometry.angle_step / full_step)))


def upsample_bilinear(sino: Sinogram, target_angles: int, factor: int | None = None) -> Sinogram:
    """Linear interpolation along the angle axis back onto the full angle grid.

    Row ``r`` of the sparse input sits at full-grid index ``r * factor``. Data
    covering a full turn wraps periodically; half-turn data clamps past the last
    kept row.
    """
    n = sino.n_angles
    if target_angles < n:
        raise DimensionError(f"target_angles {target_angles} is smaller than {n}")
    if factor is None:
        factor = _infer_factor(sino, target_angles)
    geom = sino.geometry
    full_step = geom.angle_step / factor
    full_geom = geom.with_angles(target_angles, full_step)
    periodic = math.isclose(target_angles * full_step, 2 * math.pi, rel_tol=1e-9)
    pos = np.arange(target_angles) / factor  # fractional index into sparse rows
    data = sino.data
    if periodic:
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        hi = (lo + 1) % n
        gap = np.where(lo == n - 1, (target_angles - (n - 1) * factor) / factor, 1.0)
        frac = frac / gap
        lo = lo % n
    else:
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
        hi = np.minimum(lo + 1, n - 1)
        frac = np.where(hi == lo, 0.0, pos - lo)
    frac = frac[:, None]
    out = (1 - frac) * data[..., lo, :] + frac * data[..., hi, :]
    # kept rows are copied verbatim
    kept = np.arange(0, target_angles, factor)
    out[..., kept, :] = data[..., kept // factor, :]
    return Sinogram(out.astype(data.dtype, copy=False), full_geom)


def scatter_rows(sino: Sinogram, pattern: SparsityPattern, full_geom) -> tuple[np.ndarray, np.ndarray]:
    """Place sparse rows into a zero full-grid array; returns ``(data, row_mask)``."""
    full = np.zeros(sino.data.shape[:-2] + (full_geom.n_angles, full_geom.n_detectors), sino.data.dtype)
    full[..., list(pattern.kept_indices), :] = sino.data
    return full, pattern.mask


def znorm_stats(data: np.ndarray) -> tuple[float, float]:
    mu = float(np.mean(data))
    sigma = float(np.std(data))
    if not sigma > 0:
        raise DegenerateInputError("sinogram is constant; z-score is undefined")
    return mu, sigma


def znorm(sino: Sinogram) -> tuple[Sinogram, NormStats]:
    mu, sigma = znorm_stats(sino.data)
    return Sinogram((sino.data - mu) / sigma, sino.geometry), NormStats(mu, sigma)


def denorm(sino_n: Sinogram, stats: NormStats) -> Sinogram:
    return Sinogram(sino_n.data * stats.sigma_s + stats.mu_s, sino_n.geometry)


def image_norm(img: np.ndarray, p99: float) -> np.ndarray:
    if not p99 > 0:
        raise DegenerateInputError(f"p99 must be positive, got {p99}")
    return np.asarray(img) / p99


def image_denorm(img: np.ndarray, p99: float) -> np.ndarray:
    return np.asarray(img) * p99


def corpus_percentile(images, q: float = 99.0) -> float:
    """Percentile of all pixel values of a corpus (linear interpolation between order statistics)."""
    flat = np.concatenate([np.asarray(im, dtype=np.float64).ravel() for im in images])
    value = float(np.percentile(flat, q, method="linear"))
    if not value > 0:
        raise DegenerateInputError(f"{q}th percentile of the corpus is {value}")
    return value


@dataclass
class NormCounter:
    """Tally of normalisation calls made during one model forward pass."""

    counts: dict = field(default_factory=dict)

    def hit(self, key: str, n: int = 1):
        self.counts[key] = self.counts.get(key, 0) + n

    def __getitem__(self, key):
        return self.counts.get(key, 0)

    def reset(self):
        self.counts.clear()
