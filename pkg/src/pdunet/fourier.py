"""Radial k-space <-> parallel-beam sinogram bridge (Fourier slice theorem).

Radial k-space is generated by direct summation of the image's discrete-time
Fourier transform on each spoke, which is exact and affordable at desk scale.
Spoke ``j`` at angle ``phi_j`` samples frequencies ``kappa_m * (cos phi_j, sin phi_j)``
with ``kappa_m = (m - M // 2) / M`` cycles per pixel, so the spoke contains DC
and its 1D inverse DFT lives on detector positions ``n - M // 2``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import ParallelGeometry, SparsityPattern
from .projectors import DimensionError, Sinogram

log = logging.getLogger(__name__)

_CHUNK = 2_000_000


@dataclass
class RadialKSpace:
    data: np.ndarray  # complex [n_spokes, samples_per_spoke]
    spoke_angles: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spoke_angles = np.asarray(self.spoke_angles, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.spoke_angles.size:
            raise DimensionError(
                f"k-space shape {self.data.shape} does not match {self.spoke_angles.size} spoke angles"
            )

    @property
    def n_spokes(self) -> int:
        return self.data.shape[0]

    @property
    def samples_per_spoke(self) -> int:
        return self.data.shape[1]

    @property
    def delta_phi(self) -> float:
        if self.n_spokes > 1:
            return float(self.spoke_angles[1] - self.spoke_angles[0])
        return math.pi

    def sparsify(self, pattern: SparsityPattern) -> "RadialKSpace":
        if pattern.n_angles != self.n_spokes:
            raise DimensionError(f"pattern built for {pattern.n_angles} spokes, k-space has {self.n_spokes}")
        keep = list(pattern.kept_indices)
        return RadialKSpace(self.data[keep], self.spoke_angles[keep])


def spoke_frequencies(samples_per_spoke: int) -> np.ndarray:
    m = samples_per_spoke
    return (np.arange(m) - m // 2) / m


def spoke_angles(n_spokes: int) -> np.ndarray:
    return np.arange(n_spokes) * math.pi / n_spokes


def _pixel_coords(size: int) -> np.ndarray:
    return np.arange(size) - (size - 1) / 2


def _spoke_chunks(n_spokes: int, samples: int, size: int):
    per = max(1, _CHUNK // (samples * size))
    for s0 in range(0, n_spokes, per):
        yield s0, min(n_spokes, s0 + per)


def radial_dtft(img: np.ndarray, angles: np.ndarray, samples_per_spoke: int) -> np.ndarray:
    """``F(k) = sum_{x,y} img[y, x] exp(-2 pi i (kx x + ky y))`` on every spoke sample."""
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[-1]
    kappa = spoke_frequencies(samples_per_spoke)
    c = _pixel_coords(n)
    out = np.empty((angles.size, samples_per_spoke), dtype=np.complex128)
    for s0, s1 in _spoke_chunks(angles.size, samples_per_spoke, n):
        kx = np.cos(angles[s0:s1, None]) * kappa  # [s, m]
        ky = np.sin(angles[s0:s1, None]) * kappa
        ex = np.exp(-2j * np.pi * kx[..., None] * c)  # [s, m, x]
        ey = np.exp(-2j * np.pi * ky[..., None] * c)  # [s, m, y]
        # sum_y ey[s,m,y] * sum_x img[y,x] ex[s,m,x]
        rows = np.einsum("yx,smx->smy", img, ex, optimize=True)
        out[s0:s1] = np.einsum("smy,smy->sm", rows, ey)
    return out


def radial_dtft_adjoint(data: np.ndarray, angles: np.ndarray, size: int) -> np.ndarray:
    """Complex adjoint of :func:`radial_dtft` (returns a complex image)."""
    data = np.asarray(data, dtype=np.complex128)
    m = data.shape[-1]
    kappa = spoke_frequencies(m)
    c = _pixel_coords(size)
    img = np.zeros((size, size), dtype=np.complex128)
    for s0, s1 in _spoke_chunks(angles.size, m, size):
        kx = np.cos(angles[s0:s1, None]) * kappa
        ky = np.sin(angles[s0:s1, None]) * kappa
        ex = np.exp(2j * np.pi * kx[..., None] * c)
        ey = np.exp(2j * np.pi * ky[..., None] * c)
        weighted = data[s0:s1, :, None] * ex  # [s, m, x]
        img += np.einsum("smy,smx->yx", ey, weighted, optimize=True)
    return img


def image_to_radial_kspace(img: np.ndarray, n_spokes: int, samples_per_spoke: int) -> RadialKSpace:
    """Fully sampled equidistant radial k-space (spoke spacing pi / n_spokes) of a real image."""
    img = np.asarray(img)
    if samples_per_spoke < img.shape[-1]:
        raise DimensionError(f"need at least {img.shape[-1]} samples per spoke, got {samples_per_spoke}")
    angles = spoke_angles(n_spokes)
    return RadialKSpace(radial_dtft(img, angles, samples_per_spoke), angles)


def alignment_shift(samples_per_spoke: int, target_detectors: int) -> float:
    """Sub-pixel offset between the iDFT grid ``n - M//2`` and the centred detector grid."""
    return (samples_per_spoke // 2 - (target_detectors - 1) / 2) % 1.0


def spokes_to_sinogram(k: RadialKSpace, target_detectors: int, return_imag: bool = False):
    """Per-spoke 1D inverse DFT, sinc shift onto the detector grid, central crop.

    The shift is a linear phase applied before the inverse transform; it is half
    a detector pixel whenever the spoke length and detector count put bin
    centres on different lattices.
    """
    m = k.samples_per_spoke
    if target_detectors > m:
        raise DimensionError(f"cannot crop {target_detectors} detectors from {m} samples")
    delta = alignment_shift(m, target_detectors)
    kappa = spoke_frequencies(m)
    spec = k.data * np.exp(2j * np.pi * kappa * delta)
    full = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(spec, axes=-1), axis=-1), axes=-1)
    # full[n] sits at t = n - m//2 + delta; target bin i sits at i - (target - 1)/2
    start = int(round(m // 2 - (target_detectors - 1) / 2 - delta))
    crop = full[:, start : start + target_detectors]
    real_max = float(np.max(np.abs(crop.real))) if crop.size else 0.0
    imag_max = float(np.max(np.abs(crop.imag))) if crop.size else 0.0
    if real_max > 0 and imag_max > 1e-3 * real_max:
        log.debug("imaginary residue %.3g exceeds 1e-3 of real max %.3g", imag_max, real_max)
    geom = ParallelGeometry(
        n_angles=k.n_spokes,
        angle_step=k.delta_phi,
        n_detectors=target_detectors,
        detector_spacing=1.0,
        angle_start=float(k.spoke_angles[0]) if k.n_spokes else 0.0,
    )
    sino = Sinogram(np.ascontiguousarray(crop.real), geom)
    if return_imag:
        return sino, crop.imag
    return sino


def density_weights(samples_per_spoke: int, n_spokes: int) -> np.ndarray:
    """Ramp ``|k| dk dphi`` quadrature weights; the DC sample gets half the first nonzero weight."""
    kappa = spoke_frequencies(samples_per_spoke)
    dk = 1.0 / samples_per_spoke
    w = np.abs(kappa) * dk * (math.pi / n_spokes)
    zero = kappa == 0
    if zero.any():
        w[zero] = 0.5 * np.min(w[~zero])
    return w


def adjoint_nufft_recon(k: RadialKSpace, out_size: int) -> np.ndarray:
    """Density-compensated adjoint reconstruction (real part)."""
    w = density_weights(k.samples_per_spoke, k.n_spokes)
    return radial_dtft_adjoint(k.data * w, k.spoke_angles, out_size).real
