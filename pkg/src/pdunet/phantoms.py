"""Ellipse phantoms: the modified Shepp-Logan head and seeded random variants."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# intensity, semi-axis a, semi-axis b, centre x, centre y, rotation (deg); unit-disk coordinates
MODIFIED_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    n_ellipses: int = 8
    intensity_range: tuple = (0.0, 1.0)
    size: int = 64
    supersample: int = 2


def ellipse_coords(size: int, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Unit-disk coordinates (x right, y up) of the (sub)pixel centres."""
    n = size * supersample
    c = (np.arange(n) + 0.5) / n * 2 - 1
    return c[None, :], -c[:, None]


def render_ellipses(ellipses, size: int, supersample: int = 1, clip=None) -> np.ndarray:
    x, y = ellipse_coords(size, supersample)
    img = np.zeros((size * supersample, size * supersample))
    for amp, a, b, x0, y0, phi in ellipses:
        p = np.deg2rad(phi)
        xr = (x - x0) * np.cos(p) + (y - y0) * np.sin(p)
        yr = -(x - x0) * np.sin(p) + (y - y0) * np.cos(p)
        img += amp * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    if clip is not None:
        img = np.clip(img, *clip)
    if supersample > 1:
        img = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return img


def shepp_logan(size: int = 256, supersample: int = 1) -> np.ndarray:
    return render_ellipses(MODIFIED_SHEPP_LOGAN, size, supersample)


def random_ellipses(spec: PhantomSpec) -> list[tuple]:
    rng = np.random.default_rng(spec.seed)
    if spec.n_ellipses == 0:
        return []
    lo, hi = spec.intensity_range
    span = hi - lo
    # body outline, then interior structures with signed contrast
    body = (
        lo + span * rng.uniform(0.5, 0.8),
        rng.uniform(0.7, 0.9),
        rng.uniform(0.75, 0.95),
        rng.uniform(-0.04, 0.04),
        rng.uniform(-0.04, 0.04),
        rng.uniform(-30, 30),
    )
    out = [body]
    for _ in range(spec.n_ellipses - 1):
        r = np.sqrt(rng.uniform(0, 1)) * 0.5
        t = rng.uniform(0, 2 * np.pi)
        out.append(
            (
                span * rng.uniform(-0.35, 0.45),
                rng.uniform(0.04, 0.3),
                rng.uniform(0.04, 0.3),
                r * np.cos(t),
                r * np.sin(t),
                rng.uniform(0, 180),
            )
        )
    return out


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Sum of random rotated ellipses, deterministic in ``spec.seed``, clipped to the intensity range."""
    if spec.n_ellipses == 0:
        return np.zeros((spec.size, spec.size))
    return render_ellipses(random_ellipses(spec), spec.size, spec.supersample, clip=spec.intensity_range)
