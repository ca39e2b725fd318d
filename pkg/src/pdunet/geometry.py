"""Acquisition geometries, angle grids and sparsity patterns.

All lengths are in pixel units and all angles in radians. Detector bin ``i``
is centred at ``(i - (n_detectors - 1) / 2) * detector_spacing``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np


class GeometryError(ValueError):
    """Invalid geometry parameters."""


class SparsityError(ValueError):
    """Invalid sparsity factor."""


@dataclass(frozen=True)
class ParallelGeometry:
    n_angles: int
    angle_step: float
    n_detectors: int
    detector_spacing: float = 1.0
    angle_start: float = 0.0

    def __post_init__(self):
        if self.n_angles < 1:
            raise GeometryError(f"n_angles must be >= 1, got {self.n_angles}")
        if self.n_detectors < 1:
            raise GeometryError(f"n_detectors must be >= 1, got {self.n_detectors}")
        if not self.detector_spacing > 0:
            raise GeometryError("detector_spacing must be positive")

    kind = "parallel"

    @property
    def angles(self) -> np.ndarray:
        return self.angle_start + self.angle_step * np.arange(self.n_angles)

    @property
    def detector_positions(self) -> np.ndarray:
        return detector_positions(self.n_detectors, self.detector_spacing)

    @property
    def full_range(self) -> float:
        return math.pi

    def with_angles(self, n_angles: int, angle_step: float, angle_start: float | None = None):
        start = self.angle_start if angle_start is None else angle_start
        return replace(self, n_angles=n_angles, angle_step=angle_step, angle_start=start)

    def to_dict(self) -> dict:
        return {
            "type": "parallel",
            "n_angles": self.n_angles,
            "angle_step_deg": math.degrees(self.angle_step),
            "angle_start_deg": math.degrees(self.angle_start),
            "n_detectors": self.n_detectors,
            "detector_spacing": self.detector_spacing,
        }


@dataclass(frozen=True)
class FanGeometry:
    n_angles: int
    angle_step: float
    n_detectors: int
    detector_spacing: float
    source_iso_dist: float
    detector_iso_dist: float
    angle_start: float = 0.0

    kind = "fan"

    def __post_init__(self):
        if self.n_angles < 1:
            raise GeometryError(f"n_angles must be >= 1, got {self.n_angles}")
        if self.n_detectors < 1:
            raise GeometryError(f"n_detectors must be >= 1, got {self.n_detectors}")
        if not self.detector_spacing > 0:
            raise GeometryError("detector_spacing must be positive")
        if not self.source_iso_dist > 0:
            raise GeometryError("source_iso_dist must be positive")
        if self.detector_iso_dist < 0:
            raise GeometryError("detector_iso_dist must be non-negative")

    @property
    def angles(self) -> np.ndarray:
        return self.angle_start + self.angle_step * np.arange(self.n_angles)

    @property
    def detector_positions(self) -> np.ndarray:
        return detector_positions(self.n_detectors, self.detector_spacing)

    @property
    def source_detector_dist(self) -> float:
        return self.source_iso_dist + self.detector_iso_dist

    @property
    def fan_half_angle(self) -> float:
        half_width = self.n_detectors * self.detector_spacing / 2
        return math.atan(half_width / self.source_detector_dist)

    @property
    def magnification(self) -> float:
        return self.source_detector_dist / self.source_iso_dist

    @property
    def full_range(self) -> float:
        return 2 * math.pi

    def with_angles(self, n_angles: int, angle_step: float, angle_start: float | None = None):
        start = self.angle_start if angle_start is None else angle_start
        return replace(self, n_angles=n_angles, angle_step=angle_step, angle_start=start)

    def to_dict(self) -> dict:
        return {
            "type": "fan",
            "n_angles": self.n_angles,
            "angle_step_deg": math.degrees(self.angle_step),
            "angle_start_deg": math.degrees(self.angle_start),
            "n_detectors": self.n_detectors,
            "detector_spacing": self.detector_spacing,
            "source_iso_dist": self.source_iso_dist,
            "detector_iso_dist": self.detector_iso_dist,
        }


Geometry = Union[ParallelGeometry, FanGeometry]


def detector_positions(n_detectors: int, spacing: float = 1.0) -> np.ndarray:
    return (np.arange(n_detectors) - (n_detectors - 1) / 2) * spacing


def geometry_from_dict(d: dict) -> Geometry:
    try:
        kind = d["type"]
        common = dict(
            n_angles=int(d["n_angles"]),
            angle_step=math.radians(float(d["angle_step_deg"])),
            angle_start=math.radians(float(d.get("angle_start_deg", 0.0))),
            n_detectors=int(d["n_detectors"]),
            detector_spacing=float(d["detector_spacing"]),
        )
        if kind == "parallel":
            return ParallelGeometry(**common)
        if kind == "fan":
            return FanGeometry(
                source_iso_dist=float(d["source_iso_dist"]),
                detector_iso_dist=float(d["detector_iso_dist"]),
                **common,
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise GeometryError(f"malformed geometry description: {exc}") from exc
    raise GeometryError(f"unknown geometry type {kind!r}")


def geometry_to_json(geom: Geometry) -> str:
    return json.dumps(geom.to_dict(), indent=2)


def geometry_from_json(text: str) -> Geometry:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeometryError(f"invalid geometry JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise GeometryError("geometry JSON must be an object")
    return geometry_from_dict(d)


def make_fan_default(image_size: int = 256, **overrides) -> FanGeometry:
    """Fan-beam geometry of the CT experiments, scaled to ``image_size``.

    At 256 px: 360 views at 1 deg, 511 detectors of 1 px, source-iso 400 px,
    detector-iso 150 px. Other sizes scale detector count and distances by
    ``image_size / 256`` so the fan angle is preserved.
    """
    s = image_size / 256
    params = dict(
        n_angles=360,
        angle_step=math.radians(1.0),
        n_detectors=511 if image_size == 256 else int(round(511 * s)),
        detector_spacing=1.0,
        source_iso_dist=400.0 * s,
        detector_iso_dist=150.0 * s,
    )
    params.update(overrides)
    return FanGeometry(**params)


def parallel_detector_count(image_size: int) -> int:
    # smallest odd count whose span covers the image diagonal
    n = math.ceil(image_size * math.sqrt(2))
    return n if n % 2 else n + 1


def make_parallel_default(image_size: int = 256, **overrides) -> ParallelGeometry:
    """180 views at 1 deg with enough detectors to cover the image diagonal (363 at 256 px)."""
    params = dict(
        n_angles=180,
        angle_step=math.radians(1.0),
        n_detectors=parallel_detector_count(image_size),
        detector_spacing=1.0,
    )
    params.update(overrides)
    return ParallelGeometry(**params)


def make_radial_geometry(n_spokes: int, n_detectors: int) -> ParallelGeometry:
    """Parallel geometry equivalent to ``n_spokes`` equidistant radial spokes (step pi/n)."""
    return ParallelGeometry(n_angles=n_spokes, angle_step=math.pi / n_spokes, n_detectors=n_detectors)


@dataclass(frozen=True)
class SparsityPattern:
    factor: int
    n_angles: int
    kept_indices: tuple = field(repr=False)

    def __len__(self):
        return len(self.kept_indices)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_angles, dtype=bool)
        m[list(self.kept_indices)] = True
        return m


def sparsify_indices(n_angles: int, factor: int) -> SparsityPattern:
    """Keep every ``factor``-th angle starting at index 0."""
    if factor < 1 or factor > n_angles:
        raise SparsityError(f"sparsity factor must lie in [1, {n_angles}], got {factor}")
    return SparsityPattern(factor=factor, n_angles=n_angles, kept_indices=tuple(range(0, n_angles, factor)))


def sparse_geometry(geom: Geometry, pattern: SparsityPattern) -> Geometry:
    if pattern.n_angles != geom.n_angles:
        raise SparsityError(
            f"pattern built for {pattern.n_angles} angles, geometry has {geom.n_angles}"
        )
    return geom.with_angles(len(pattern), geom.angle_step * pattern.factor)
