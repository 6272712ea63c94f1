"""Spherical reference lattices and geolocation distance vectors.

A language's coordinate is encoded as the vector of great-circle distances
to a fixed set of near-uniform reference points on the unit sphere,
normalized by pi so every entry lies in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class GeoVecError(ValueError):
    pass


class ManifestParseError(GeoVecError):
    pass


@dataclass(frozen=True)
class GeoCoordinate:
    latitude_deg: float
    longitude_deg: float

    def __post_init__(self):
        if not (-90.0 <= self.latitude_deg <= 90.0):
            raise GeoVecError(f"latitude {self.latitude_deg} outside [-90, 90]")
        if not (-180.0 < self.longitude_deg <= 180.0):
            raise GeoVecError(f"longitude {self.longitude_deg} outside (-180, 180]")

    def to_unit_vector(self) -> np.ndarray:
        lat = math.radians(self.latitude_deg)
        lon = math.radians(self.longitude_deg)
        return np.array(
            [
                math.cos(lat) * math.cos(lon),
                math.cos(lat) * math.sin(lon),
                math.sin(lat),
            ]
        )

    @staticmethod
    def from_unit_vector(v) -> "GeoCoordinate":
        x, y, z = (float(c) for c in v)
        lat = math.degrees(math.asin(max(-1.0, min(1.0, z))))
        lon = math.degrees(math.atan2(y, x))
        if lon <= -180.0:
            lon += 360.0
        return GeoCoordinate(lat, lon)


@dataclass(frozen=True)
class ReferenceLattice:
    points: np.ndarray  # (count, 3) unit vectors

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise GeoVecError(f"lattice points must be (count, 3), got {pts.shape}")
        norms = np.linalg.norm(pts, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise GeoVecError("lattice points must be unit vectors (tol 1e-12)")
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def coordinates(self) -> list[GeoCoordinate]:
        return [GeoCoordinate.from_unit_vector(p) for p in self.points]


def fibonacci_lattice(count: int) -> ReferenceLattice:
    """Spherical Fibonacci lattice with the offset z-form, pole-free."""
    if count < 1:
        raise GeoVecError(f"lattice count must be >= 1, got {count}")
    i = np.arange(count, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / count
    phi = i * GOLDEN_ANGLE
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    # renormalize against rounding so the unit-norm invariant holds exactly
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return ReferenceLattice(pts)


def great_circle_distance(a: GeoCoordinate, b: GeoCoordinate) -> float:
    """Arc angle in radians between two coordinates (haversine form)."""
    lat1 = math.radians(a.latitude_deg)
    lat2 = math.radians(b.latitude_deg)
    dlat = lat2 - lat1
    dlon = math.radians(b.longitude_deg) - math.radians(a.longitude_deg)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class GeoVector:
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise GeoVecError(f"geo vector must be 1-D, got shape {vals.shape}")
        if np.any(vals < 0.0) or np.any(vals > 1.0):
            raise GeoVecError("geo vector values must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]


def geo_vector(coord: GeoCoordinate, lattice: ReferenceLattice) -> GeoVector:
    """Normalized great-circle distances from coord to every lattice point."""
    u = coord.to_unit_vector()
    dots = lattice.points @ u
    # haversine via chord length: stable near 0, exact pi at the antipode
    chord = np.linalg.norm(lattice.points - u[None, :], axis=1)
    ang = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    ang = np.where(dots <= -1.0, math.pi, ang)
    return GeoVector(np.clip(ang / math.pi, 0.0, 1.0))


@dataclass
class LanguageGeoTable:
    lattice: ReferenceLattice
    coords: dict[str, GeoCoordinate] = field(default_factory=dict)
    vectors: dict[str, GeoVector] = field(default_factory=dict)

    def add(self, code: str, coord: GeoCoordinate) -> None:
        if code in self.coords:
            raise GeoVecError(f"duplicate language code {code!r}")
        self.coords[code] = coord
        self.vectors[code] = geo_vector(coord, self.lattice)

    def __contains__(self, code: str) -> bool:
        return code in self.coords

    def __len__(self) -> int:
        return len(self.coords)

    def codes(self) -> list[str]:
        return sorted(self.coords)

    def vector(self, code: str) -> GeoVector:
        return self.vectors[code]

    @property
    def dim(self) -> int:
        return self.lattice.count


def load_language_geolocations(path, lattice: ReferenceLattice) -> LanguageGeoTable:
    """Load a `code,lat,lon` table; `#` starts a comment line."""
    table = LanguageGeoTable(lattice)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ManifestParseError(f"{path}:{lineno}: expected 'code,lat,lon', got {raw!r}")
            code, lat_s, lon_s = parts
            try:
                lat, lon = float(lat_s), float(lon_s)
            except ValueError as exc:
                raise ManifestParseError(f"{path}:{lineno}: {exc}") from exc
            try:
                coord = GeoCoordinate(lat, lon)
            except GeoVecError as exc:
                raise ManifestParseError(f"{path}:{lineno}: {exc}") from exc
            if code in table:
                raise GeoVecError(f"{path}:{lineno}: duplicate language code {code!r}")
            table.add(code, coord)
    return table
