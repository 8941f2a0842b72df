"""Satellite catalog ingestion and field-of-view geometry.

Parses standard two-line element (TLE) sets and computes, for a ground
terminal, which satellites are above an elevation mask at a given instant,
with topocentric azimuth / elevation / range.

Propagation is deliberately simple: circular two-body motion (eccentricity
and J2 ignored), with the orbit radius derived from the mean motion via
Kepler's third law and an inertial-to-earth-fixed rotation by the Greenwich
sidereal angle. That keeps every quantity the terminal model needs (who is
overhead, how far away) well inside a few-percent accuracy budget without
dragging in a full perturbation model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

MU_EARTH_KM3_S2 = 398600.4418
EARTH_RADIUS_KM = 6378.137
SECONDS_PER_DAY = 86400.0

DEFAULT_ELEVATION_MASK_DEG = 25.0
MAX_EPHEMERIS_AGE_DAYS = 7.0

_J2000 = datetime(2000, 1, 1, 12, 0, 0, tzinfo=timezone.utc)


class MalformedTle(ValueError):
    """Input does not follow the fixed-column TLE layout."""


class ChecksumMismatch(MalformedTle):
    """A TLE line failed its modulo-10 checksum."""


class StaleEphemeris(ValueError):
    """Requested time is too far from the element-set epoch."""


@dataclass(frozen=True)
class TleRecord:
    name: str
    inclination_deg: float
    raan_deg: float
    eccentricity: float
    arg_perigee_deg: float
    mean_anomaly_deg: float
    mean_motion_rev_per_day: float
    epoch: datetime

    def __post_init__(self):
        if not 0.0 <= self.inclination_deg <= 180.0:
            raise ValueError(f"inclination out of range: {self.inclination_deg}")
        if self.mean_motion_rev_per_day <= 0.0:
            raise ValueError("mean motion must be positive")
        if not 0.0 <= self.eccentricity < 1.0:
            raise ValueError(f"eccentricity out of range: {self.eccentricity}")

    @property
    def semi_major_axis_km(self) -> float:
        n = self.mean_motion_rev_per_day * 2.0 * math.pi / SECONDS_PER_DAY
        return (MU_EARTH_KM3_S2 / (n * n)) ** (1.0 / 3.0)

    @property
    def period_s(self) -> float:
        return SECONDS_PER_DAY / self.mean_motion_rev_per_day


@dataclass(frozen=True)
class GroundSite:
    latitude_deg: float
    longitude_deg: float
    altitude_m: float = 0.0

    def __post_init__(self):
        if abs(self.latitude_deg) > 90.0:
            raise ValueError(f"latitude out of range: {self.latitude_deg}")
        if abs(self.longitude_deg) > 180.0:
            raise ValueError(f"longitude out of range: {self.longitude_deg}")

    def ecef_km(self) -> np.ndarray:
        """Site position on a spherical earth (radius 6378.137 km)."""
        r = EARTH_RADIUS_KM + self.altitude_m / 1000.0
        lat = math.radians(self.latitude_deg)
        lon = math.radians(self.longitude_deg)
        return np.array([
            r * math.cos(lat) * math.cos(lon),
            r * math.cos(lat) * math.sin(lon),
            r * math.sin(lat),
        ])


@dataclass(frozen=True)
class VisibleSat:
    sat_id: str
    azimuth_deg: float
    elevation_deg: float
    range_km: float


def _tle_checksum(line: str) -> int:
    total = 0
    for ch in line[:68]:
        if ch.isdigit():
            total += int(ch)
        elif ch == "-":
            total += 1
    return total % 10


def _parse_epoch(field: str) -> datetime:
    yy = int(field[:2])
    year = 1900 + yy if yy >= 57 else 2000 + yy
    day_of_year = float(field[2:])
    return datetime(year, 1, 1, tzinfo=timezone.utc) + timedelta(days=day_of_year - 1.0)


def parse_tle(text: str) -> TleRecord:
    """Decode one 2-line (or 3-line, name first) element set.

    Raises MalformedTle on layout violations and ChecksumMismatch when a
    line's modulo-10 checksum digit is wrong.
    """
    lines = [ln.rstrip() for ln in text.splitlines() if ln.strip()]
    if len(lines) == 3:
        name, line1, line2 = lines[0].strip(), lines[1], lines[2]
    elif len(lines) == 2:
        line1, line2 = lines
        name = ""
    else:
        raise MalformedTle(f"expected 2 or 3 lines, got {len(lines)}")

    if len(line1) < 69 or len(line2) < 69:
        raise MalformedTle("TLE lines must be at least 69 columns")
    if not line1.startswith("1 ") or not line2.startswith("2 "):
        raise MalformedTle("line numbers must be 1 and 2")

    for line in (line1, line2):
        if not line[68].isdigit():
            raise MalformedTle(f"checksum column is not a digit: {line[68]!r}")
        if _tle_checksum(line) != int(line[68]):
            raise ChecksumMismatch(f"checksum failed for line: {line[:20]}...")

    try:
        epoch = _parse_epoch(line1[18:32].strip())
        inclination = float(line2[8:16])
        raan = float(line2[17:25])
        eccentricity = float("0." + line2[26:33].strip())
        arg_perigee = float(line2[34:42])
        mean_anomaly = float(line2[43:51])
        mean_motion = float(line2[52:63])
    except ValueError as exc:
        raise MalformedTle(f"bad numeric field: {exc}") from exc

    if not name:
        name = line1[2:7].strip()
    return TleRecord(
        name=name,
        inclination_deg=inclination,
        raan_deg=raan,
        eccentricity=eccentricity,
        arg_perigee_deg=arg_perigee,
        mean_anomaly_deg=mean_anomaly,
        mean_motion_rev_per_day=mean_motion,
        epoch=epoch,
    )


def load_catalog(text: str) -> list[TleRecord]:
    """Parse a concatenated TLE file (2- or 3-line entries, mixed is fine)."""
    lines = [ln.rstrip() for ln in text.splitlines() if ln.strip()]
    records = []
    i = 0
    while i < len(lines):
        if lines[i].startswith("1 "):
            records.append(parse_tle("\n".join(lines[i:i + 2])))
            i += 2
        else:
            records.append(parse_tle("\n".join(lines[i:i + 3])))
            i += 3
    return records


def gmst_rad(t: datetime) -> float:
    """Greenwich sidereal angle from the earth-rotation-angle polynomial."""
    du = (t - _J2000).total_seconds() / SECONDS_PER_DAY
    turns = 0.7790572732640 + 1.00273781191135448 * du
    return 2.0 * math.pi * (turns % 1.0)


def _orbit_state(rec: TleRecord, t: datetime) -> tuple[float, float, float, float]:
    n = rec.mean_motion_rev_per_day * 2.0 * math.pi / SECONDS_PER_DAY
    a = rec.semi_major_axis_km
    dt = (t - rec.epoch).total_seconds()
    u = math.radians(rec.arg_perigee_deg + rec.mean_anomaly_deg) + n * dt
    return a, u, math.radians(rec.inclination_deg), math.radians(rec.raan_deg)


def propagate_eci(rec: TleRecord, t: datetime) -> np.ndarray:
    """Inertial position (km) under the circular-orbit model. No staleness guard."""
    a, u, inc, raan = _orbit_state(rec, t)
    cu, su = math.cos(u), math.sin(u)
    ci = math.cos(inc)
    cr, sr = math.cos(raan), math.sin(raan)
    return a * np.array([
        cr * cu - sr * su * ci,
        sr * cu + cr * su * ci,
        su * math.sin(inc),
    ])


def propagate(rec: TleRecord, t: datetime) -> np.ndarray:
    """Earth-fixed position (km) at time t.

    Raises StaleEphemeris when |t - epoch| exceeds 7 days; the circular model
    has no drag term, so old element sets quietly drift out of tolerance.
    """
    age_days = abs((t - rec.epoch).total_seconds()) / SECONDS_PER_DAY
    if age_days > MAX_EPHEMERIS_AGE_DAYS:
        raise StaleEphemeris(f"elements are {age_days:.1f} days from epoch (limit {MAX_EPHEMERIS_AGE_DAYS:g})")
    eci = propagate_eci(rec, t)
    theta = gmst_rad(t)
    ct, st = math.cos(theta), math.sin(theta)
    return np.array([
        eci[0] * ct + eci[1] * st,
        -eci[0] * st + eci[1] * ct,
        eci[2],
    ])


def topocentric(site: GroundSite, sat_ecef_km: np.ndarray) -> tuple[float, float, float]:
    """(azimuth_deg, elevation_deg, range_km) of an earth-fixed point from a site.

    Azimuth is measured clockwise from north, in [0, 360).
    """
    lat = math.radians(site.latitude_deg)
    lon = math.radians(site.longitude_deg)
    d = np.asarray(sat_ecef_km, dtype=float) - site.ecef_km()
    east = -d[0] * math.sin(lon) + d[1] * math.cos(lon)
    north = (-d[0] * math.sin(lat) * math.cos(lon)
             - d[1] * math.sin(lat) * math.sin(lon)
             + d[2] * math.cos(lat))
    up = (d[0] * math.cos(lat) * math.cos(lon)
          + d[1] * math.cos(lat) * math.sin(lon)
          + d[2] * math.sin(lat))
    rng = float(np.linalg.norm(d))
    if rng == 0.0:
        raise ValueError("satellite position coincides with the site")
    azimuth = math.degrees(math.atan2(east, north)) % 360.0
    elevation = math.degrees(math.asin(up / rng))
    return azimuth, elevation, rng


def _propagate_catalog(catalog: list[TleRecord], t: datetime) -> np.ndarray:
    """Earth-fixed positions for every catalog entry, shape (n, 3). Vectorized."""
    if not catalog:
        return np.zeros((0, 3))
    n_rad = np.array([r.mean_motion_rev_per_day for r in catalog]) * 2.0 * math.pi / SECONDS_PER_DAY
    a = (MU_EARTH_KM3_S2 / (n_rad * n_rad)) ** (1.0 / 3.0)
    dt = np.array([(t - r.epoch).total_seconds() for r in catalog])
    u = np.radians([r.arg_perigee_deg + r.mean_anomaly_deg for r in catalog]) + n_rad * dt
    inc = np.radians([r.inclination_deg for r in catalog])
    raan = np.radians([r.raan_deg for r in catalog])
    cu, su = np.cos(u), np.sin(u)
    eci = np.stack([
        np.cos(raan) * cu - np.sin(raan) * su * np.cos(inc),
        np.sin(raan) * cu + np.cos(raan) * su * np.cos(inc),
        su * np.sin(inc),
    ], axis=1) * a[:, None]
    theta = gmst_rad(t)
    ct, st = math.cos(theta), math.sin(theta)
    return np.stack([
        eci[:, 0] * ct + eci[:, 1] * st,
        -eci[:, 0] * st + eci[:, 1] * ct,
        eci[:, 2],
    ], axis=1)


def visible_sats(site: GroundSite,
                 catalog: list[TleRecord],
                 t: datetime,
                 mask_deg: float = DEFAULT_ELEVATION_MASK_DEG) -> list[VisibleSat]:
    """Every satellite at or above the elevation mask, highest elevation first."""
    if not 0.0 <= mask_deg < 90.0:
        raise ValueError(f"mask must be in [0, 90): {mask_deg}")
    positions = _propagate_catalog(catalog, t)
    lat = math.radians(site.latitude_deg)
    lon = math.radians(site.longitude_deg)
    d = positions - site.ecef_km()
    east = -d[:, 0] * math.sin(lon) + d[:, 1] * math.cos(lon)
    north = (-d[:, 0] * math.sin(lat) * math.cos(lon)
             - d[:, 1] * math.sin(lat) * math.sin(lon)
             + d[:, 2] * math.cos(lat))
    up = (d[:, 0] * math.cos(lat) * math.cos(lon)
          + d[:, 1] * math.cos(lat) * math.sin(lon)
          + d[:, 2] * math.sin(lat))
    rng = np.linalg.norm(d, axis=1)
    elevation = np.degrees(np.arcsin(np.clip(up / rng, -1.0, 1.0)))
    azimuth = np.degrees(np.arctan2(east, north)) % 360.0

    out = [
        VisibleSat(catalog[i].name, float(azimuth[i]), float(elevation[i]), float(rng[i]))
        for i in np.nonzero(elevation >= mask_deg)[0]
    ]
    out.sort(key=lambda v: (-v.elevation_deg, v.sat_id))
    return out


def synthetic_constellation(n_planes: int = 22,
                            sats_per_plane: int = 20,
                            inclination_deg: float = 53.0,
                            altitude_km: float = 550.0,
                            epoch: datetime | None = None,
                            phase_offset_deg: float = 5.0) -> list[TleRecord]:
    """A Walker-style shell of circular orbits, as TleRecords.

    Stands in for a public catalog in tests and default configs; mean motion
    follows from the altitude so the records propagate like any parsed TLE.
    """
    if epoch is None:
        epoch = datetime(2026, 1, 1, tzinfo=timezone.utc)
    a = EARTH_RADIUS_KM + altitude_km
    n_rad = math.sqrt(MU_EARTH_KM3_S2 / a ** 3)
    mean_motion = n_rad * SECONDS_PER_DAY / (2.0 * math.pi)
    catalog = []
    for p in range(n_planes):
        raan = 360.0 * p / n_planes
        for s in range(sats_per_plane):
            anomaly = (360.0 * s / sats_per_plane + phase_offset_deg * p) % 360.0
            catalog.append(TleRecord(
                name=f"SHELL-{p:02d}-{s:02d}",
                inclination_deg=inclination_deg,
                raan_deg=raan,
                eccentricity=0.0,
                arg_perigee_deg=0.0,
                mean_anomaly_deg=anomaly,
                mean_motion_rev_per_day=mean_motion,
                epoch=epoch,
            ))
    return catalog
