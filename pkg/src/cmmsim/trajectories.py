"""Vehicle trajectories: CSV ingestion, selection rules and a synthetic generator.

Samples are 0.1 s apart and carry (east m, north m, speed m/s, heading deg),
with heading measured clockwise from north. A trajectory of ``m`` samples
lasts ``m * dt`` seconds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geomap import RoadMap

EARTH_RADIUS = 6_371_000.0
SAMPLE_DT = 0.1
CSV_HEADER = ["vehicle_id", "t_s", "lat_deg", "lon_deg", "speed_mps", "heading_deg"]
_GAP_TOL = 1e-6


class TrajectoryFormatError(ValueError):
    pass


def latlon_to_en(origin, p):
    """Equirectangular projection of ``(lat, lon)`` degrees about ``origin``."""
    lat0, lon0 = origin
    if abs(lat0) >= 89:
        raise ValueError("origin latitude too close to a pole")
    p = np.asarray(p, dtype=float)
    east = EARTH_RADIUS * np.cos(np.radians(lat0)) * np.radians(p[..., 1] - lon0)
    north = EARTH_RADIUS * np.radians(p[..., 0] - lat0)
    return np.stack([east, north], axis=-1)


def en_to_latlon(origin, en):
    lat0, lon0 = origin
    en = np.asarray(en, dtype=float)
    lat = lat0 + np.degrees(en[..., 1] / EARTH_RADIUS)
    lon = lon0 + np.degrees(en[..., 0] / (EARTH_RADIUS * np.cos(np.radians(lat0))))
    return np.stack([lat, lon], axis=-1)


@dataclass(eq=False)
class Trajectory:
    vehicle_id: str
    samples: np.ndarray  # (m, 4): east, north, speed, heading
    t0: float = 0.0
    dt: float = SAMPLE_DT

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).reshape(-1, 4)
        if np.any(s[:, 2] < 0):
            raise ValueError(f"{self.vehicle_id}: negative speed")
        s[:, 3] = np.mod(s[:, 3], 360.0)
        self.samples = s

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) * self.dt

    @property
    def positions(self) -> np.ndarray:
        return self.samples[:, :2]

    @property
    def velocities(self) -> np.ndarray:
        h = np.radians(self.samples[:, 3])
        v = self.samples[:, 2]
        return np.column_stack([v * np.sin(h), v * np.cos(h)])


@dataclass(eq=False)
class TrajectorySet:
    trajectories: list = field(default_factory=list)
    origin: tuple = (42.28, -83.74)

    def __post_init__(self):
        ids = [t.vehicle_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def _parse_float(text, row, column):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise TrajectoryFormatError(f"row {row}: column {column!r} is not numeric: {text!r}") from None
    if not np.isfinite(v):
        raise TrajectoryFormatError(f"row {row}: column {column!r} is not finite")
    return v


def load_csv(path, origin=None) -> TrajectorySet:
    """Read an SPMD-style trajectory CSV.

    Rows of one vehicle must appear in increasing time order; a gap longer
    than one sample period starts a new trajectory (``<id>.1``, ``<id>.2``...).
    Positions are projected about ``origin`` (default: the first row).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    rows = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return TrajectorySet([], tuple(origin) if origin else (0.0, 0.0))
        if [h.strip() for h in header] != CSV_HEADER:
            raise TrajectoryFormatError(f"row 1: expected header {','.join(CSV_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(CSV_HEADER):
                raise TrajectoryFormatError(f"row {lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
            vid = rec[0].strip()
            vals = [_parse_float(rec[i], lineno, CSV_HEADER[i]) for i in range(1, 6)]
            if vid not in rows:
                rows[vid] = []
                order.append(vid)
            prev = rows[vid][-1] if rows[vid] else None
            if prev is not None and vals[0] <= prev[1][0]:
                raise TrajectoryFormatError(
                    f"row {lineno}: timestamp {vals[0]} for vehicle {vid} does not increase")
            rows[vid].append((lineno, vals))
    if not order:
        return TrajectorySet([], tuple(origin) if origin else (0.0, 0.0))
    if origin is None:
        first = rows[order[0]][0][1]
        origin = (first[1], first[2])
    out = []
    for vid in order:
        data = np.array([v for _, v in rows[vid]])
        en = latlon_to_en(origin, data[:, 1:3])
        samples = np.column_stack([en, data[:, 3], data[:, 4]])
        breaks = np.flatnonzero(np.diff(data[:, 0]) > SAMPLE_DT + _GAP_TOL) + 1
        for k, (lo, hi) in enumerate(zip(np.r_[0, breaks], np.r_[breaks, len(data)])):
            name = vid if k == 0 else f"{vid}.{k}"
            out.append(Trajectory(name, samples[lo:hi], t0=float(data[lo, 0])))
    return TrajectorySet(out, tuple(origin))


def write_csv(ts: TrajectorySet, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for tr in ts:
            ll = en_to_latlon(ts.origin, tr.positions)
            for k, (s, (lat, lon)) in enumerate(zip(tr.samples, ll)):
                w.writerow([tr.vehicle_id, f"{tr.t0 + k * tr.dt:.1f}", f"{lat:.9f}", f"{lon:.9f}",
                            f"{s[2]:.6f}", f"{s[3]:.6f}"])
    return path


def heading_change(h1, h2):
    """Shortest absolute angular difference in degrees."""
    return np.abs((np.asarray(h2) - np.asarray(h1) + 180.0) % 360.0 - 180.0)


def filter_valid(ts: TrajectorySet, min_duration_s: float = 300.0,
                 max_heading_jump_deg: float = 10.0) -> TrajectorySet:
    """Keep long, smooth trajectories and cut each to ``min_duration_s``."""
    keep = []
    for tr in ts:
        if tr.duration < min_duration_s - _GAP_TOL:
            continue
        if len(tr) > 1 and heading_change(tr.samples[:-1, 3], tr.samples[1:, 3]).max() > max_heading_jump_deg:
            continue
        m = int(round(min_duration_s / tr.dt))
        keep.append(Trajectory(tr.vehicle_id, tr.samples[:m].copy(), tr.t0, tr.dt))
    return TrajectorySet(keep, ts.origin)


def sample_network(ts: TrajectorySet, n: int, rng: np.random.Generator) -> TrajectorySet:
    if n > len(ts):
        raise ValueError(f"need {n} trajectories, only {len(ts)} available (short by {n - len(ts)})")
    idx = rng.choice(len(ts), size=n, replace=False) if n else []
    return TrajectorySet([ts.trajectories[i] for i in idx], ts.origin)


def _polyline_walk(pts, s):
    """Position and unit direction at arclength ``s`` along a polyline."""
    seg = np.diff(pts, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    cum = np.r_[0.0, np.cumsum(lens)]
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1)
    frac = (s - cum[k]) / lens[k]
    pos = pts[k] + frac[:, None] * seg[k]
    return pos, seg[k] / lens[k][:, None]


def synth_trajectories(road_map: RoadMap, n: int, duration_s: float = 300.0, speed_range=(8.0, 15.0),
                       rng: np.random.Generator | None = None, dt: float = SAMPLE_DT) -> TrajectorySet:
    """Constant-speed vehicles along random lane centerlines, bouncing at lane ends."""
    if n < 1:
        raise ValueError("need at least one vehicle")
    rng = rng if rng is not None else np.random.default_rng()
    lo, hi = speed_range
    m = int(round(duration_s / dt))
    t = np.arange(m) * dt
    out = []
    for i in range(n):
        lane = road_map.segments[rng.integers(len(road_map.segments))]
        L = lane.length
        s0 = rng.uniform(0.0, L)
        direction = 1.0 if rng.random() < 0.5 else -1.0
        v = rng.uniform(lo, hi) if hi > lo else lo
        u = np.mod(s0 + direction * v * t, 2 * L)
        forward = u <= L
        s = np.where(forward, u, 2 * L - u)
        pos, tangent = _polyline_walk(lane.centerline, s)
        move = tangent * np.where(forward, 1.0, -1.0)[:, None]
        heading = np.mod(np.degrees(np.arctan2(move[:, 0], move[:, 1])), 360.0)
        out.append(Trajectory(str(i + 1), np.column_stack([pos, np.full(m, v), heading])))
    return TrajectorySet(out, road_map.origin)
