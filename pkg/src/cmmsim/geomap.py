"""Road constraints as lane corridors with a soft (Gaussian) boundary.

A lane is a centerline polyline dilated by its half width. A point is on the
road when it lies inside at least one corridor; outside, the map weight decays
with the distance to the nearest corridor edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

DEFAULT_HALF_WIDTH = 1.75
DEFAULT_KERNEL_SIGMA = 1.0


@dataclass(frozen=True, eq=False)
class LaneSegment:
    centerline: np.ndarray
    half_width: float = DEFAULT_HALF_WIDTH

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("centerline needs at least two 2D points")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0):
            raise ValueError("consecutive centerline points must be distinct")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        object.__setattr__(self, "centerline", pts)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1).sum())


@dataclass(frozen=True, eq=False)
class RoadMap:
    segments: tuple
    kernel_sigma: float = DEFAULT_KERNEL_SIGMA
    origin: tuple = (42.28, -83.74)
    # flattened pieces: starts (K,2), ends (K,2), half widths (K,)
    _a: np.ndarray = field(init=False, repr=False, compare=False)
    _b: np.ndarray = field(init=False, repr=False, compare=False)
    _hw: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("road map needs at least one segment")
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")
        object.__setattr__(self, "segments", segs)
        a = np.concatenate([s.centerline[:-1] for s in segs])
        b = np.concatenate([s.centerline[1:] for s in segs])
        hw = np.concatenate([np.full(len(s.centerline) - 1, s.half_width) for s in segs])
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_b", b)
        object.__setattr__(self, "_hw", hw)

    @property
    def pieces(self):
        """Straight centerline pieces as ``(starts, ends, half_widths)`` arrays."""
        return self._a, self._b, self._hw

    def translated(self, offset) -> "RoadMap":
        off = np.asarray(offset, dtype=float)
        segs = [LaneSegment(s.centerline + off, s.half_width) for s in self.segments]
        return RoadMap(tuple(segs), self.kernel_sigma, self.origin)


def _corridor_distance(a, b, hw, pts):
    # pts (m,2) against pieces (K,2) -> (m,) exterior distance to the capsule union
    ab = b - a
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("mkd,kd->mk", ap, ab) / np.einsum("kd,kd->k", ab, ab), 0.0, 1.0)
    nearest = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(pts[:, None, :] - nearest, axis=2)
    return np.maximum(d - hw[None, :], 0.0).min(axis=1)


def distance_to_road(road_map: RoadMap, p) -> np.ndarray | float:
    """Distance from ``p`` to the closest lane corridor, zero inside a corridor.

    ``p`` may be a single point ``(2,)`` or an array of points ``(m, 2)``.
    """
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    d = _corridor_distance(*road_map.pieces, np.atleast_2d(pts))
    return float(d[0]) if single else d


def in_constraint(road_map: RoadMap, p):
    d = distance_to_road(road_map, p)
    return d == 0 if np.ndim(d) else bool(d == 0)


def road_likelihood(road_map: RoadMap, p, extra_sigma=0.0):
    """Gaussian road weight ``exp(-d^2 / 2(sigma_k^2 + extra^2))`` in [0, 1]."""
    d = distance_to_road(road_map, p)
    var = road_map.kernel_sigma ** 2 + np.asarray(extra_sigma, dtype=float) ** 2
    w = np.exp(-np.square(d) / (2.0 * var))
    return float(w) if np.ndim(w) == 0 else w


def road_index(road_map: RoadMap, cell: float = 100.0) -> tuple:
    """Uniform-cell index over lane pieces for the compiled distance lookup.

    Every piece is listed in each cell its bounding box touches after
    growing by its half width plus ``cell``, so all pieces within ``cell``
    meters of a query point are listed in the point's own cell.
    """
    a, b, hw = road_map.pieces
    reach = float(cell)
    grow = hw + reach
    lo_pts = np.minimum(a, b) - grow[:, None]
    hi_pts = np.maximum(a, b) + grow[:, None]
    lo = lo_pts.min(axis=0)
    nx, ny = (np.ceil((hi_pts.max(axis=0) - lo) / cell).astype(int) + 1).tolist()
    buckets = [[] for _ in range(nx * ny)]
    for k in range(len(a)):
        x0, y0 = np.floor((lo_pts[k] - lo) / cell).astype(int)
        x1, y1 = np.floor((hi_pts[k] - lo) / cell).astype(int)
        for iy in range(max(y0, 0), min(y1, ny - 1) + 1):
            for ix in range(max(x0, 0), min(x1, nx - 1) + 1):
                buckets[iy * nx + ix].append(k)
    start = np.zeros(nx * ny + 1, dtype=np.int64)
    start[1:] = np.cumsum([len(c) for c in buckets])
    items = np.array([k for c in buckets for k in c], dtype=np.int64)
    return (a, b, hw, lo.astype(float), float(cell), reach, int(nx), int(ny), start, items)


def grid_map(extent=3000.0, spacing=250.0, half_width=DEFAULT_HALF_WIDTH,
             kernel_sigma=DEFAULT_KERNEL_SIGMA, origin=(42.28, -83.74)) -> RoadMap:
    """Square street grid centered on the origin, one straight lane per street."""
    half = extent / 2.0
    coords = np.arange(-half, half + 1e-9, spacing)
    segs = []
    for c in coords:
        segs.append(LaneSegment(np.array([[-half, c], [half, c]]), half_width))
        segs.append(LaneSegment(np.array([[c, -half], [c, half]]), half_width))
    return RoadMap(tuple(segs), kernel_sigma, tuple(origin))


# Map file schema (YAML):
#   origin: {lat_deg: float, lon_deg: float}
#   kernel_sigma_m: float            (optional, default 1.0)
#   segments:
#     - half_width_m: float          (optional, default 1.75)
#       points: [[east_m, north_m], ...]

def map_to_dict(road_map: RoadMap) -> dict:
    return {
        "origin": {"lat_deg": float(road_map.origin[0]), "lon_deg": float(road_map.origin[1])},
        "kernel_sigma_m": float(road_map.kernel_sigma),
        "segments": [
            {"half_width_m": float(s.half_width), "points": s.centerline.tolist()}
            for s in road_map.segments
        ],
    }


def map_from_dict(doc: dict) -> RoadMap:
    try:
        origin = doc["origin"]
        segs = [
            LaneSegment(np.asarray(s["points"], dtype=float),
                        float(s.get("half_width_m", DEFAULT_HALF_WIDTH)))
            for s in doc["segments"]
        ]
        return RoadMap(tuple(segs), float(doc.get("kernel_sigma_m", DEFAULT_KERNEL_SIGMA)),
                       (float(origin["lat_deg"]), float(origin["lon_deg"])))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed map document: {exc!r}") from exc


def load_map(path) -> RoadMap:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: map file must be a mapping")
    return map_from_dict(doc)


def save_map(road_map: RoadMap, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(map_to_dict(road_map), fh, sort_keys=False, default_flow_style=None)
    return path
