"""Tract geometry: GeoJSON ingestion, Web Mercator tiling, POI probe grids.

Coordinates inside this package are always ``(lat, lon)`` in degrees.
GeoJSON on disk uses ``[lon, lat]`` and is converted at the boundary.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

MAX_LAT = 85.05112878
TILE_SIZE = 256
EARTH_RADIUS_M = 6371000.0
EQUATOR_M_PER_PX_Z0 = 156543.03392

TILE_PLAN_HEADER = ["tract_id", "row", "col", "center_lat", "center_lon", "zoom", "width_px", "height_px"]


class GeoError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    """Polygon or MultiPolygon; each polygon is ``[outer, *holes]`` of (k, 2) lat/lon rings."""

    polygons: tuple[tuple[np.ndarray, ...], ...]
    kind: str = "Polygon"

    def rings(self) -> Iterable[np.ndarray]:
        for poly in self.polygons:
            yield from poly

    def bounds(self) -> tuple[float, float, float, float]:
        """(min_lat, min_lon, max_lat, max_lon)"""
        pts = np.concatenate(list(self.rings()))
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))

    def to_geojson(self) -> dict:
        def ring_out(r):
            return [[float(lon), float(lat)] for lat, lon in r]

        polys = [[ring_out(r) for r in poly] for poly in self.polygons]
        if self.kind == "Polygon" and len(polys) == 1:
            return {"type": "Polygon", "coordinates": polys[0]}
        return {"type": "MultiPolygon", "coordinates": polys}

    @classmethod
    def from_rings(cls, *rings) -> "Geometry":
        """Single polygon from (lat, lon) rings, closing them if needed."""
        out = []
        for r in rings:
            a = np.asarray(r, dtype=float)
            if not np.array_equal(a[0], a[-1]):
                a = np.vstack([a, a[:1]])
            out.append(a)
        return cls((tuple(out),), "Polygon")


@dataclass(frozen=True)
class TractRecord:
    id: str
    region: str
    geometry: Geometry
    prevalence: float | None = None
    income: float | None = None
    land_area_km2: float | None = None
    properties: dict = field(default_factory=dict, compare=False, repr=False)

    def outcome(self, target: str) -> float | None:
        if target == "prevalence":
            return self.prevalence
        if target == "income":
            return self.income
        raise ValueError(f"unknown target {target!r}")


@dataclass(frozen=True)
class TileSpec:
    tract_id: str
    center: tuple[float, float]
    zoom: int = 18
    width_px: int = 400
    height_px: int = 400
    row: int = 0
    col: int = 0


@dataclass(frozen=True)
class PoiProbe:
    center: tuple[float, float]
    radius_m: float


@dataclass(frozen=True)
class PropertyMap:
    id: str = "GEOID"
    region: str = "region"
    prevalence: str = "prevalence"
    income: str = "income"
    area: str = "land_area_km2"


# ---------------------------------------------------------------------------
# GeoJSON ingestion


def _parse_ring(coords: Any, feature_id: str) -> np.ndarray:
    try:
        a = np.asarray(coords, dtype=float)
    except (TypeError, ValueError):
        raise GeoError(f"tract {feature_id}: malformed ring coordinates") from None
    if a.ndim != 2 or a.shape[1] < 2:
        raise GeoError(f"tract {feature_id}: malformed ring coordinates")
    if a.shape[0] < 4:
        raise GeoError(f"tract {feature_id}: ring has fewer than 4 vertices")
    if not np.array_equal(a[0, :2], a[-1, :2]):
        raise GeoError(f"tract {feature_id}: open ring")
    lon, lat = a[:, 0], a[:, 1]
    if not np.all(np.isfinite(a[:, :2])):
        raise GeoError(f"tract {feature_id}: non-finite coordinate")
    if np.any(np.abs(lat) > 90) or np.any(lon < -180) or np.any(lon >= 180):
        raise GeoError(f"tract {feature_id}: coordinate out of range")
    return np.column_stack([lat, lon])


def parse_geometry(geom: Mapping, feature_id: str = "?") -> Geometry:
    if not isinstance(geom, Mapping):
        raise GeoError(f"tract {feature_id}: missing geometry")
    kind = geom.get("type")
    coords = geom.get("coordinates")
    if kind == "Polygon":
        raw_polys = [coords]
    elif kind == "MultiPolygon":
        raw_polys = coords
    else:
        raise GeoError(f"tract {feature_id}: unsupported geometry type {kind!r}")
    if not raw_polys or any(not p for p in raw_polys):
        raise GeoError(f"tract {feature_id}: empty geometry")
    polys = tuple(tuple(_parse_ring(r, feature_id) for r in p) for p in raw_polys)
    return Geometry(polys, kind)


def _number(props: Mapping, key: str, feature_id: str) -> float | None:
    v = props.get(key)
    if v is None or (isinstance(v, str) and v.strip() == ""):
        return None
    if isinstance(v, bool):
        raise GeoError(f"tract {feature_id}: unparseable {key} {v!r}")
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise GeoError(f"tract {feature_id}: unparseable {key} {v!r}") from None
    if not math.isfinite(x):
        raise GeoError(f"tract {feature_id}: unparseable {key} {v!r}")
    return x


def parse_tract_collection(text: str | bytes | Mapping, property_map: PropertyMap | None = None) -> list[TractRecord]:
    """Parse a GeoJSON FeatureCollection into tract records.

    Missing outcome properties become ``None``; such tracts are kept so they
    can still be mapped, and are excluded later when a design matrix is built.
    """
    pm = property_map or PropertyMap()
    if isinstance(text, Mapping):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise GeoError(f"invalid JSON: {e}") from None
    if not isinstance(doc, Mapping) or doc.get("type") != "FeatureCollection":
        raise GeoError("expected a GeoJSON FeatureCollection")

    records: list[TractRecord] = []
    seen: set[str] = set()
    for i, feat in enumerate(doc.get("features") or []):
        props = feat.get("properties") or {}
        raw_id = props.get(pm.id, feat.get("id"))
        if raw_id is None:
            raise GeoError(f"feature {i}: missing id property {pm.id!r}")
        tid = str(raw_id)
        if tid in seen:
            raise GeoError(f"duplicate id {tid}")
        seen.add(tid)
        geometry = parse_geometry(feat.get("geometry"), tid)
        prevalence = _number(props, pm.prevalence, tid)
        if prevalence is not None and not 0 <= prevalence <= 100:
            raise GeoError(f"tract {tid}: prevalence {prevalence} outside [0, 100]")
        income = _number(props, pm.income, tid)
        if income is not None and income < 0:
            raise GeoError(f"tract {tid}: negative income")
        area = _number(props, pm.area, tid)
        if area is not None and area <= 0:
            raise GeoError(f"tract {tid}: non-positive land area")
        region = props.get(pm.region)
        records.append(TractRecord(
            id=tid,
            region="" if region is None else str(region),
            geometry=geometry,
            prevalence=prevalence,
            income=income,
            land_area_km2=area,
            properties=dict(props),
        ))
    return records


# ---------------------------------------------------------------------------
# Web Mercator


def _map_size(zoom) -> float:
    return TILE_SIZE * 2.0 ** zoom


def _check_zoom(zoom):
    if not 0 <= zoom <= 22:
        raise GeoError(f"zoom {zoom} outside [0, 22]")


def latlon_to_world_pixel(lat, lon, zoom):
    """Continuous global pixel coordinates on the 256 * 2**zoom map square."""
    _check_zoom(zoom)
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.abs(lat) > MAX_LAT):
        raise GeoError("latitude outside Mercator clamp")
    size = _map_size(zoom)
    phi = np.radians(lat)
    px = size * (lon + 180.0) / 360.0
    # asinh(tan) == ln(tan + sec), with far less rounding near the clamp
    py = size * (1.0 - np.arcsinh(np.tan(phi)) / np.pi) / 2.0
    if px.ndim == 0:
        return float(px), float(py)
    return px, py


def world_pixel_to_latlon(px, py, zoom):
    _check_zoom(zoom)
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    size = _map_size(zoom)
    # corner inputs round-trip through the clamp with ~1e-8 px of slack
    slack = 1e-6
    if np.any(px < -slack) or np.any(px > size + slack) or np.any(py < -slack) or np.any(py > size + slack):
        raise GeoError("world pixel outside map")
    lon = px / size * 360.0 - 180.0
    lat = np.degrees(np.arctan(np.sinh(np.pi * (1.0 - 2.0 * py / size))))
    if lat.ndim == 0:
        return float(lat), float(lon)
    return lat, lon


def ground_resolution(lat: float, zoom: int) -> float:
    """Meters per pixel at ``lat`` and ``zoom``."""
    if abs(lat) > MAX_LAT:
        raise GeoError("latitude outside Mercator clamp")
    return EQUATOR_M_PER_PX_Z0 * math.cos(math.radians(lat)) / 2.0 ** zoom


# ---------------------------------------------------------------------------
# point in polygon


def _edges(rings: Iterable[np.ndarray]) -> np.ndarray:
    """Stack ring edges as rows (y1, x1, y2, x2)."""
    segs = [np.hstack([r[:-1], r[1:]]) for r in rings]
    return np.vstack(segs)


def _points_in_rings(y: np.ndarray, x: np.ndarray, edges: np.ndarray, chunk: int = 1 << 20) -> np.ndarray:
    """Even-odd membership of points against a set of ring edges; boundary counts as inside."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros(y.shape, dtype=bool)
    y1, x1, y2, x2 = (edges[:, k][None, :] for k in range(4))
    dy, dx = y2 - y1, x2 - x1
    seg_len = np.hypot(dx, dy)
    step = max(1, chunk // max(1, len(edges)))
    for s in range(0, len(y), step):
        py = y[s:s + step, None]
        px = x[s:s + step, None]
        straddle = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x1 + (py - y1) * dx / dy
        crossings = np.count_nonzero(straddle & (px < xcross), axis=1)
        cross = dx * (py - y1) - dy * (px - x1)
        tol = 1e-12 * np.maximum(seg_len, 1.0)
        on_line = np.abs(cross) <= tol
        within = ((px >= np.minimum(x1, x2) - 1e-12) & (px <= np.maximum(x1, x2) + 1e-12)
                  & (py >= np.minimum(y1, y2) - 1e-12) & (py <= np.maximum(y1, y2) + 1e-12))
        boundary = np.any(on_line & within, axis=1)
        out[s:s + step] = (crossings % 2 == 1) | boundary
    return out


def points_in_geometry(lat, lon, geometry: Geometry) -> np.ndarray:
    """Vectorised :func:`point_in_polygon` over arrays of points."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    inside = np.zeros(lat.shape, dtype=bool)
    for poly in geometry.polygons:
        todo = ~inside
        if not todo.any():
            break
        inside[todo] = _points_in_rings(lat[todo], lon[todo], _edges(poly))
    return inside


def point_in_polygon(point: tuple[float, float], geometry: Geometry) -> bool:
    """Even-odd test of a (lat, lon) point; holes excluded, boundary points inside."""
    return bool(points_in_geometry(point[0], point[1], geometry)[0])


# ---------------------------------------------------------------------------
# areas and interior points


def _local_frame(geometry: Geometry) -> tuple[float, float, float, float]:
    """Origin and meters-per-degree scales of the equirectangular frame about the bbox center."""
    lat0_min, lon0_min, lat0_max, lon0_max = geometry.bounds()
    lat0 = 0.5 * (lat0_min + lat0_max)
    lon0 = 0.5 * (lon0_min + lon0_max)
    m_per_deg = EARTH_RADIUS_M * math.pi / 180.0
    return lat0, lon0, m_per_deg, m_per_deg * math.cos(math.radians(lat0))


def _shoelace(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def polygon_area_km2(geometry: Geometry) -> float:
    """Planar area in a local equirectangular projection; holes subtracted."""
    lat0, lon0, ky, kx = _local_frame(geometry)
    total = 0.0
    for poly in geometry.polygons:
        for k, ring in enumerate(poly):
            xy = np.column_stack([(ring[:, 1] - lon0) * kx, (ring[:, 0] - lat0) * ky])
            a = abs(_shoelace(xy))
            total += a if k == 0 else -a
    return total / 1e6


def _ring_centroid(ring: np.ndarray) -> tuple[float, float] | None:
    y, x = ring[:, 0], ring[:, 1]
    cross = x[:-1] * y[1:] - x[1:] * y[:-1]
    a = cross.sum() / 2.0
    if a == 0:
        return None
    cx = ((x[:-1] + x[1:]) * cross).sum() / (6.0 * a)
    cy = ((y[:-1] + y[1:]) * cross).sum() / (6.0 * a)
    return float(cy), float(cx)


def representative_point(geometry: Geometry) -> tuple[float, float]:
    """A (lat, lon) point strictly inside the largest polygon of ``geometry``."""
    def poly_area(poly):
        return abs(_shoelace(poly[0][:, ::-1])) - sum(abs(_shoelace(h[:, ::-1])) for h in poly[1:])

    poly = max(geometry.polygons, key=poly_area)
    c = _ring_centroid(poly[0])
    edges = _edges(poly)
    if c is not None and _strictly_inside(c, edges):
        return c
    lat_min, lat_max = poly[0][:, 0].min(), poly[0][:, 0].max()
    for frac in (0.5, 0.25, 0.75, 0.375, 0.625, 0.125, 0.875, 0.4375, 0.5625):
        y = lat_min + frac * (lat_max - lat_min)
        y1, x1, y2, x2 = edges.T
        straddle = (y1 > y) != (y2 > y)
        xs = np.sort(x1[straddle] + (y - y1[straddle]) * (x2[straddle] - x1[straddle]) / (y2[straddle] - y1[straddle]))
        if len(xs) < 2:
            continue
        spans = xs[1::2][: len(xs) // 2] - xs[0::2][: len(xs) // 2]
        k = int(np.argmax(spans))
        if spans[k] > 0:
            return float(y), float(0.5 * (xs[2 * k] + xs[2 * k + 1]))
    raise GeoError("could not find an interior point")


def _strictly_inside(pt, edges) -> bool:
    y1, x1, y2, x2 = edges.T
    straddle = (y1 > pt[0]) != (y2 > pt[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x1 + (pt[0] - y1) * (x2 - x1) / (y2 - y1)
    d = np.abs(xc[straddle] - pt[1])
    return bool(np.count_nonzero(straddle & (pt[1] < xc)) % 2 == 1 and (d.size == 0 or d.min() > 1e-12))


def _check_nondegenerate(tract: TractRecord):
    lat_min, lon_min, lat_max, lon_max = tract.geometry.bounds()
    if lat_max <= lat_min or lon_max <= lon_min or polygon_area_km2(tract.geometry) <= 1e-12:
        raise GeoError(f"tract {tract.id}: degenerate (zero-area) geometry")


# ---------------------------------------------------------------------------
# tile planning


def plan_tiles(tract: TractRecord, zoom: int = 18, width_px: int = 400, height_px: int = 400) -> list[TileSpec]:
    """Edge-adjacent tile grid over the tract's pixel bounding box.

    A candidate is kept iff its center lies in the tract. Tracts too small to
    capture any center get one tile at an interior point.
    """
    _check_zoom(zoom)
    if not (64 <= width_px <= 1280 and 64 <= height_px <= 1280):
        raise GeoError("tile width/height must lie in [64, 1280]")
    _check_nondegenerate(tract)
    geom = tract.geometry
    lat_min, lon_min, lat_max, lon_max = geom.bounds()
    x0, y0 = latlon_to_world_pixel(lat_max, lon_min, zoom)
    x1, y1 = latlon_to_world_pixel(lat_min, lon_max, zoom)
    ncols = max(1, math.ceil((x1 - x0) / width_px))
    nrows = max(1, math.ceil((y1 - y0) / height_px))
    rows, cols = np.meshgrid(np.arange(nrows), np.arange(ncols), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    cx = x0 + width_px / 2.0 + cols * width_px
    cy = y0 + height_px / 2.0 + rows * height_px
    clat, clon = world_pixel_to_latlon(cx, cy, zoom)
    keep = points_in_geometry(clat, clon, geom)
    tiles = [
        TileSpec(tract.id, (float(clat[i]), float(clon[i])), zoom, width_px, height_px, int(rows[i]), int(cols[i]))
        for i in np.flatnonzero(keep)
    ]
    if not tiles:
        lat, lon = representative_point(geom)
        px, py = latlon_to_world_pixel(lat, lon, zoom)
        r = min(nrows - 1, max(0, int((py - y0) // height_px)))
        c = min(ncols - 1, max(0, int((px - x0) // width_px)))
        tiles = [TileSpec(tract.id, (lat, lon), zoom, width_px, height_px, r, c)]
    return tiles


def write_tile_plan(tiles: Iterable[TileSpec], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TILE_PLAN_HEADER)
        for t in tiles:
            w.writerow([t.tract_id, t.row, t.col, f"{t.center[0]:.6f}", f"{t.center[1]:.6f}",
                        t.zoom, t.width_px, t.height_px])


def read_tile_plan(path) -> list[TileSpec]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TILE_PLAN_HEADER:
            raise GeoError(f"{path}: unexpected tile plan header")
        return [
            TileSpec(r["tract_id"], (float(r["center_lat"]), float(r["center_lon"])), int(r["zoom"]),
                     int(r["width_px"]), int(r["height_px"]), int(r["row"]), int(r["col"]))
            for r in reader
        ]


# ---------------------------------------------------------------------------
# POI probe grid


def _segments_hit_box(edges: np.ndarray, xmin, ymin, xmax, ymax) -> bool:
    """Liang-Barsky: does any edge (y1, x1, y2, x2) touch the closed box?"""
    y1, x1, y2, x2 = edges.T
    dx, dy = x2 - x1, y2 - y1
    t0 = np.zeros(len(edges))
    t1 = np.ones(len(edges))
    ok = np.ones(len(edges), dtype=bool)
    for p, q in ((-dx, x1 - xmin), (dx, xmax - x1), (-dy, y1 - ymin), (dy, ymax - y1)):
        parallel = p == 0
        ok &= ~(parallel & (q < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(parallel, 0.0, q / np.where(parallel, 1.0, p))
        t0 = np.where(~parallel & (p < 0), np.maximum(t0, r), t0)
        t1 = np.where(~parallel & (p > 0), np.minimum(t1, r), t1)
    return bool(np.any(ok & (t0 <= t1)))


def plan_poi_grid(tract: TractRecord, radius_m: float) -> list[PoiProbe]:
    """Square grid of search disks whose cells cover the tract.

    Cells have side ``radius_m * sqrt(2)`` so each disk covers its cell; a
    probe is kept when its closed cell meets the polygon.
    """
    if not radius_m > 0:
        raise GeoError("radius_m must be positive")
    _check_nondegenerate(tract)
    geom = tract.geometry
    lat0, lon0, ky, kx = _local_frame(geom)
    polys_m = [
        [np.column_stack([(r[:, 0] - lat0) * ky, (r[:, 1] - lon0) * kx]) for r in poly]
        for poly in geom.polygons
    ]
    all_pts = np.concatenate([r for p in polys_m for r in p])
    ymin, xmin = all_pts.min(axis=0)
    ymax, xmax = all_pts.max(axis=0)
    s = radius_m * math.sqrt(2.0)
    ncols = max(1, math.ceil((xmax - xmin) / s))
    nrows = max(1, math.ceil((ymax - ymin) / s))
    edge_sets = [_edges(p) for p in polys_m]

    probes: list[PoiProbe] = []
    for i in range(nrows):
        for j in range(ncols):
            cx0, cy0 = xmin + j * s, ymin + i * s
            cx1, cy1 = cx0 + s, cy0 + s
            hit = False
            for edges, poly in zip(edge_sets, polys_m):
                corners_y = np.array([cy0, cy0, cy1, cy1, (cy0 + cy1) / 2])
                corners_x = np.array([cx0, cx1, cx0, cx1, (cx0 + cx1) / 2])
                if _points_in_rings(corners_y, corners_x, edges).any():
                    hit = True
                elif _segments_hit_box(edges, cx0, cy0, cx1, cy1):
                    hit = True
                if hit:
                    break
            if hit:
                cy, cx = (cy0 + cy1) / 2, (cx0 + cx1) / 2
                probes.append(PoiProbe((lat0 + cy / ky, lon0 + cx / kx), float(radius_m)))
    if not probes:
        probes.append(PoiProbe(representative_point(geom), float(radius_m)))
    return probes


def haversine_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    lat1, lon1, lat2, lon2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))
