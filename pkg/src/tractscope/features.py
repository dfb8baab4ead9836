"""Per-tract feature construction and feature-store persistence."""

from __future__ import annotations

import csv
import struct
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .acquisition import PoiRecord, RasterImage
from .cnn import FeatureVector
from .geo import GeoError, TileSpec, TractRecord, points_in_geometry, polygon_area_km2

STORE_MAGIC = b"FVS1"


class FeatureStoreError(ValueError):
    pass


@dataclass
class FeatureStore:
    extractor_id: str
    dim: int
    records: dict[str, np.ndarray] = field(default_factory=dict)  # float32 vectors
    tile_counts: dict[str, int] = field(default_factory=dict)

    def add(self, tract_id: str, vector, tile_count: int) -> None:
        v = np.asarray(vector, dtype=np.float32)
        if v.shape != (self.dim,):
            raise FeatureStoreError(f"vector for {tract_id} has length {v.size}, expected {self.dim}")
        self.records[tract_id] = v
        self.tile_counts[tract_id] = int(tile_count)

    def ids(self) -> list[str]:
        return sorted(self.records)

    def columns(self) -> list[str]:
        return [f"f{j}" for j in range(self.dim)]


@dataclass
class FeatureTable:
    """Rows of named features per tract, e.g. POI counts by category."""

    ids: list[str]
    columns: list[str]
    X: np.ndarray
    mode: str = "counts"
    warnings: Counter = field(default_factory=Counter)


@dataclass
class DesignMatrix:
    ids: list[str]
    columns: list[str]
    X: np.ndarray
    y: np.ndarray
    regions: list[str]
    target: str = "prevalence"
    excluded: list[str] = field(default_factory=list)

    def subset(self, rows) -> "DesignMatrix":
        rows = list(rows)
        return DesignMatrix([self.ids[i] for i in rows], self.columns, self.X[rows], self.y[rows],
                            [self.regions[i] for i in rows], self.target, list(self.excluded))


# ---------------------------------------------------------------------------
# aggregation


def aggregate_tract(vectors: Sequence[FeatureVector | np.ndarray], tile_ids: Sequence | None = None) -> np.ndarray:
    """Elementwise mean, summed in float64 in ascending tile-id order."""
    if not vectors:
        raise ValueError("cannot aggregate an empty list of vectors")
    arrays = [np.asarray(v.values if isinstance(v, FeatureVector) else v, dtype=np.float64) for v in vectors]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("feature vectors have mixed lengths")
    order = range(len(arrays)) if tile_ids is None else sorted(range(len(arrays)), key=lambda i: tile_ids[i])
    acc = np.zeros_like(arrays[0])
    for i in order:
        acc += arrays[i]
    return acc / len(arrays)


def extract_store(
    tiles: Iterable[TileSpec],
    load: Callable[[TileSpec], RasterImage],
    featurize: Callable[[RasterImage], FeatureVector],
    extractor_id: str,
    jobs: int = 1,
) -> FeatureStore:
    """Featurize every tile and average per tract; tracts run in parallel, output order is fixed."""
    by_tract: OrderedDict[str, list[TileSpec]] = OrderedDict()
    for t in tiles:
        by_tract.setdefault(t.tract_id, []).append(t)

    def one(item):
        tid, specs = item
        specs = sorted(specs, key=lambda s: (s.row, s.col))
        vecs = [featurize(load(s)) for s in specs]
        return tid, aggregate_tract(vecs), len(specs)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(one, by_tract.items()))
    if not results:
        raise FeatureStoreError("no tiles to extract features from")
    store = FeatureStore(extractor_id, len(results[0][1]))
    for tid, vec, n in sorted(results, key=lambda r: r[0]):
        store.add(tid, vec, n)
    return store


# ---------------------------------------------------------------------------
# places of interest


def dedup_pois(records: Iterable[PoiRecord]) -> list[PoiRecord]:
    seen: set[str] = set()
    out = []
    for r in records:
        if r.place_id not in seen:
            seen.add(r.place_id)
            out.append(r)
    return out


def tract_area_km2(tract: TractRecord) -> float:
    if tract.land_area_km2 is not None:
        return tract.land_area_km2
    area = polygon_area_km2(tract.geometry)
    if area <= 0:
        raise GeoError(f"tract {tract.id}: no land area and degenerate geometry")
    return area


def assign_points(lat: np.ndarray, lon: np.ndarray, tracts: Sequence[TractRecord]) -> np.ndarray:
    """Index of the first tract (by ascending id) containing each point, or -1."""
    owner = np.full(len(lat), -1, dtype=int)
    order = sorted(range(len(tracts)), key=lambda i: tracts[i].id)
    for i in order:
        lat_min, lon_min, lat_max, lon_max = tracts[i].geometry.bounds()
        cand = np.flatnonzero((owner < 0) & (lat >= lat_min) & (lat <= lat_max) & (lon >= lon_min) & (lon <= lon_max))
        if cand.size:
            inside = points_in_geometry(lat[cand], lon[cand], tracts[i].geometry)
            owner[cand[inside]] = i
    return owner


def poi_feature_matrix(records: Iterable[PoiRecord], tracts: Sequence[TractRecord], categories: Sequence[str],
                       mode: str = "counts") -> FeatureTable:
    """Count deduplicated places per (tract, category), optionally per km^2.

    Places outside every tract and places with categories outside the
    vocabulary are dropped and tallied in ``warnings``.
    """
    if not categories:
        raise ValueError("category vocabulary is empty")
    if mode not in ("counts", "per_km2"):
        raise ValueError(f"unknown mode {mode!r}")
    col = {c: j for j, c in enumerate(categories)}
    ordered = sorted(tracts, key=lambda t: t.id)
    X = np.zeros((len(ordered), len(categories)))
    warnings: Counter = Counter()
    pois = dedup_pois(records)
    if pois:
        lat = np.array([p.location[0] for p in pois])
        lon = np.array([p.location[1] for p in pois])
        owner = assign_points(lat, lon, ordered)
        for p, o in zip(pois, owner):
            if o < 0:
                warnings["outside_tracts"] += 1
            elif p.category not in col:
                warnings["unknown_category"] += 1
            else:
                X[o, col[p.category]] += 1
    if mode == "per_km2":
        X /= np.array([tract_area_km2(t) for t in ordered])[:, None]
    return FeatureTable([t.id for t in ordered], list(categories), X, mode, warnings)


# ---------------------------------------------------------------------------
# design matrices


def build_design_matrix(source: FeatureStore | FeatureTable, tracts: Sequence[TractRecord], target: str) -> DesignMatrix:
    """Rows for tracts with features and a non-null target, in ascending id order."""
    if isinstance(source, FeatureStore):
        feats = source.records
        columns = source.columns()
    else:
        feats = dict(zip(source.ids, source.X))
        columns = list(source.columns)
    ids, rows, ys, regions, excluded = [], [], [], [], []
    for t in sorted(tracts, key=lambda t: t.id):
        value = t.outcome(target)
        if value is None or t.id not in feats:
            excluded.append(t.id)
            continue
        ids.append(t.id)
        rows.append(np.asarray(feats[t.id], dtype=np.float64))
        ys.append(value)
        regions.append(t.region)
    if len(ids) < 2:
        raise ValueError(f"fewer than 2 tracts have features and a {target} value")
    X = np.vstack(rows)
    if not np.isfinite(X).all():
        raise ValueError("feature matrix contains non-finite values")
    return DesignMatrix(ids, columns, X, np.array(ys, dtype=np.float64), regions, target, excluded)


# ---------------------------------------------------------------------------
# persistence


def write_feature_store(store: FeatureStore, path) -> None:
    """Binary FVS1 unless ``path`` ends in ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["tract_id", "tile_count"] + store.columns())
            for tid in store.ids():
                w.writerow([tid, store.tile_counts[tid]] + [f"{v:.9g}" for v in store.records[tid].tolist()])
        return
    parts = [STORE_MAGIC, struct.pack("<II", store.dim, len(store.records))]
    for tid in store.ids():
        raw = tid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", store.tile_counts[tid]))
        parts.append(store.records[tid].astype("<f4").tobytes())
    path.write_bytes(b"".join(parts))


def read_feature_store(path, extractor_id: str = "") -> FeatureStore:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[:2] != ["tract_id", "tile_count"]:
                raise FeatureStoreError(f"{path}: not a feature store CSV")
            store = FeatureStore(extractor_id, len(header) - 2)
            for row in reader:
                if len(row) != len(header):
                    raise FeatureStoreError(f"{path}: ragged row for {row[:1]}")
                store.add(row[0], np.array(row[2:], dtype=np.float64), int(row[1]))
        return store

    buf = path.read_bytes()
    if buf[:4] != STORE_MAGIC:
        raise FeatureStoreError(f"{path}: bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FeatureStoreError(f"{path}: truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    dim, count = struct.unpack("<II", take(8))
    store = FeatureStore(extractor_id, dim)
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        tid = take(n).decode("utf-8")
        (tiles,) = struct.unpack("<I", take(4))
        store.add(tid, np.frombuffer(take(4 * dim), dtype="<f4"), tiles)
    if pos != len(buf):
        raise FeatureStoreError(f"{path}: trailing bytes")
    return store


def write_feature_table(table: FeatureTable, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tract_id"] + table.columns)
        for tid, row in zip(table.ids, table.X):
            w.writerow([tid] + [f"{v:.9g}" for v in row])


def read_feature_table(path, mode: str = "counts") -> FeatureTable:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[0] != "tract_id":
            raise FeatureStoreError(f"{path}: not a feature table")
        rows = list(reader)
    X = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)
    return FeatureTable([r[0] for r in rows], header[1:], X, mode)
