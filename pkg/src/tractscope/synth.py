"""Deterministic synthetic world: tracts, tile imagery, POIs and outcomes with a known latent driver.

Each tract draws a latent z in [0, 1]. Tiles raise their green level by
``green_gap * z`` and carry fewer bright red/blue structures as z grows, so
channel histograms and gradient energy both encode z. Outcomes are linear
in z plus Gaussian noise sized to hit a target generative R^2.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import PoiRecord, RasterImage, append_manifest, atomic_write, encode_png, tile_cache_key, write_poi_ndjson
from .evaluation import r_squared
from .geo import Geometry, TractRecord, latlon_to_world_pixel, plan_tiles, polygon_area_km2, world_pixel_to_latlon

DEFAULT_REGIONS = ("north", "south", "east", "west")
# one anchor per region, far enough apart that regions never overlap
REGION_ANCHORS = ((47.60, -122.30), (29.40, -98.50), (35.10, -90.00), (34.00, -118.20))
# POI rate per tract = base + slope * z
DEFAULT_POI_RATES = {
    "restaurant": (3.0, 0.0),
    "fast_food": (6.0, -5.0),
    "park": (1.0, 5.0),
    "gym": (0.5, 3.0),
    "grocery": (1.0, 2.0),
    "bar": (2.0, -1.0),
}
SLOT_TILES = 5  # each tract lives in a 5x5-tile slot, at most 4x4 of it used
SLOTS_PER_ROW = 8


@dataclass
class SynthConfig:
    seed: int = 42
    n_tracts: int = 200
    tiles_min: int = 4
    tiles_max: int = 16
    image_px: int = 64
    zoom: int = 18
    regions: tuple[str, ...] = DEFAULT_REGIONS
    # outcome = intercept + slope * z + noise
    prevalence_coef: tuple[float, float] = (20.0, 15.0)
    income_coef: tuple[float, float] = (20000.0, 40000.0)
    target_r2: float = 0.8
    noise_sd: float | None = None  # derived from target_r2 when None
    green_gap: float = 80.0
    structure_rate: float = 10.0  # mean bright structures per tile at z = 0
    missing_fraction: float = 0.02
    poi_rates: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_POI_RATES))
    duplicate_fraction: float = 0.05

    def __post_init__(self):
        if self.n_tracts < 10:
            raise ValueError("n_tracts must be at least 10")
        if not 1 <= len(self.regions) <= len(REGION_ANCHORS):
            raise ValueError(f"between 1 and {len(REGION_ANCHORS)} regions supported")
        if not 4 <= self.tiles_min <= self.tiles_max <= 16:
            raise ValueError("tiles per tract must satisfy 4 <= min <= max <= 16")
        if self.noise_sd is not None and self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.noise_sd is None and not 0 < self.target_r2 <= 1:
            raise ValueError("target_r2 must lie in (0, 1]")

    def resolved_noise_sd(self, slope: float) -> float:
        """Noise sd giving R^2 = target for z ~ U(0, 1), i.e. var(slope * z) = slope^2 / 12."""
        if self.noise_sd is not None:
            return self.noise_sd
        return abs(slope) * math.sqrt((1.0 / self.target_r2 - 1.0) / 12.0)


@dataclass
class SynthWorld:
    tracts_path: Path
    tiles_dir: Path
    poi_path: Path
    truth_path: Path
    tracts: list[TractRecord]
    z: dict[str, float]


def _tile_shapes(lo: int, hi: int) -> list[tuple[int, int]]:
    return [(w, h) for w in range(1, 5) for h in range(1, 5) if lo <= w * h <= hi]


def render_tile(rng: np.random.Generator, z: float, cfg: SynthConfig) -> RasterImage:
    """One procedural tile. Green carries the level shift; structures touch only red and blue."""
    n = cfg.image_px
    img = np.empty((n, n, 3))
    img[..., 0] = 90.0 + rng.normal(0.0, 10.0, (n, n))
    img[..., 1] = 70.0 + cfg.green_gap * z + rng.normal(0.0, 10.0, (n, n))
    img[..., 2] = 80.0 + rng.normal(0.0, 10.0, (n, n))
    for _ in range(rng.poisson(cfg.structure_rate * (1.0 - z))):
        w, h = rng.integers(3, 13, size=2)
        x, y = rng.integers(0, n - 2, size=2)
        img[y:y + h, x:x + w, 0] = 215.0
        img[y:y + h, x:x + w, 2] = 205.0
    return RasterImage.from_array(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def _layout(cfg: SynthConfig, rng: np.random.Generator):
    """Rectangular tracts aligned to the tile grid; returns (id, region, ring, tile shape)."""
    shapes = _tile_shapes(cfg.tiles_min, cfg.tiles_max)
    px = cfg.image_px
    out = []
    per_region = [0] * len(cfg.regions)
    for i in range(cfg.n_tracts):
        r = i * len(cfg.regions) // cfg.n_tracts
        k = per_region[r]
        per_region[r] += 1
        w, h = shapes[rng.integers(0, len(shapes))]
        ox, oy = latlon_to_world_pixel(*REGION_ANCHORS[r], cfg.zoom)
        x0 = math.floor(ox / px) * px + (k % SLOTS_PER_ROW) * SLOT_TILES * px
        y0 = math.floor(oy / px) * px + (k // SLOTS_PER_ROW) * SLOT_TILES * px
        # 1 px inset keeps every tile center strictly inside and the bbox from spilling over
        corners = [(x0 + 1, y0 + 1), (x0 + w * px - 1, y0 + 1), (x0 + w * px - 1, y0 + h * px - 1), (x0 + 1, y0 + h * px - 1)]
        ring = [world_pixel_to_latlon(cx, cy, cfg.zoom) for cx, cy in corners]
        tid = f"{r + 1:02d}{k + 1:09d}"
        out.append((tid, cfg.regions[r], ring, w * h))
    return out


def _outcomes(z: np.ndarray, coef, sd: float, rng: np.random.Generator) -> np.ndarray:
    a, b = coef
    return a + b * z + rng.normal(0.0, 1.0, len(z)) * sd


def generate_world(cfg: SynthConfig, out_dir) -> SynthWorld:
    out = Path(out_dir)
    tiles_dir = out / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    manifest = tiles_dir / "manifest.csv"
    if manifest.exists():
        manifest.unlink()
    rng = np.random.default_rng(cfg.seed)

    layout = _layout(cfg, rng)
    n = len(layout)
    z = rng.uniform(0.0, 1.0, n)
    prev_sd = cfg.resolved_noise_sd(cfg.prevalence_coef[1])
    prevalence = np.clip(_outcomes(z, cfg.prevalence_coef, prev_sd, rng), 0.0, 100.0)
    income = np.maximum(_outcomes(z, cfg.income_coef, cfg.resolved_noise_sd(cfg.income_coef[1]), rng), 0.0)
    missing = rng.uniform(0.0, 1.0, n) < cfg.missing_fraction

    tracts, features = [], []
    for j, (tid, region, ring, _) in enumerate(layout):
        geom = Geometry.from_rings(ring)
        prev = None if missing[j] else round(float(prevalence[j]), 6)
        props = {
            "GEOID": tid,
            "region": region,
            "prevalence": prev,
            "income": round(float(income[j]), 2),
            "land_area_km2": round(polygon_area_km2(geom), 9),
        }
        tracts.append(TractRecord(tid, region, geom, prev, props["income"], props["land_area_km2"], props))
        features.append({"type": "Feature", "properties": props, "geometry": geom.to_geojson()})

    tracts_path = out / "tracts.geojson"
    tracts_path.write_text(json.dumps({"type": "FeatureCollection", "features": features}) + "\n")

    for j, tract in enumerate(tracts):
        tiles = plan_tiles(tract, cfg.zoom, cfg.image_px, cfg.image_px)
        if len(tiles) != layout[j][3]:
            raise AssertionError(f"tract {tract.id}: planned {len(tiles)} tiles, laid out {layout[j][3]}")
        for spec in tiles:
            key = tile_cache_key(spec)
            atomic_write(tiles_dir / key, encode_png(render_tile(rng, float(z[j]), cfg)))
            append_manifest(tiles_dir, key, tract.id, "synthetic")

    pois: list[PoiRecord] = []
    counter = 0
    for j, tract in enumerate(tracts):
        lat_min, lon_min, lat_max, lon_max = tract.geometry.bounds()
        for cat, (base, slope) in cfg.poi_rates.items():
            for _ in range(rng.poisson(max(0.0, base + slope * z[j]))):
                counter += 1
                loc = (round(float(rng.uniform(lat_min, lat_max)), 7), round(float(rng.uniform(lon_min, lon_max)), 7))
                pois.append(PoiRecord(f"p{counter:07d}", cat, loc))
    # overlapping probes return the same place more than once
    n_dup = int(round(cfg.duplicate_fraction * len(pois)))
    if pois and n_dup:
        pois.extend(pois[i] for i in sorted(rng.choice(len(pois), n_dup, replace=False)))
    poi_path = out / "poi_fixture.ndjson"
    write_poi_ndjson(pois, poi_path)

    truth_path = out / "truth.csv"
    with open(truth_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tract_id", "z", "outcome", "noise_sd"])
        for j, t in enumerate(tracts):
            w.writerow([t.id, repr(float(z[j])), "" if t.prevalence is None else repr(t.prevalence), repr(prev_sd)])
    keep = ~missing
    signal = cfg.prevalence_coef[0] + cfg.prevalence_coef[1] * z[keep]
    achieved = r_squared(np.array([t.prevalence for t in tracts if t.prevalence is not None]), signal)
    summary = {
        "seed": cfg.seed,
        "n_tracts": n,
        "intercept": cfg.prevalence_coef[0],
        "slope": cfg.prevalence_coef[1],
        "noise_sd": prev_sd,
        "target_r2": cfg.target_r2,
        "achieved_r2": achieved,
        "green_gap": cfg.green_gap,
        "income_intercept": cfg.income_coef[0],
        "income_slope": cfg.income_coef[1],
        "poi_categories": list(cfg.poi_rates),
    }
    (out / "truth.json").write_text(json.dumps(summary, indent=2) + "\n")
    return SynthWorld(tracts_path, tiles_dir, poi_path, truth_path, tracts, {t.id: float(z[j]) for j, t in enumerate(tracts)})


def read_truth(path) -> dict[str, tuple[float, float | None]]:
    """tract_id -> (z, outcome or None)."""
    with open(path, newline="") as f:
        return {r["tract_id"]: (float(r["z"]), float(r["outcome"]) if r["outcome"] else None) for r in csv.DictReader(f)}
