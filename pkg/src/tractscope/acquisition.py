"""Clients for the static-map tile endpoint and the nearby-search POI endpoint.

Both clients take an optional ``transport`` callable ``(url, params) ->
(status, body_bytes)`` so tests can substitute a fake endpoint. In offline
mode nothing ever touches the network: tiles come from the cache and POIs
from a newline-delimited JSON fixture.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import random
import tempfile
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .geo import PoiProbe, TileSpec, haversine_m

log = logging.getLogger(__name__)

API_KEY_ENV = "TRACTSCOPE_API_KEY"
MANIFEST_NAME = "manifest.csv"

Transport = Callable[[str, dict], tuple[int, bytes]]


class AcquisitionError(RuntimeError):
    pass


class ImageDecodeError(AcquisitionError):
    pass


@dataclass
class EndpointConfig:
    base_url: str = ""
    api_key: str | None = field(default=None, repr=False)
    max_concurrent: int = 4
    retry_limit: int = 3
    offline: bool = False
    poi_fixture: str | os.PathLike | None = None
    backoff_base: float = 1.0
    timeout: float = 30.0

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be positive")
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV)


@dataclass(frozen=True)
class RasterImage:
    width: int
    height: int
    data: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.data.dtype != np.uint8 or self.data.shape != (self.height, self.width, 3):
            raise ValueError("RasterImage data must be uint8 of shape (height, width, 3)")

    @classmethod
    def from_array(cls, arr) -> "RasterImage":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass(frozen=True)
class PoiRecord:
    place_id: str
    category: str
    location: tuple[float, float]


# ---------------------------------------------------------------------------
# images


def decode_image(payload: bytes) -> RasterImage:
    """Decode PNG/JPEG to RGB8; alpha is dropped and grayscale replicated."""
    try:
        with Image.open(io.BytesIO(payload)) as img:
            if img.format not in ("PNG", "JPEG"):
                raise ImageDecodeError(f"unsupported image format {img.format}")
            img.load()
            if img.mode in ("I", "I;16", "F"):
                img = img.convert("L")
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except ImageDecodeError:
        raise
    except Exception as e:  # PIL raises a mix of OSError/ValueError/SyntaxError
        raise ImageDecodeError(f"cannot decode image: {e}") from None
    return RasterImage.from_array(arr)


def encode_png(image: RasterImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.data, "RGB").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# transport and retries


def requests_transport(timeout: float = 30.0) -> Transport:
    import requests

    session = requests.Session()

    def get(url, params):
        r = session.get(url, params=params, timeout=timeout)
        return r.status_code, r.content

    return get


def _get_with_retry(transport: Transport, url: str, params: dict, cfg: EndpointConfig, what: str) -> bytes:
    last = None
    for attempt in range(cfg.retry_limit + 1):
        if attempt:
            delay = cfg.backoff_base * 2 ** (attempt - 1) * random.uniform(0.5, 1.5)
            time.sleep(delay)
        try:
            status, body = transport(url, params)
        except OSError as e:
            last = str(e)
        except Exception as e:  # requests wraps socket errors in its own hierarchy
            last = f"{type(e).__name__}: {e}"
        else:
            if status == 200:
                return body
            last = f"HTTP {status}"
        log.warning("request for %s failed (%s), attempt %d", what, last, attempt + 1)
    raise AcquisitionError(f"{what}: request failed after {cfg.retry_limit} retries ({last})")


def _transport_for(cfg: EndpointConfig, transport: Transport | None) -> Transport:
    if cfg.offline:
        raise AcquisitionError("network access attempted in offline mode")
    return transport or requests_transport(cfg.timeout)


# ---------------------------------------------------------------------------
# tiles


def tile_cache_key(spec: TileSpec) -> str:
    lat, lon = spec.center
    return f"z{spec.zoom}_{lat:.6f}_{lon:.6f}_{spec.width_px}x{spec.height_px}.png"


def _tile_name(spec: TileSpec) -> str:
    return f"tile {spec.tract_id} r{spec.row} c{spec.col} ({tile_cache_key(spec)})"


_manifest_lock = threading.Lock()


def atomic_write(path: Path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def append_manifest(cache_dir, key: str, tract_id: str, fetched_at: str) -> None:
    path = Path(cache_dir) / MANIFEST_NAME
    with _manifest_lock:
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if new:
                w.writerow(["key", "tract_id", "fetched_at"])
            w.writerow([key, tract_id, fetched_at])


def fetch_tile(spec: TileSpec, cfg: EndpointConfig, cache_dir, transport: Transport | None = None) -> RasterImage:
    """Return the tile image, downloading and caching it on a miss."""
    path = Path(cache_dir) / tile_cache_key(spec)
    if path.exists():
        try:
            return decode_image(path.read_bytes())
        except ImageDecodeError as e:
            raise ImageDecodeError(f"{_tile_name(spec)}: {e}") from None
    if cfg.offline:
        raise AcquisitionError(f"cache miss for {_tile_name(spec)}")
    get = _transport_for(cfg, transport)
    lat, lon = spec.center
    params = {
        "center": f"{lat:.6f},{lon:.6f}",
        "zoom": spec.zoom,
        "size": f"{spec.width_px}x{spec.height_px}",
        "maptype": "satellite",
        "key": cfg.api_key or "",
    }
    body = _get_with_retry(get, cfg.base_url, params, cfg, _tile_name(spec))
    try:
        image = decode_image(body)
    except ImageDecodeError as e:
        raise ImageDecodeError(f"{_tile_name(spec)}: {e}") from None
    atomic_write(path, body)
    append_manifest(cache_dir, path.name, spec.tract_id, datetime.now(timezone.utc).isoformat(timespec="seconds"))
    return image


def fetch_tiles(specs: list[TileSpec], cfg: EndpointConfig, cache_dir, transport: Transport | None = None) -> list[Path]:
    """Populate the cache for every spec; duplicate keys are fetched once.

    Returns cache paths in plan order.
    """
    unique: dict[str, TileSpec] = {}
    for s in specs:
        unique.setdefault(tile_cache_key(s), s)
    if transport is None and not cfg.offline and any(not (Path(cache_dir) / k).exists() for k in unique):
        transport = requests_transport(cfg.timeout)
    with ThreadPoolExecutor(max_workers=cfg.max_concurrent) as pool:
        list(pool.map(lambda s: fetch_tile(s, cfg, cache_dir, transport), unique.values()))
    return [Path(cache_dir) / tile_cache_key(s) for s in specs]


# ---------------------------------------------------------------------------
# places of interest


def _parse_poi(obj, tally: Counter | None) -> PoiRecord | None:
    try:
        pid = obj.get("place_id")
        category = obj.get("category")
        if category is None and obj.get("types"):
            category = obj["types"][0]
        if "lat" in obj:
            lat, lon = obj["lat"], obj.get("lon", obj.get("lng"))
        else:
            loc = obj["geometry"]["location"]
            lat, lon = loc["lat"], loc["lng"]
        lat, lon = float(lat), float(lon)
    except (AttributeError, KeyError, TypeError, ValueError, IndexError):
        pid = None
    if not pid or not category or not (math.isfinite(lat) and math.isfinite(lon)):
        if tally is not None:
            tally["malformed_poi"] += 1
        return None
    return PoiRecord(str(pid), str(category), (lat, lon))


def read_poi_ndjson(path, tally: Counter | None = None) -> list[PoiRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                if tally is not None:
                    tally["malformed_poi"] += 1
                continue
            rec = _parse_poi(obj, tally)
            if rec is not None:
                out.append(rec)
    return out


def write_poi_ndjson(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({"place_id": r.place_id, "category": r.category,
                                "lat": r.location[0], "lon": r.location[1]}) + "\n")


_fixture_cache: dict[tuple, tuple[list[PoiRecord], Counter]] = {}
_fixture_lock = threading.Lock()


def _load_fixture(path) -> tuple[list[PoiRecord], Counter]:
    st = os.stat(path)
    key = (os.fspath(path), st.st_mtime_ns, st.st_size)
    with _fixture_lock:
        if key not in _fixture_cache:
            tally = Counter()
            _fixture_cache[key] = (read_poi_ndjson(path, tally), tally)
        return _fixture_cache[key]


def fetch_poi(probe: PoiProbe, cfg: EndpointConfig, transport: Transport | None = None,
              tally: Counter | None = None) -> list[PoiRecord]:
    """All places returned for one probe, pages concatenated in order.

    Malformed records are skipped and counted in ``tally['malformed_poi']``.
    Offline, the fixture records within ``radius_m`` of the probe are returned.
    """
    if cfg.offline:
        if cfg.poi_fixture is None:
            raise AcquisitionError("offline POI fetch needs a fixture file")
        records, bad = _load_fixture(cfg.poi_fixture)
        if tally is not None and bad:
            tally["malformed_poi"] += bad["malformed_poi"]
        return [r for r in records if haversine_m(r.location, probe.center) <= probe.radius_m]

    get = _transport_for(cfg, transport)
    lat, lon = probe.center
    what = f"POI probe ({lat:.6f},{lon:.6f})"
    out: list[PoiRecord] = []
    seen_tokens: set[str] = set()
    token = None
    while True:
        params = {"location": f"{lat:.6f},{lon:.6f}", "radius": f"{probe.radius_m:g}", "key": cfg.api_key or ""}
        if token:
            params["pagetoken"] = token
        body = _get_with_retry(get, cfg.base_url, params, cfg, what)
        try:
            page = json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise AcquisitionError(f"{what}: response is not JSON") from None
        for obj in page.get("results") or []:
            rec = _parse_poi(obj, tally)
            if rec is not None:
                out.append(rec)
        token = page.get("next_page_token")
        if not token:
            return out
        if token in seen_tokens:
            raise AcquisitionError(f"{what}: pagination loop on token {token!r}")
        seen_tokens.add(token)


def fetch_pois(probes: list[PoiProbe], cfg: EndpointConfig, transport: Transport | None = None,
               tally: Counter | None = None) -> list[PoiRecord]:
    """Fetch every probe concurrently; results are concatenated in probe order."""
    if transport is None and not cfg.offline:
        transport = requests_transport(cfg.timeout)
    tallies = [Counter() for _ in probes]
    with ThreadPoolExecutor(max_workers=cfg.max_concurrent) as pool:
        pages = list(pool.map(lambda i: fetch_poi(probes[i], cfg, transport, tallies[i]), range(len(probes))))
    if tally is not None:
        for t in tallies:
            tally.update(t)
    return [r for page in pages for r in page]
