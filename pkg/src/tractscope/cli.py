"""Command-line entry point: ``tractscope <group> <action> [flags]``.

Exit codes: 0 success, 1 input error (bad flags, missing or malformed
inputs), 2 runtime failure in a stage. Logs go to stderr, data to files.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path

from . import __version__
from .acquisition import EndpointConfig, RasterImage, decode_image, fetch_pois, fetch_tile, fetch_tiles, read_poi_ndjson, write_poi_ndjson
from .cnn import BASELINE_ID, activation_maps, baseline_descriptor, forward_to_layer, load_weights, preprocess, write_activation_maps
from .evaluation import EvalReport, emit_outputs, evaluate_run, read_reports, read_scatter, write_reports, write_scatter
from .features import (
    FeatureStore,
    FeatureTable,
    build_design_matrix,
    extract_store,
    poi_feature_matrix,
    read_feature_store,
    read_feature_table,
    write_feature_store,
    write_feature_table,
)
from .geo import parse_tract_collection, plan_poi_grid, plan_tiles, read_tile_plan, write_tile_plan
from .model import ElasticNetConfig, fit_elastic_net
from .synth import SynthConfig, generate_world

log = logging.getLogger("tractscope")

MANIFEST_NAME = "run_manifest.json"
PATH_ARGS = ("tracts", "plan", "cache", "out", "weights", "image", "poi", "poi_fixture", "features", "reports",
             "scatter", "world")


class InputError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# logging, config, manifests


class _StageFilter(logging.Filter):
    def filter(self, record):
        if not hasattr(record, "stage"):
            record.stage = record.name.rsplit(".", 1)[-1]
        return True


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.addFilter(_StageFilter())
    fmt = logging.Formatter("%(levelname)s %(asctime)s %(stage)s %(message)s", "%Y-%m-%dT%H:%M:%S")
    handler.setFormatter(fmt)
    root = logging.getLogger("tractscope")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def info(stage: str, msg: str, *args) -> None:
    log.info(msg, *args, extra={"stage": stage})


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _digest(path: Path) -> str | None:
    if not path.is_file():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, args, argv, inputs, started: float) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
              if not k.startswith("_") and k != "func"}
    doc = {
        "command": ["tractscope", *argv],
        "config": config,
        "seed": args.seed,
        "inputs": {str(p): _digest(Path(p)) for p in inputs if p is not None},
        "version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MANIFEST_NAME).write_text(json.dumps(doc, indent=2) + "\n")


@contextlib.contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    info(name, "start")
    try:
        yield
    except (InputError, StageError):
        raise
    except Exception as e:
        raise StageError(name, e) from e
    info(name, "done in %.2fs", time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# input loaders: any failure here is the caller's input, exit code 1


def _load(what: str, fn, *a):
    try:
        return fn(*a)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot read {what}: {e}") from e


def load_tracts(path):
    return _load(f"tracts {path}", lambda p: parse_tract_collection(Path(p).read_bytes()), path)


def load_features(path) -> FeatureStore | FeatureTable:
    def read(p):
        p = Path(p)
        if p.suffix.lower() == ".csv" and p.read_text().split(",", 2)[:2] != ["tract_id", "tile_count"]:
            return read_feature_table(p)
        return read_feature_store(p)

    return _load(f"features {path}", read, path)


def _featurizer_name(source, path: Path, override: str | None) -> str:
    if override:
        return override
    if isinstance(source, FeatureTable):
        return "poi"
    manifest = path.parent / MANIFEST_NAME
    if manifest.exists():
        extractor = json.loads(manifest.read_text()).get("config", {}).get("extractor")
        if extractor:
            return extractor
    return "baseline"


def _endpoint(args, base_url_default="") -> EndpointConfig:
    return EndpointConfig(
        base_url=args.base_url or base_url_default,
        max_concurrent=args.max_concurrent,
        retry_limit=args.retry_limit,
        offline=args.offline,
        poi_fixture=args.poi_fixture,
    )


def _model_cfg(args) -> ElasticNetConfig:
    try:
        return ElasticNetConfig(alpha=args.alpha, folds=args.folds, feature_cap=args.feature_cap, seed=args.seed,
                                jobs=args.jobs, path_length=args.path_length)
    except ValueError as e:
        raise InputError(str(e)) from e


TILE_URL = "https://maps.googleapis.com/maps/api/staticmap"
POI_URL = "https://maps.googleapis.com/maps/api/place/nearbysearch/json"


def _featurize_fn(args):
    """(callable, extractor id) for the chosen tile extractor."""
    if args.extractor == "baseline":
        return baseline_descriptor, BASELINE_ID
    net = _load(f"weights {args.weights}", load_weights, args.weights)
    layer = args.layer or net.layers[-1].name
    try:
        net.layer_index(layer)
    except Exception as e:
        raise InputError(str(e)) from e
    return (lambda img: forward_to_layer(net, preprocess(img, net), layer)), f"cnn:{layer}"


def _extract(args, tiles):
    featurize, extractor_id = _featurize_fn(args)
    cache_cfg = EndpointConfig(offline=True)
    return extract_store(tiles, lambda s: fetch_tile(s, cache_cfg, args.cache), featurize, extractor_id, args.jobs)


# ---------------------------------------------------------------------------
# commands; each returns the list of input files for the manifest


def cmd_tracts_validate(args):
    tracts = load_tracts(args.tracts)
    with stage("validate"):
        regions = Counter(t.region for t in tracts)
        summary = {
            "n_tracts": len(tracts),
            "regions": dict(sorted(regions.items())),
            "null_prevalence": sum(t.prevalence is None for t in tracts),
            "null_income": sum(t.income is None for t in tracts),
        }
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "tracts_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        info("validate", "%d tracts in %d regions", len(tracts), len(regions))
    return [args.tracts]


def cmd_tiles_plan(args):
    tracts = load_tracts(args.tracts)
    with stage("tiles-plan"):
        tiles = [s for t in sorted(tracts, key=lambda t: t.id) for s in plan_tiles(t, args.zoom, args.tile_px, args.tile_px)]
        args.out.mkdir(parents=True, exist_ok=True)
        write_tile_plan(tiles, args.out / "tile_plan.csv")
        info("tiles-plan", "%d tiles for %d tracts", len(tiles), len(tracts))
    return [args.tracts]


def cmd_tiles_fetch(args):
    tiles = _load(f"plan {args.plan}", read_tile_plan, args.plan)
    with stage("tiles-fetch"):
        args.cache.mkdir(parents=True, exist_ok=True)
        paths = fetch_tiles(tiles, _endpoint(args, TILE_URL), args.cache)
        info("tiles-fetch", "%d tiles available in %s", len(set(paths)), args.cache)
    args.out = args.cache
    return [args.plan]


def cmd_features_extract(args):
    if args.extractor == "cnn" and not args.weights:
        raise InputError("--extractor cnn requires --weights")
    tiles = _load(f"plan {args.plan}", read_tile_plan, args.plan)
    with stage("features"):
        store = _extract(args, tiles)
        args.out.mkdir(parents=True, exist_ok=True)
        write_feature_store(store, args.out / f"features.{args.format}")
        info("features", "%d tracts x %d features (%s)", len(store.records), store.dim, store.extractor_id)
    return [args.plan, args.weights]


def cmd_net_activations(args):
    net = _load(f"weights {args.weights}", load_weights, args.weights)
    image: RasterImage = _load(f"image {args.image}", lambda p: decode_image(Path(p).read_bytes()), args.image)
    with stage("activations"):
        grids = activation_maps(net, preprocess(image, net), args.layer or net.layers[0].name)
        paths = write_activation_maps(grids, args.out)
        info("activations", "%d maps written", len(paths))
    return [args.weights, args.image]


def _poi_fetch(args, tracts):
    probes = [p for t in sorted(tracts, key=lambda t: t.id) for p in plan_poi_grid(t, args.radius)]
    tally: Counter = Counter()
    records = fetch_pois(probes, _endpoint(args, POI_URL), None, tally)
    if tally:
        log.warning("skipped %d malformed place records", tally["malformed_poi"], extra={"stage": "poi-fetch"})
    info("poi-fetch", "%d probes returned %d records", len(probes), len(records))
    return records


def _poi_aggregate(args, tracts, records):
    cats = [c for c in (args.categories or "").split(",") if c] or sorted({r.category for r in records})
    mode = args.mode.replace("-", "_")
    table = poi_feature_matrix(records, tracts, cats, mode)
    for k, v in sorted(table.warnings.items()):
        log.warning("%s: %d records dropped", k, v, extra={"stage": "poi-aggregate"})
    return table


def cmd_poi_fetch(args):
    tracts = load_tracts(args.tracts)
    with stage("poi-fetch"):
        records = _poi_fetch(args, tracts)
        args.out.mkdir(parents=True, exist_ok=True)
        write_poi_ndjson(records, args.out / "poi.ndjson")
    return [args.tracts, args.poi_fixture]


def cmd_poi_aggregate(args):
    tracts = load_tracts(args.tracts)
    records = _load(f"poi {args.poi}", read_poi_ndjson, args.poi)
    with stage("poi-aggregate"):
        table = _poi_aggregate(args, tracts, records)
        args.out.mkdir(parents=True, exist_ok=True)
        write_feature_table(table, args.out / "poi_features.csv")
    return [args.tracts, args.poi]


def _design(args):
    tracts = load_tracts(args.tracts)
    source = load_features(args.features)
    try:
        design = build_design_matrix(source, tracts, args.target)
    except ValueError as e:
        raise InputError(str(e)) from e
    return tracts, source, design


def cmd_model_fit(args):
    _, _, design = _design(args)
    cfg = _model_cfg(args)
    with stage("model-fit"):
        fit, cv = fit_elastic_net(design.X, design.y, cfg, design.columns)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "model.json").write_text(fit.to_json(cv, args.seed) + "\n")
        info("model-fit", "n=%d p=%d lambda=%.6g active=%d", len(design.ids), len(design.columns), fit.lambda_,
             fit.active_set_size)
    return [args.tracts, args.features]


def cmd_model_evaluate(args):
    _, source, design = _design(args)
    cfg = _model_cfg(args)
    featurizer = _featurizer_name(source, args.features, args.featurizer)
    with stage("model-evaluate"):
        reports = evaluate_run(design, cfg, args.mode, featurizer, args.split)
        args.out.mkdir(parents=True, exist_ok=True)
        write_reports(reports, args.out / "reports.csv")
        write_scatter(reports[0].predictions, args.out / "scatter.csv")
        for r in reports:
            info("model-evaluate", "%s n=%d r2=%.4f rmse=%.4f pearson=%.4f", r.scope, r.n, r.r2, r.rmse, r.pearson)
    return [args.tracts, args.features]


def cmd_report_emit(args):
    tracts = load_tracts(args.tracts)
    reports = [EvalReport.from_row(r) for r in _load(f"reports {args.reports}", read_reports, args.reports)]
    preds = _load(f"scatter {args.scatter}", read_scatter, args.scatter)
    with stage("report"):
        emit_outputs(reports, preds, tracts, args.out)
    return [args.tracts, args.reports, args.scatter]


def cmd_synth_generate(args):
    try:
        cfg = SynthConfig(seed=args.seed, n_tracts=args.n_tracts, image_px=args.tile_px or 64,
                          target_r2=args.target_r2, noise_sd=args.noise_sd)
    except ValueError as e:
        raise InputError(str(e)) from e
    with stage("synth"):
        world = generate_world(cfg, args.out)
        info("synth", "%d tracts written to %s", len(world.tracts), args.out)
    return []


def _apply_world(args):
    world = args.world
    truth = _load(f"world {world}", lambda p: json.loads((Path(p) / "truth.json").read_text()), world)
    args.tracts = args.tracts or world / "tracts.geojson"
    args.cache = args.cache or world / "tiles"
    args.poi_fixture = args.poi_fixture or world / "poi_fixture.ndjson"
    args.offline = True
    if args.tile_px is None:
        args.tile_px = _load("world tile size", lambda: _world_tile_px(world))
    args.zoom = args.zoom if args.zoom is not None else 18
    return truth


def _world_tile_px(world: Path) -> int:
    name = next(p.name for p in sorted((world / "tiles").glob("z*_*.png")))
    return int(name.rsplit("_", 1)[1].split("x")[0])


def cmd_pipeline_run(args):
    if args.world:
        _apply_world(args)
    if not args.tracts:
        raise InputError("pipeline run needs --tracts or --world")
    if args.extractor == "cnn" and not args.weights:
        raise InputError("--extractor cnn requires --weights")
    tracts = load_tracts(args.tracts)
    cfg = _model_cfg(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.extractor == "poi":
        with stage("poi-fetch"):
            records = _poi_fetch(args, tracts)
            write_poi_ndjson(records, out / "poi.ndjson")
        with stage("poi-aggregate"):
            source = _poi_aggregate(args, tracts, records)
            write_feature_table(source, out / "poi_features.csv")
    else:
        with stage("tiles-plan"):
            tiles = [s for t in sorted(tracts, key=lambda t: t.id)
                     for s in plan_tiles(t, args.zoom or 18, args.tile_px or 400, args.tile_px or 400)]
            write_tile_plan(tiles, out / "tile_plan.csv")
            info("tiles-plan", "%d tiles", len(tiles))
        if args.cache is None:
            raise InputError("--cache is required for tile extractors")
        with stage("tiles-fetch"):
            args.cache.mkdir(parents=True, exist_ok=True)
            fetch_tiles(tiles, _endpoint(args, TILE_URL), args.cache)
        with stage("features"):
            source = _extract(args, tiles)
            write_feature_store(source, out / "features.fvs")
            info("features", "%d tracts x %d features", len(source.records), source.dim)

    with stage("design"):
        design = build_design_matrix(source, tracts, args.target)
        info("design", "n=%d p=%d, %d tracts excluded", len(design.ids), len(design.columns), len(design.excluded))
    with stage("model-fit"):
        fit, cv = fit_elastic_net(design.X, design.y, cfg, design.columns)
        (out / "model.json").write_text(fit.to_json(cv, args.seed) + "\n")
    reports = []
    for mode in ("cv", "holdout"):
        with stage(f"evaluate-{mode}"):
            reps = evaluate_run(design, cfg, mode, args.extractor, args.split)
            reports.extend(reps)
            emit_outputs(reps, None, tracts, out, tag=f"_{mode}")
            for r in reps:
                info(f"evaluate-{mode}", "%s n=%d folds=%d r2=%.4f rmse=%.4f pearson=%.4f", r.scope, r.n, r.folds,
                     r.r2, r.rmse, r.pearson)
    write_reports(reports, out / "reports.csv")
    return [args.tracts, args.weights, args.poi_fixture]


# ---------------------------------------------------------------------------
# argument parsing


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--workdir", type=Path, default=Path("."), help="base for all relative paths")
    g.add_argument("--config", type=Path, help="flat key = value file; flags override it")
    g.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads (default: logical CPUs)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])


def _endpoint_flags(p):
    p.add_argument("--base-url", default="")
    p.add_argument("--offline", action="store_true", help="never touch the network")
    p.add_argument("--max-concurrent", type=int, default=4)
    p.add_argument("--retry-limit", type=int, default=3)
    p.add_argument("--poi-fixture", type=Path, help="ndjson of place records used offline")


def _model_flags(p):
    p.add_argument("--target", choices=["prevalence", "income"], default="prevalence")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--folds", type=int, help="default: 5, or 3 when n < 200")
    p.add_argument("--feature-cap", type=int)
    p.add_argument("--path-length", type=int, default=100)


def _extractor_flags(p, choices=("baseline", "cnn")):
    p.add_argument("--extractor", choices=choices, default="baseline")
    p.add_argument("--weights", type=Path, help="CNW1 weight file (cnn extractor)")
    p.add_argument("--layer", help="layer whose activations are the features (default: last)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tractscope", description="Predict tract-level outcomes from imagery and places.")
    parser.add_argument("--version", action="version", version=f"tractscope {__version__}")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    leaves = {}

    def leaf(group, name, func, help_):
        sp = group.add_parser(name, help=help_)
        _common(sp)
        sp.set_defaults(func=func)
        leaves[(group_name, name)] = sp
        return sp

    group_name = "tracts"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "validate", cmd_tracts_validate, "parse and summarise a tract GeoJSON")
    p.add_argument("--tracts", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("validate"))

    group_name = "tiles"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "plan", cmd_tiles_plan, "tile grid per tract")
    p.add_argument("--tracts", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("plan"))
    p.add_argument("--zoom", type=int, default=18)
    p.add_argument("--tile-px", type=int, default=400)
    p = leaf(g, "fetch", cmd_tiles_fetch, "download planned tiles into the cache")
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--cache", type=Path, default=Path("tiles"))
    _endpoint_flags(p)

    group_name = "features"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "extract", cmd_features_extract, "per-tract mean feature vectors")
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--cache", type=Path, default=Path("tiles"))
    p.add_argument("--out", type=Path, default=Path("features"))
    p.add_argument("--format", choices=["fvs", "csv"], default="fvs")
    _extractor_flags(p)

    group_name = "net"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "activations", cmd_net_activations, "dump a layer's activation maps as PGM")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--layer")
    p.add_argument("--out", type=Path, default=Path("activations"))

    group_name = "poi"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "fetch", cmd_poi_fetch, "query places over a probe grid per tract")
    p.add_argument("--tracts", type=Path, required=True)
    p.add_argument("--radius", type=float, default=100.0, help="probe radius in meters")
    p.add_argument("--out", type=Path, default=Path("poi"))
    _endpoint_flags(p)
    p = leaf(g, "aggregate", cmd_poi_aggregate, "tract x category matrix")
    p.add_argument("--tracts", type=Path, required=True)
    p.add_argument("--poi", type=Path, required=True)
    p.add_argument("--mode", choices=["counts", "per-km2"], default="counts")
    p.add_argument("--categories", help="comma-separated vocabulary (default: categories seen)")
    p.add_argument("--out", type=Path, default=Path("poi"))

    group_name = "model"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name, func, help_ in (("fit", cmd_model_fit, "cross-validated elastic net fit"),
                              ("evaluate", cmd_model_evaluate, "pooled and per-region evaluation")):
        p = leaf(g, name, func, help_)
        p.add_argument("--tracts", type=Path, required=True)
        p.add_argument("--features", type=Path, required=True)
        p.add_argument("--out", type=Path, default=Path("model"))
        _model_flags(p)
        if name == "evaluate":
            p.add_argument("--mode", choices=["cv", "holdout"], default="cv")
            p.add_argument("--split", type=float, default=0.6, help="training fraction for holdout")
            p.add_argument("--featurizer", help="label recorded in reports (default: inferred)")

    group_name = "report"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "emit", cmd_report_emit, "scatter CSV, choropleth GeoJSON and report CSV")
    p.add_argument("--tracts", type=Path, required=True)
    p.add_argument("--reports", type=Path, required=True)
    p.add_argument("--scatter", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("report"))

    group_name = "synth"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "generate", cmd_synth_generate, "write a synthetic world")
    p.add_argument("--out", type=Path, default=Path("synth"))
    p.add_argument("--n-tracts", type=int, default=200)
    p.add_argument("--tile-px", type=int, default=64)
    p.add_argument("--target-r2", type=float, default=0.8)
    p.add_argument("--noise-sd", type=float)

    group_name = "pipeline"
    g = groups.add_parser(group_name).add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = leaf(g, "run", cmd_pipeline_run, "plan, fetch, featurize, fit, evaluate and report")
    p.add_argument("--world", type=Path, help="synthetic world directory (implies --offline)")
    p.add_argument("--tracts", type=Path)
    p.add_argument("--cache", type=Path)
    p.add_argument("--out", type=Path, default=Path("run"))
    p.add_argument("--zoom", type=int)
    p.add_argument("--tile-px", type=int)
    p.add_argument("--radius", type=float, default=100.0)
    p.add_argument("--mode", choices=["counts", "per-km2"], default="counts", help="POI matrix mode")
    p.add_argument("--categories")
    p.add_argument("--split", type=float, default=0.6)
    _extractor_flags(p, ("baseline", "cnn", "poi"))
    _model_flags(p)
    _endpoint_flags(p)
    parser.leaves = leaves
    return parser


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _prescan(argv, flag):
    for i, a in enumerate(argv):
        if a == flag and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith(flag + "="):
            return a.split("=", 1)[1]
    return None


def _parse(argv) -> argparse.Namespace:
    """Parse flags, with a ``--config`` file supplying defaults that flags override."""
    parser = build_parser()
    config = _prescan(argv, "--config")
    leaf = parser.leaves.get(tuple(argv[:2])) if len(argv) >= 2 else None
    if config is None or leaf is None:
        return parser.parse_args(argv)
    path = Path(config)
    if not path.is_absolute():
        path = Path(_prescan(argv, "--workdir") or ".") / path
    try:
        values = read_config(path)
    except OSError as e:
        leaf.error(f"cannot read config: {e}")
    except InputError as e:
        leaf.error(str(e))
    actions = {a.dest: a for a in leaf._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "version"):
            leaf.error(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in _TRUE | _FALSE:
                leaf.error(f"config key {key!r} expects a boolean")
            defaults[key] = value.lower() in _TRUE
        else:
            defaults[key] = value  # argparse applies the type to string defaults
        action.required = False
    leaf.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(args.log_level)
    if args.jobs < 1:
        log.error("--jobs must be positive", extra={"stage": "cli"})
        return 1
    for name in PATH_ARGS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(args, name, args.workdir / value)
    started = time.time()
    try:
        inputs = args.func(args)
    except InputError as e:
        log.error("%s", e, extra={"stage": "input"})
        return 1
    except StageError as e:
        log.error("%s", e, extra={"stage": e.stage})
        return 2
    if getattr(args, "out", None) is not None:
        write_manifest(args.out, args, argv, inputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
