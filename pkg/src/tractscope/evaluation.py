"""Metrics, pooled and per-region evaluation, and scatter/choropleth output."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import DesignMatrix
from .geo import TractRecord
from .model import ElasticNetConfig, fit_elastic_net, predict, train_test_split

log = logging.getLogger(__name__)

REPORT_HEADER = ["scope", "target", "featurizer", "mode", "n", "folds", "alpha", "lambda", "r2", "rmse", "pearson", "seed"]


def _pair(y, yhat):
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    return y, yhat


def r_squared(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if len(y) < 2:
        raise ValueError("r_squared needs at least 2 observations")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("r_squared undefined for constant y")
    return 1.0 - float(((y - yhat) ** 2).sum()) / ss_tot


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if len(y) < 1:
        raise ValueError("rmse needs at least 1 observation")
    return math.sqrt(float(((y - yhat) ** 2).mean()))


def pearson(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if len(y) < 2:
        raise ValueError("undefined correlation: fewer than 2 observations")
    a = y - y.mean()
    b = yhat - yhat.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0:
        raise ValueError("undefined correlation")
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


@dataclass
class Predictions:
    ids: list[str]
    regions: list[str]
    actual: np.ndarray
    predicted: np.ndarray


@dataclass
class EvalReport:
    scope: str  # "pooled" or "region:<label>"
    target: str
    featurizer: str
    mode: str  # cv (out-of-fold estimates) or holdout (out-of-sample)
    n: int
    folds: int
    alpha: float
    lambda_: float
    r2: float
    rmse: float
    pearson: float
    seed: int
    excluded: list[str] = field(default_factory=list)
    predictions: Predictions | None = field(default=None, repr=False)

    def row(self) -> list[str]:
        def num(v):
            return f"{v:.6g}"

        return [self.scope, self.target, self.featurizer, self.mode, str(self.n), str(self.folds),
                num(self.alpha), num(self.lambda_), num(self.r2), num(self.rmse), num(self.pearson), str(self.seed)]

    @classmethod
    def from_row(cls, row: dict) -> "EvalReport":
        return cls(row["scope"], row["target"], row["featurizer"], row["mode"], int(row["n"]), int(row["folds"]),
                   float(row["alpha"]), float(row["lambda"]), float(row["r2"]), float(row["rmse"]),
                   float(row["pearson"]), int(row["seed"]))


def _metrics(y, yhat):
    try:
        r = pearson(y, yhat)
    except ValueError:
        # a null model predicts a constant; report the correlation as undefined
        r = float("nan")
    return r_squared(y, yhat), rmse(y, yhat), r


def _evaluate(design: DesignMatrix, cfg: ElasticNetConfig, mode: str, fraction: float):
    """Run one full procedure; returns (folds, lambda, Predictions)."""
    if mode == "cv":
        _, cv = fit_elastic_net(design.X, design.y, cfg, design.columns)
        preds = Predictions(list(design.ids), list(design.regions), design.y.copy(), cv.oof_predictions.copy())
        return cv.folds, cv.lambda_, preds
    if mode == "holdout":
        train_ids, test_ids = train_test_split(design.ids, fraction, cfg.seed)
        if set(train_ids) & set(test_ids):
            raise AssertionError("train and test ids overlap")
        pos = {t: i for i, t in enumerate(design.ids)}
        tr = design.subset(pos[t] for t in train_ids)
        te = design.subset(pos[t] for t in test_ids)
        if te.y.size < 2:
            raise ValueError("holdout split leaves fewer than 2 test rows")
        fit, cv = fit_elastic_net(tr.X, tr.y, cfg, tr.columns)
        preds = Predictions(list(te.ids), list(te.regions), te.y.copy(), predict(fit, te.X))
        return cv.folds, cv.lambda_, preds
    raise ValueError(f"unknown mode {mode!r}")


def evaluate_run(design: DesignMatrix, cfg: ElasticNetConfig, mode: str = "cv", featurizer: str = "baseline",
                 fraction: float = 0.6, per_region: bool = True) -> list[EvalReport]:
    """Pooled report first, then one report per region label in sorted order.

    Each region re-runs the whole procedure on its own rows, so the fold
    count is re-resolved from that region's size.
    """
    scopes = [("pooled", design)]
    if per_region:
        for label in sorted(set(design.regions)):
            rows = [i for i, r in enumerate(design.regions) if r == label]
            sub = design.subset(rows)
            n_fit = len(rows) if mode == "cv" else int(math.floor(fraction * len(rows) + 0.5))
            k = cfg.resolve_folds(n_fit)
            if n_fit < 2 * k:
                raise ValueError(f"region {label!r} has n={len(rows)} rows, too few for {k} folds")
            scopes.append((f"region:{label}", sub))

    reports = []
    for scope, d in scopes:
        folds, lam, preds = _evaluate(d, cfg, mode, fraction)
        r2, err, r = _metrics(preds.actual, preds.predicted)
        if math.isnan(r):
            log.warning("%s: predictions are constant, correlation undefined", scope)
        reports.append(EvalReport(scope, design.target, featurizer, mode, len(preds.ids), folds, cfg.alpha, lam,
                                  r2, err, r, cfg.seed, list(design.excluded), preds))
    return reports


# ---------------------------------------------------------------------------
# output files


def write_reports(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for rep in reports:
            w.writerow(rep.row())


def read_reports(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and list(rows[0]) != REPORT_HEADER:
        raise ValueError(f"{path}: unexpected report header")
    return rows


def write_scatter(predictions: Predictions, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tract_id", "region", "actual", "predicted"])
        for tid, reg, a, p in zip(predictions.ids, predictions.regions, predictions.actual, predictions.predicted):
            w.writerow([tid, reg, repr(float(a)), repr(float(p))])


def read_scatter(path) -> Predictions:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and list(rows[0]) != ["tract_id", "region", "actual", "predicted"]:
        raise ValueError(f"{path}: unexpected scatter header")
    return Predictions([r["tract_id"] for r in rows], [r["region"] for r in rows],
                       np.array([float(r["actual"]) for r in rows]), np.array([float(r["predicted"]) for r in rows]))


def choropleth(predictions: Predictions, tracts: Sequence[TractRecord]) -> dict:
    """Input tracts annotated with actual/predicted/residual; null where a tract was not modeled."""
    by_id = {t: (float(a), float(p)) for t, a, p in zip(predictions.ids, predictions.actual, predictions.predicted)}
    features = []
    for tr in tracts:
        props = dict(tr.properties)
        if tr.id in by_id:
            a, p = by_id[tr.id]
            props.update(actual=a, predicted=p, residual=a - p)
        else:
            props.update(actual=None, predicted=None, residual=None)
        features.append({"type": "Feature", "properties": props, "geometry": tr.geometry.to_geojson()})
    return {"type": "FeatureCollection", "features": features}


def emit_outputs(reports: Sequence[EvalReport], predictions: Predictions | None, tracts: Sequence[TractRecord],
                 out_dir, tag: str = "") -> dict[str, Path]:
    """Write reports.csv, scatter{tag}.csv and choropleth{tag}.geojson.

    ``predictions`` defaults to those of the first report.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    if predictions is None:
        predictions = reports[0].predictions
    paths = {"reports": out / "reports.csv", "scatter": out / f"scatter{tag}.csv",
             "choropleth": out / f"choropleth{tag}.geojson"}
    write_reports(reports, paths["reports"])
    write_scatter(predictions, paths["scatter"])
    paths["choropleth"].write_text(json.dumps(choropleth(predictions, tracts)) + "\n")
    return paths


def pooled(reports: Sequence[EvalReport]) -> EvalReport:
    return next(r for r in reports if r.scope == "pooled")
