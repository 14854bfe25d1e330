"""Scoring scene estimates against reported depths: MAE and Pearson r per variant."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import __version__
from .errors import ManifestError, UndefinedCorrelationError

VARIANTS = ("min", "avg", "max")
BASELINE = "baseline"
RESIDUAL_HEADER = ("id", "variant", "predicted_cm", "truth_cm", "error_cm")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    ground_truth_cm: float
    latitude: float | None = None
    longitude: float | None = None


def _number(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ManifestError(f"line {line}: {what} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ManifestError(f"line {line}: {what} must be finite: {text!r}")
    return value


def load_manifest(data: bytes | str) -> list[ManifestRecord]:
    """Parse a CSV manifest with header ``id,image_path,ground_truth_cm[,lat,lon]``."""
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    rows = csv.reader(io.StringIO(data))
    header = next(rows, None)
    if header is None:
        raise ManifestError("manifest is empty")
    header = [h.strip() for h in header]
    base = ["id", "image_path", "ground_truth_cm"]
    if header not in (base, base + ["lat", "lon"]):
        raise ManifestError(f"manifest header must be id,image_path,ground_truth_cm[,lat,lon]; got {','.join(header)}")
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for line, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"line {line}: expected {len(header)} columns, got {len(row)}")
        rid, path, gt = (c.strip() for c in row[:3])
        if not rid:
            raise ManifestError(f"line {line}: empty id")
        if rid in seen:
            raise ManifestError(f"line {line}: duplicate id {rid!r}")
        seen.add(rid)
        truth = _number(gt, "ground_truth_cm", line)
        if truth < 0:
            raise ManifestError(f"line {line}: ground_truth_cm must be >= 0, got {gt}")
        lat = lon = None
        if len(row) == 5:
            lat = _number(row[3], "lat", line) if row[3].strip() else None
            lon = _number(row[4], "lon", line) if row[4].strip() else None
        records.append(ManifestRecord(rid, path, truth, lat, lon))
    return records


def mae(predicted: Sequence[float], truth: Sequence[float]) -> float:
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} truths")
    if not predicted:
        raise ValueError("mae of empty lists")
    return math.fsum(abs(p - t) for p, t in zip(predicted, truth)) / len(predicted)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; raises UndefinedCorrelationError when undefined."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise UndefinedCorrelationError(f"pearson needs at least 2 points, got {n}")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("pearson is undefined for zero variance")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class VariantPredictions:
    min: float
    avg: float
    max: float

    def get(self, variant: str) -> float:
        return getattr(self, variant)


@dataclass(frozen=True)
class VariantMetrics:
    mae_cm: float | None
    pearson_r: float | None
    n_scored: int
    n_failed: int


@dataclass(frozen=True)
class Residual:
    id: str
    variant: str
    predicted_cm: float
    truth_cm: float
    error_cm: float


@dataclass(frozen=True)
class MetricsReport:
    n_records: int
    variants: Mapping[str, VariantMetrics]
    residuals: tuple[Residual, ...]

    @property
    def n_failed(self) -> int:
        return self.variants["avg"].n_failed


def _score(pairs: list[tuple[float, float]], n_records: int) -> VariantMetrics:
    if not pairs:
        return VariantMetrics(None, None, 0, n_records)
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    try:
        r = pearson(pred, truth)
    except UndefinedCorrelationError:
        r = None
    return VariantMetrics(mae(pred, truth), r, len(pairs), n_records - len(pairs))


def evaluate(
    manifest: Sequence[ManifestRecord],
    outcomes: Mapping[str, VariantPredictions | None],
    baseline: Mapping[str, float | None] | None = None,
) -> MetricsReport:
    """Score each variant over the records that produced an estimate.

    Records absent from ``outcomes`` or mapped to None (failure, no estimate)
    count toward ``n_failed`` and are never imputed.
    """
    ids = {r.id for r in manifest}
    for source, mapping in (("outcomes", outcomes), ("baseline", baseline or {})):
        unknown = sorted(set(mapping) - ids)
        if unknown:
            raise ManifestError(f"{source} reference id(s) not in manifest: {', '.join(unknown)}")

    columns = list(VARIANTS) + ([BASELINE] if baseline is not None else [])
    pairs: dict[str, list[tuple[float, float]]] = {v: [] for v in columns}
    residuals: list[Residual] = []
    for rec in manifest:
        pred = outcomes.get(rec.id)
        values = {v: pred.get(v) for v in VARIANTS} if pred is not None else {}
        if baseline is not None and baseline.get(rec.id) is not None:
            values[BASELINE] = baseline[rec.id]
        for v in columns:
            if v in values:
                p = float(values[v])
                pairs[v].append((p, rec.ground_truth_cm))
                residuals.append(Residual(rec.id, v, p, rec.ground_truth_cm, p - rec.ground_truth_cm))
    return MetricsReport(
        n_records=len(manifest),
        variants={v: _score(pairs[v], len(manifest)) for v in columns},
        residuals=tuple(residuals),
    )


def predictions_from_result(doc: dict) -> VariantPredictions | None:
    """Extract min/avg/max from a per-scene result document (None unless status is estimate)."""
    if doc.get("status") != "estimate":
        return None
    return VariantPredictions(doc["depth_min_cm"], doc["depth_avg_cm"], doc["depth_max_cm"])


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "tool_version": __version__,
        "n_records": report.n_records,
        "variants": {
            name: {"mae_cm": m.mae_cm, "pearson_r": m.pearson_r, "n_scored": m.n_scored, "n_failed": m.n_failed}
            for name, m in report.variants.items()
        },
        "residuals": [
            {"id": r.id, "variant": r.variant, "predicted_cm": r.predicted_cm,
             "truth_cm": r.truth_cm, "error_cm": r.error_cm}
            for r in report.residuals
        ],
    }


def report_from_dict(doc: dict) -> MetricsReport:
    return MetricsReport(
        n_records=doc["n_records"],
        variants={name: VariantMetrics(**m) for name, m in doc["variants"].items()},
        residuals=tuple(Residual(**r) for r in doc["residuals"]),
    )


def export_report(report: MetricsReport) -> tuple[bytes, bytes]:
    """Serialize to (metrics JSON, residuals CSV). Output is byte-deterministic."""
    metrics = json.dumps(report_to_dict(report), indent=2, sort_keys=True, allow_nan=False) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESIDUAL_HEADER)
    for r in report.residuals:
        writer.writerow([r.id, r.variant, repr(r.predicted_cm), repr(r.truth_cm), repr(r.error_cm)])
    return metrics.encode("utf-8"), buf.getvalue().encode("utf-8")
