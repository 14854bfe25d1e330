"""Command-line entry point: ``floodvision {estimate,batch,kg,evaluate,simulate}``.

Exit codes: 0 success, 1 runtime failure, 2 validation or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import __version__
from .depth import (
    FilterPolicy,
    OutcomeStatus,
    baseline_to_dict,
    estimate_baseline,
    estimate_scene,
    outcome_to_dict,
)
from .errors import (
    ConfigError,
    FloodVisionError,
    ImagePayloadError,
    KgError,
    KgValidationError,
    ManifestError,
    PendingEntryError,
    SimConfigError,
    UnknownEntityError,
)
from .evaluation import (
    evaluate,
    export_report,
    load_manifest,
    predictions_from_result,
)
from .kg import KnowledgeGraph, add_pending, load_kg, promote, save_kg, validate
from .sim import NoiseModel, SimConfig, run_study
from .vlm import (
    API_KEY_ENV,
    BackendConfig,
    BackendKind,
    ImagePayload,
    build_baseline_prompt,
    build_prompt,
)

logger = logging.getLogger("floodvision")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(FloodVisionError):
    pass


def default_kg_path() -> Path:
    return Path(str(resources.files("floodvision") / "data" / "floodkg.json"))


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class AppConfig:
    backend: BackendConfig
    kg_path: Path
    filter: FilterPolicy
    output_dir: Path
    parallelism: int

    def echo(self, kg: KnowledgeGraph) -> dict:
        # parallelism is deliberately absent: it must not change output bytes
        return {
            "backend": self.backend.to_dict(),
            "kg_path": str(self.kg_path),
            "kg_version": kg.version,
            "filter": self.filter.to_dict(),
        }


def load_config(path: str | None, *, kg: str | None = None, out: str | None = None,
                parallelism: int | None = None, fixture_dir: str | None = None) -> AppConfig:
    """Read the JSON config; explicit flags override file keys.

    Relative paths in the file are resolved against the file's directory.
    """
    doc: dict = {}
    base = Path.cwd()
    if path:
        p = Path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        base = p.resolve().parent
    unknown = set(doc) - {"backend", "kg_path", "filter", "output_dir", "parallelism"}
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    def resolve(value, cli_value):
        if cli_value is not None:
            return Path(cli_value)
        if value is None:
            return None
        v = Path(value)
        return v if v.is_absolute() else base / v

    backend_doc = dict(doc.get("backend", {}))
    fixture = resolve(backend_doc.get("fixture_dir"), fixture_dir)
    if fixture is not None:
        backend_doc["fixture_dir"] = str(fixture)
    try:
        backend = BackendConfig.from_dict(backend_doc)
    except TypeError as exc:
        raise ConfigError(f"backend: {exc}") from None
    try:
        policy = FilterPolicy.from_dict(doc.get("filter", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"filter: {exc}") from None

    kg_path = resolve(doc.get("kg_path"), kg) or default_kg_path()
    output_dir = resolve(doc.get("output_dir"), out) or Path("results")
    par = parallelism if parallelism is not None else doc.get("parallelism", backend.parallelism)
    if not isinstance(par, int) or par < 1:
        raise ConfigError(f"parallelism must be an integer >= 1, got {par!r}")

    if not kg_path.is_file():
        raise ConfigError(f"kg_path does not exist: {kg_path}")
    if backend.kind is BackendKind.MOCK and not Path(backend.fixture_dir).is_dir():
        raise ConfigError(f"backend.fixture_dir does not exist: {backend.fixture_dir}")
    if backend.kind is BackendKind.HTTP and not os.environ.get(API_KEY_ENV):
        raise ConfigError(f"environment variable {API_KEY_ENV} must be set for backend.kind=http")
    return AppConfig(backend, kg_path, policy, output_dir, par)


def _read_kg(path: Path) -> KnowledgeGraph:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"KG file not found: {path}") from None
    return load_kg(data)


# ---------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    cfg = load_config(args.config, kg=args.kg, fixture_dir=args.fixture_dir)
    kg = _read_kg(cfg.kg_path)
    image = ImagePayload.from_path(args.image)
    outcome = estimate_scene(kg, cfg.backend, image, build_prompt(), cfg.filter)
    doc = outcome_to_dict(outcome)
    doc["image"] = args.image
    doc["tool_version"] = __version__
    doc["config"] = cfg.echo(kg)
    sys.stdout.write(_dumps(doc))
    return EXIT_RUNTIME if outcome.status is OutcomeStatus.FAILURE else EXIT_OK


def _run_record(rec, root: Path, kg, cfg: AppConfig, baseline: bool):
    path = Path(rec.image_path)
    if not path.is_absolute():
        path = root / path
    try:
        image = ImagePayload.from_path(path)
    except (OSError, FloodVisionError) as exc:
        doc = {"image": rec.image_path, "status": "failure", "error": str(exc), "error_type": type(exc).__name__}
        if not baseline:
            doc.update(depth_min_cm=None, depth_avg_cm=None, depth_max_cm=None, n_used=0,
                       objects=[], pending_entries=[], warnings=[], raw_response=None)
        else:
            doc.update(depth_cm=None, raw_response=None)
        return doc, []
    if baseline:
        doc = baseline_to_dict(estimate_baseline(cfg.backend, image, build_baseline_prompt()))
        pending = []
    else:
        outcome = estimate_scene(kg, cfg.backend, image, build_prompt(), cfg.filter)
        doc = outcome_to_dict(outcome)
        pending = list(outcome.pending)
    doc["image"] = rec.image_path
    return doc, pending


def cmd_batch(args) -> int:
    cfg = load_config(args.config, kg=args.kg, out=args.out, parallelism=args.parallelism,
                      fixture_dir=args.fixture_dir)
    if args.apply_pending and args.baseline:
        raise UsageError("--apply-pending cannot be combined with --baseline")
    manifest_path = Path(args.manifest)
    try:
        records = load_manifest(manifest_path.read_bytes())
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {manifest_path}") from None
    kg = _read_kg(cfg.kg_path)
    root = manifest_path.resolve().parent
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo(kg)
    echo["mode"] = "baseline" if args.baseline else "grounded"

    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        results = list(pool.map(lambda r: _run_record(r, root, kg, cfg, args.baseline), records))

    counts = {s.value: 0 for s in OutcomeStatus}
    summary_rows = []
    for rec, (doc, _) in zip(records, results):
        doc = {"id": rec.id, **doc, "tool_version": __version__, "config": echo}
        (out / f"{rec.id}.json").write_text(_dumps(doc), encoding="utf-8")
        counts[doc["status"]] += 1
        row = {"id": rec.id, "status": doc["status"]}
        if args.baseline:
            row["depth_cm"] = doc.get("depth_cm")
        else:
            row["depth_avg_cm"] = doc.get("depth_avg_cm")
        summary_rows.append(row)

    summary = {
        "tool_version": __version__,
        "config": echo,
        "manifest": str(args.manifest),
        "n_records": len(records),
        "counts": counts,
        "records": summary_rows,
    }

    if args.apply_pending:
        events = [e for _, (_, pending) in zip(records, results) for e in pending]
        updated = kg
        applied = 0
        for e in events:
            try:
                updated = add_pending(updated, e.label, e.height_cm)
                applied += 1
            except PendingEntryError as exc:
                logger.warning("skipped pending entry %r: %s", e.label, exc)
        problems = validate(updated)
        if problems:
            raise KgValidationError(problems)
        if applied:
            atomic_write(cfg.kg_path, save_kg(updated))
        summary["pending_applied"] = applied

    (out / "summary.json").write_text(_dumps(summary), encoding="utf-8")
    logger.info("batch done: %s", counts)
    return EXIT_OK


def cmd_kg_validate(args) -> int:
    data = Path(args.path).read_bytes()
    try:
        kg = load_kg(data)
    except KgValidationError as exc:
        print(f"{args.path}: {len(exc.violations)} violation(s)", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_USAGE
    n_pending = sum(1 for e in kg.entities.values() if e.status.value == "pending")
    print(f"{args.path}: valid ({len(kg.entities)} entities, {len(kg.relations)} relations, {n_pending} pending)")
    return EXIT_OK


def cmd_kg_show(args) -> int:
    kg = _read_kg(Path(args.kg) if args.kg else default_kg_path())
    e = kg.entities.get(args.id)
    if e is None:
        raise UnknownEntityError(args.id)
    doc = {
        "id": e.id,
        "label": e.label,
        "aliases": list(e.aliases),
        "height_mean_cm": e.height_mean,
        "height_std_cm": e.height_std,
        "category": e.category,
        "source": e.source,
        "status": e.status.value,
        "observation_count": e.observation_count,
        "relations": [
            {"subject": r.subject, "predicate": r.predicate.value, "object": r.object}
            for r in sorted(kg.relations) if e.id in (r.subject, r.object)
        ],
    }
    sys.stdout.write(_dumps(doc))
    return EXIT_OK


def cmd_kg_promote(args) -> int:
    path = Path(args.kg)
    kg = _read_kg(path)
    atomic_write(path, save_kg(promote(kg, args.id, args.source)))
    print(f"promoted {args.id} to canonical")
    return EXIT_OK


def _load_dir(directory: Path, ids, extract):
    out = {}
    for rid in ids:
        p = directory / f"{rid}.json"
        if not p.is_file():
            logger.warning("no result file for %s in %s", rid, directory)
            continue
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        out[rid] = extract(doc, p)
    return out


def _baseline_value(doc, path):
    if doc.get("status") != "estimate":
        return None
    if "depth_cm" not in doc:
        raise ConfigError(f"{path}: baseline result lacks depth_cm")
    return doc["depth_cm"]


def _grounded_value(doc, path):
    try:
        return predictions_from_result(doc)
    except KeyError as exc:
        raise ConfigError(f"{path}: result lacks field {exc.args[0]}") from None


def cmd_evaluate(args) -> int:
    try:
        records = load_manifest(Path(args.manifest).read_bytes())
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {args.manifest}") from None
    ids = [r.id for r in records]
    results_dir = Path(args.results)
    if not results_dir.is_dir():
        raise ConfigError(f"results directory not found: {results_dir}")
    outcomes = _load_dir(results_dir, ids, _grounded_value)
    baseline = None
    if args.baseline:
        bdir = Path(args.baseline)
        if not bdir.is_dir():
            raise ConfigError(f"baseline directory not found: {bdir}")
        baseline = _load_dir(bdir, ids, _baseline_value)
    report = evaluate(records, outcomes, baseline)
    metrics, residuals = export_report(report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_bytes(metrics)
    (out / "residuals.csv").write_bytes(residuals)
    for name, m in report.variants.items():
        mae = f"{m.mae_cm:.2f}" if m.mae_cm is not None else "n/a"
        r = f"{m.pearson_r:.2f}" if m.pearson_r is not None else "n/a"
        print(f"{name:>8}  MAE {mae:>7} cm  r {r:>5}  scored {m.n_scored}  failed {m.n_failed}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    kg = _read_kg(Path(args.kg) if args.kg else default_kg_path())
    config = SimConfig(seed=args.seed, n_scenes=args.n, depth_range_cm=(args.depth_min, args.depth_max))
    noise = NoiseModel(sigma_h=args.sigma_h, sigma_r=args.sigma_r, mislabel_prob=args.mislabel)
    report = run_study(kg, config, noise)
    text = _dumps(report.to_dict(kg, config, noise))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="floodvision", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"floodvision {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate flood depth for one image")
    est.add_argument("--image", required=True)
    est.add_argument("--config")
    est.add_argument("--kg", help="KG file (overrides kg_path)")
    est.add_argument("--fixture-dir", help="mock fixture directory (overrides backend.fixture_dir)")
    est.set_defaults(func=cmd_estimate)

    bat = sub.add_parser("batch", help="estimate every image in a manifest")
    bat.add_argument("--manifest", required=True)
    bat.add_argument("--config")
    bat.add_argument("--kg")
    bat.add_argument("--out", help="results directory (overrides output_dir)")
    bat.add_argument("--parallelism", type=int)
    bat.add_argument("--fixture-dir")
    bat.add_argument("--baseline", action="store_true", help="run the KG-free single-depth prompt instead")
    bat.add_argument("--apply-pending", action="store_true",
                     help="write provisional heights of unmatched objects back to the KG file")
    bat.set_defaults(func=cmd_batch)

    kg = sub.add_parser("kg", help="knowledge graph curation")
    kg_sub = kg.add_subparsers(dest="kg_command", required=True)
    val = kg_sub.add_parser("validate")
    val.add_argument("path")
    val.set_defaults(func=cmd_kg_validate)
    show = kg_sub.add_parser("show")
    show.add_argument("id")
    show.add_argument("--kg")
    show.set_defaults(func=cmd_kg_show)
    prom = kg_sub.add_parser("promote", help="mark a pending entity canonical")
    prom.add_argument("id")
    prom.add_argument("--kg", required=True)
    prom.add_argument("--source", help="provenance citation for the promoted height")
    prom.set_defaults(func=cmd_kg_promote)

    ev = sub.add_parser("evaluate", help="score batch results against a manifest")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--results", required=True)
    ev.add_argument("--baseline")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    sim = sub.add_parser("simulate", help="run the seeded grounding study")
    sim.add_argument("--kg")
    sim.add_argument("--seed", type=int, default=42)
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--sigma-h", type=float, default=0.3)
    sim.add_argument("--sigma-r", type=float, default=0.05)
    sim.add_argument("--mislabel", type=float, default=0.1)
    sim.add_argument("--depth-min", type=float, default=5.0)
    sim.add_argument("--depth-max", type=float, default=80.0)
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError, KgError, ManifestError, SimConfigError, ImagePayloadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloodVisionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
