"""Command-line front door.

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error, bad model document or CSV schema mismatch
    3  training diverged (non-finite loss or residual outside its domain)
    4  corrupt or unreadable inverse-map file
    5  output path not writable
    6  model does not reduce to a scalar equation (oracle)
    7  compare: discrepancy above tolerance
    8  train: stopped at the epoch cap before reaching mse-stop

Standard output carries only the machine-readable payload; logs and
diagnostics go to standard error. Every command that writes a file also
writes ``<output stem>.manifest.json`` next to it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, net, oracle
from .inverse import (MapFormatError, TrainingDivergedError, compare_diagrams, detect_thresholds, diagram_csv,
                      load_map, map_to_json, predict_branch, read_diagram_csv, sample_candidates, train)
from .inverse import DiagramPoint, DisjointSupportError
from .models import ZOO_IDS, ModelError, dump_spec, load_entry, zoo_document, zoo_entry

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CORRUPT_MAP = 4
EXIT_UNWRITABLE = 5
EXIT_UNSUPPORTED = 6
EXIT_OUT_OF_TOLERANCE = 7
EXIT_EPOCH_CAP = 8

log = logging.getLogger("einn")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# --- small helpers -----------------------------------------------------------------

def parse_range(text: str) -> tuple:
    """'lo:hi' with lo < hi; scientific notation allowed."""
    parts = text.split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers in lo:hi, got {text!r}") from None
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise argparse.ArgumentTypeError(f"range {text!r} must satisfy lo < hi")
    return lo, hi


def _int(text):
    # accept 1e6 style integers
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if not value.is_integer():
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    return int(value)


def _positive_int(text):
    value = _int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _nonnegative_int(text):
    value = _int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def _assignment(text):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in {text!r}") from None


def resolve_model(ref: str):
    """Zoo id or path to a model document; returns (ZooEntry, document text)."""
    try:
        if ref in ZOO_IDS:
            text = zoo_document(ref)
        else:
            path = Path(ref)
            if not path.is_file():
                raise CliError(f"unknown model {ref!r}: not a zoo id ({', '.join(ZOO_IDS)}) or a file", EXIT_USAGE)
            text = path.read_text()
        return load_entry(text), text
    except ModelError as exc:
        raise CliError(f"model {ref!r}: {exc}", EXIT_USAGE) from None


def atomic_write(path, text: str) -> None:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_UNWRITABLE) from None
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_UNWRITABLE) from None


def manifest_path(output, tag: str = "") -> Path:
    """`dir/name.csv` -> `dir/name.manifest.json`; a tag goes before `.manifest`."""
    p = Path(output)
    stem = p.name[: -len(p.suffix)] if p.suffix else p.name
    return p.with_name(stem + (f".{tag}" if tag else "") + ".manifest.json")


@dataclass
class RunManifest:
    command_line: list
    command: str
    model: str | None
    seed: int | None
    train_config: dict | None
    started: str
    finished: str = ""
    tool_version: str = __version__
    outputs: list = field(default_factory=list)
    final_mse: float | None = None
    stop_reason: str | None = None
    inputs: dict = field(default_factory=dict)  # path -> sha256
    model_sha256: str | None = None
    environment: dict = field(default_factory=lambda: {
        "python": platform.python_version(), "numpy": np.__version__, "platform": platform.platform()})
    exit_code: int = 0

    def to_json(self):
        return json.dumps(asdict(self), indent=2) + "\n"


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256_text(text):
    return hashlib.sha256(text.encode()).hexdigest()


def _sha256_file(path):
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def _write_manifest(manifest: RunManifest, path, required=True):
    manifest.finished = _now()
    try:
        atomic_write(path, manifest.to_json())
    except CliError as exc:
        if required:
            raise
        log.warning("manifest not written: %s", exc)


def _read_map(path):
    try:
        return load_map(path)
    except MapFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CORRUPT_MAP) from None
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read map {path}: {exc}", EXIT_CORRUPT_MAP) from None


def _emit(text):
    sys.stdout.write(text)
    sys.stdout.flush()


# --- commands ------------------------------------------------------------------------

def cmd_train(args, manifest: RunManifest) -> int:
    entry, text = resolve_model(args.model)
    spec = entry.spec
    seed = args.seed
    env_seed = os.environ.get("EINN_SEED")
    if env_seed is not None and env_seed.strip():
        try:
            seed = int(env_seed)
        except ValueError:
            raise CliError(f"EINN_SEED must be an integer, got {env_seed!r}", EXIT_USAGE) from None
    lo, hi = args.range if args.range is not None else spec.candidate_window
    try:
        grid = sample_candidates((lo, hi), args.samples, coordinate=spec.candidate_coordinate)
        config = net.TrainConfig(args.lr, args.mse_stop, args.max_epochs, seed)
    except (ValueError, net.NetError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    out_dir = Path(args.out_dir)
    out = Path(args.out) if args.out else out_dir / f"{spec.id}.map.json"
    if not out.parent.is_dir():
        raise CliError(f"output directory {out.parent} does not exist", EXIT_UNWRITABLE)
    manifest.model = args.model
    manifest.model_sha256 = _sha256_text(text)
    manifest.seed = seed
    manifest.train_config = {"range": [lo, hi], "samples": args.samples, "learning_rate": config.learning_rate,
                             "mse_stop": config.mse_stop, "max_epochs": config.max_epochs, "seed": seed,
                             "hidden_layers": [10, 10, 10, 10]}
    try:
        map_ = train(spec, grid, config, log_every=args.log_every)
    except TrainingDivergedError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    atomic_write(out, map_to_json(map_))
    manifest.outputs = [str(out)]
    manifest.final_mse = map_.final_mse
    manifest.stop_reason = map_.stop_reason
    code = EXIT_OK if map_.stop_reason == "converged" else EXIT_EPOCH_CAP
    manifest.exit_code = code
    _write_manifest(manifest, manifest_path(out))
    _emit(json.dumps({"map": str(out), "model_id": spec.id, "seed": seed, "final_mse": map_.final_mse,
                      "last_mse": map_.last_mse, "stop_reason": map_.stop_reason, "epochs": map_.epochs,
                      "best_epoch": map_.best_epoch}, indent=2) + "\n")
    if code == EXIT_EPOCH_CAP:
        log.warning("stopped at the epoch cap with mse %.3e (mse-stop %.1e)", map_.final_mse, config.mse_stop)
    return code


def cmd_thresholds(args, manifest: RunManifest) -> int:
    map_ = _read_map(args.map)
    scan = args.scan
    if scan is not None and scan < map_.grid.n:
        raise CliError(f"--scan must be at least the grid size ({map_.grid.n})", EXIT_USAGE)
    report = detect_thresholds(map_, scan, args.tol)
    payload = report.to_json()
    manifest.model = map_.model.id
    manifest.seed = map_.config.rng_seed
    manifest.final_mse = map_.final_mse
    manifest.stop_reason = map_.stop_reason
    manifest.inputs = {str(args.map): _sha256_file(args.map)}
    if args.out:
        atomic_write(args.out, payload)
        manifest.outputs = [str(args.out)]
        _write_manifest(manifest, manifest_path(args.out))
    else:
        _write_manifest(manifest, manifest_path(args.map, "thresholds"), required=False)
    _emit(payload)
    return EXIT_OK


def cmd_diagram(args, manifest: RunManifest) -> int:
    map_ = _read_map(args.map)
    lo, hi = args.range if args.range is not None else (map_.lo, map_.hi)
    points = predict_branch(map_, np.linspace(lo, hi, args.points)) if args.points else []
    payload = diagram_csv(map_.model, points)
    manifest.model = map_.model.id
    manifest.seed = map_.config.rng_seed
    manifest.final_mse = map_.final_mse
    manifest.stop_reason = map_.stop_reason
    manifest.inputs = {str(args.map): _sha256_file(args.map)}
    if args.out:
        atomic_write(args.out, payload)
        manifest.outputs = [str(args.out)]
        _write_manifest(manifest, manifest_path(args.out))
    else:
        _emit(payload)
    return EXIT_OK


def cmd_oracle(args, manifest: RunManifest) -> int:
    entry, text = resolve_model(args.model)
    spec = entry.spec
    overrides = dict(args.set or [])
    try:
        if overrides:
            spec = spec.with_parameters(**overrides)
            entry = type(entry)(spec, entry.closed_form_inverse, entry.reference_thresholds)
        oracle.reduce_model(spec)
        lam_range = args.lambda_range or spec.lambda_window
        if lam_range is None:
            raise CliError(f"model {spec.id!r} has no lambda_window; pass --lambda lo:hi", EXIT_USAGE)
        grid = np.linspace(lam_range[0], lam_range[1], args.grid)
        diagram = oracle.sweep(spec, grid, args.window, args.subdivisions, jobs=args.jobs)
        report = oracle.threshold_report(entry, args.threshold_window)
    except oracle.UnsupportedModelError as exc:
        raise CliError(str(exc), EXIT_UNSUPPORTED) from None
    except ModelError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    sweep_csv = diagram.to_csv()
    report_json = report.to_json()
    manifest.model = args.model
    manifest.model_sha256 = _sha256_text(text)
    outputs = []
    if args.out:
        thr = Path(args.thresholds) if args.thresholds else Path(args.out).with_suffix(".thresholds.json")
        atomic_write(args.out, sweep_csv)
        atomic_write(thr, report_json)
        outputs = [str(args.out), str(thr)]
        manifest.outputs = outputs
        _write_manifest(manifest, manifest_path(args.out))
        _emit(report_json)
    else:
        if args.thresholds:
            atomic_write(args.thresholds, report_json)
            manifest.outputs = [str(args.thresholds)]
            _write_manifest(manifest, manifest_path(args.thresholds))
        _emit(sweep_csv)
    counts = diagram.count_pattern()
    log.info("%s: equilibrium-count pattern %s over %s in [%g, %g]", spec.id, counts,
             spec.bifurcation_param, grid[0] if grid.size else float("nan"), grid[-1] if grid.size else float("nan"))
    return EXIT_OK


def _load_curve(path):
    """Read a diagram or sweep CSV.

    Returns (kind, names, rows, model id or None): companion names and DiagramPoints for a
    diagram, state names and raw sweep rows for a sweep.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}", EXIT_USAGE) from None
    model_id = None
    mpath = manifest_path(path)
    if mpath.is_file():
        try:
            model_id = json.loads(mpath.read_text()).get("model")
        except (OSError, ValueError):
            model_id = None
    header = text.split("\n", 1)[0]
    try:
        if header.startswith("u_star"):
            companions, points = read_diagram_csv(text)
            return "diagram", companions, [p for p in points if p.feasible], model_id
        if header.startswith("lambda"):
            names, rows = oracle.read_sweep_csv(text)
            return "sweep", names, rows, model_id
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_USAGE) from None
    raise CliError(f"{path}: not a diagram or sweep CSV", EXIT_USAGE)


def _sweep_points(names, rows, companions):
    """Sweep rows as DiagramPoints; the candidate is the state column that is not a companion."""
    rest = [i for i, name in enumerate(names) if name not in companions]
    if len(rest) != 1 or len(names) != len(companions) + 1:
        raise CliError(f"schema mismatch: sweep states {list(names)} vs companions {list(companions)}", EXIT_USAGE)
    k = rest[0]
    order = [names.index(c) for c in companions]
    return [DiagramPoint(s[k], tuple(s[i] for i in order), lam, 0.0, True) for lam, s, _ in rows]


def curve_extrema(points) -> list:
    """Interior local extrema of lambda along u*, refined by a three-point parabola."""
    pts = sorted(points, key=lambda p: p.u_star)
    u = np.array([p.u_star for p in pts])
    lam = np.array([p.lam for p in pts])
    keep = np.concatenate([[True], np.diff(u) > 0]) if u.size else np.array([], bool)
    u, lam = u[keep], lam[keep]
    out = []
    for i in range(1, u.size - 1):
        d0, d1 = lam[i] - lam[i - 1], lam[i + 1] - lam[i]
        if d0 * d1 >= 0 and not (d0 == 0 and d1 != 0):
            continue
        x = u[i - 1:i + 2]
        y = lam[i - 1:i + 2]
        a, b, c = np.polyfit(x, y, 2)
        ux = -b / (2 * a) if a != 0 else u[i]
        if not x[0] <= ux <= x[2]:
            ux = u[i]
        out.append({"u_star": float(ux), "lambda": float(np.polyval([a, b, c], ux)),
                    "kind": "local_max" if d0 > 0 else "local_min"})
    return out


def cmd_compare(args, manifest: RunManifest) -> int:
    kind_a, comp_a, pts_a, model_a = _load_curve(args.einn)
    kind_b, comp_b, pts_b, model_b = _load_curve(args.oracle)
    if kind_a == "sweep" and kind_b == "sweep":
        if comp_a != comp_b:
            raise CliError(f"schema mismatch: states {list(comp_a)} vs {list(comp_b)}", EXIT_USAGE)
        # no diagram names the candidate: take the first state column
        pts_a = _sweep_points(comp_a, pts_a, comp_a[1:])
        pts_b = _sweep_points(comp_b, pts_b, comp_b[1:])
        comp_a = comp_b = comp_a[1:]
    elif kind_a == "sweep":
        pts_a, comp_a = _sweep_points(comp_a, pts_a, comp_b), comp_b
    elif kind_b == "sweep":
        pts_b, comp_b = _sweep_points(comp_b, pts_b, comp_a), comp_a
    if comp_a != comp_b:
        raise CliError(f"schema mismatch: companions {list(comp_a)} vs {list(comp_b)}", EXIT_USAGE)
    if model_a and model_b and model_a != model_b:
        raise CliError(f"model mismatch: {model_a!r} vs {model_b!r}", EXIT_USAGE)
    if not pts_a or not pts_b:
        raise CliError("both files need at least one (feasible) row", EXIT_USAGE)
    try:
        result = compare_diagrams(pts_a, pts_b, args.match_tol)
    except DisjointSupportError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    ext_a, ext_b = curve_extrema(pts_a), curve_extrema(pts_b)
    deltas = []
    for e in ext_a:
        if not ext_b:
            break
        best = min(ext_b, key=lambda o: abs(o["u_star"] - e["u_star"]))
        deltas.append({"kind": e["kind"], "einn": e, "oracle": best,
                       "delta_u_star": e["u_star"] - best["u_star"], "delta_lambda": e["lambda"] - best["lambda"]})
    ok = result.max_abs <= args.tol
    doc = {"einn": str(args.einn), "oracle": str(args.oracle), "einn_kind": kind_a, "oracle_kind": kind_b,
           **result.to_dict(), "tolerance": args.tol, "within_tolerance": ok,
           "thresholds": {"einn": ext_a, "oracle": ext_b, "deltas": deltas}}
    payload = json.dumps(doc, indent=2) + "\n"
    manifest.model = model_a or model_b
    manifest.inputs = {str(args.einn): _sha256_file(args.einn), str(args.oracle): _sha256_file(args.oracle)}
    code = EXIT_OK if ok else EXIT_OUT_OF_TOLERANCE
    manifest.exit_code = code
    if args.out:
        atomic_write(args.out, payload)
        manifest.outputs = [str(args.out)]
        _write_manifest(manifest, manifest_path(args.out))
    else:
        _write_manifest(manifest, manifest_path(args.einn, "compare"), required=False)
    _emit(payload)
    if not ok:
        log.warning("max |lambda discrepancy| %.3e exceeds tolerance %.1e", result.max_abs, args.tol)
    return code


def cmd_zoo(args, manifest: RunManifest) -> int:
    if args.show:
        if args.show not in ZOO_IDS:
            raise CliError(f"unknown zoo model {args.show!r}", EXIT_USAGE)
        entry = zoo_entry(args.show)
        _emit(dump_spec(entry.spec, entry))
        return EXIT_OK
    listing = []
    for model_id in ZOO_IDS:
        s = zoo_entry(model_id).spec
        listing.append({"id": s.id, "state_vars": list(s.state_vars), "bifurcation_param": s.bifurcation_param,
                        "candidate_coordinate": s.candidate_coordinate,
                        "candidate_window": list(s.candidate_window), "parameters": dict(s.parameters)})
    _emit(json.dumps(listing, indent=2) + "\n")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="einn", description="Equilibrium-informed neural networks for bifurcation thresholds.")
    p.add_argument("--version", action="version", version=f"einn {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train an inverse map")
    t.add_argument("--model", required=True, help="zoo id or model document path")
    t.add_argument("--range", type=parse_range, help="candidate range lo:hi (default: model window)")
    t.add_argument("--samples", type=_positive_int, default=301)
    t.add_argument("--seed", type=_int, default=0, help="initialization seed (EINN_SEED overrides)")
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--mse-stop", type=_positive_float, default=2e-10)
    t.add_argument("--max-epochs", type=_positive_int, default=net.DEFAULT_MAX_EPOCHS)
    t.add_argument("--out-dir", default=".")
    t.add_argument("--out", help="map file path (default: <out-dir>/<model>.map.json)")
    t.add_argument("--log-every", type=_nonnegative_int, default=50_000)
    t.set_defaults(func=cmd_train)

    th = sub.add_parser("thresholds", help="detect thresholds of a trained map")
    th.add_argument("map")
    th.add_argument("--scan", type=_positive_int, help="scan points (default: 10 x grid size)")
    th.add_argument("--tol", type=_positive_float, default=1e-6)
    th.add_argument("--out", help="also write the report to this file")
    th.set_defaults(func=cmd_thresholds)

    d = sub.add_parser("diagram", help="evaluate a trained map on a uniform grid")
    d.add_argument("map")
    d.add_argument("--points", type=_nonnegative_int, default=500)
    d.add_argument("--range", type=parse_range, help="query range lo:hi (default: trained range)")
    d.add_argument("--out", help="CSV path (default: standard output)")
    d.set_defaults(func=cmd_diagram)

    o = sub.add_parser("oracle", help="classical sweep and closed-form thresholds")
    o.add_argument("--model", required=True)
    o.add_argument("--lambda", dest="lambda_range", type=parse_range, help="parameter range lo:hi")
    o.add_argument("--grid", type=_positive_int, default=701)
    o.add_argument("--window", type=parse_range, help="state search window lo:hi")
    o.add_argument("--threshold-window", type=parse_range, help="candidate window for thresholds")
    o.add_argument("--subdivisions", type=_positive_int, default=oracle.DEFAULT_SUBDIVISIONS)
    o.add_argument("--set", type=_assignment, action="append", metavar="NAME=VALUE",
                   help="override a fixed parameter, e.g. eps=0.1")
    o.add_argument("--jobs", type=_positive_int, default=1)
    o.add_argument("--out", help="sweep CSV path (default: standard output)")
    o.add_argument("--thresholds", help="threshold JSON path (default: <out stem>.thresholds.json)")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("compare", help="lambda discrepancy between two diagram or sweep CSVs")
    c.add_argument("einn")
    c.add_argument("oracle")
    c.add_argument("--tol", type=_positive_float, default=5e-3)
    c.add_argument("--match-tol", type=_positive_float)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    z = sub.add_parser("zoo", help="list built-in models")
    z.add_argument("--show", metavar="ID", help="print one model document")
    z.set_defaults(func=cmd_zoo)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(["einn", *argv], args.command, None, None, None, _now())
    try:
        return args.func(args, manifest)
    except CliError as exc:
        print(f"einn {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
