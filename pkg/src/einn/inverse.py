"""Equilibrium-informed inverse maps.

Candidate equilibrium values of one state coordinate go in; the network
returns the bifurcation parameter (and the remaining equilibrium
components) that make each candidate a rest point. Saddle-node thresholds
are the interior extrema of the learned parameter curve.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import exprdsl, net
from .models import ModelSpec, dump_spec, load_spec, ModelError

log = logging.getLogger(__name__)

MAP_FORMAT = "einn-map"
MAP_VERSION = 1
HIDDEN_LAYERS = (10, 10, 10, 10)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, sample_index=None, u_star=None):
        self.sample_index = sample_index
        self.u_star = u_star
        super().__init__(message)


class MapFormatError(ValueError):
    """A serialized inverse map is truncated, malformed or of an unknown version."""


class DisjointSupportError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CandidateGrid:
    coordinate: str
    values: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if not self.lo < self.hi:
            raise ValueError(f"degenerate candidate range [{self.lo}, {self.hi}]")
        if v.ndim != 1 or v.size < 3:
            raise ValueError("a candidate grid needs at least 3 points")
        if np.any(np.diff(v) <= 0) or v[0] < self.lo or v[-1] > self.hi:
            raise ValueError("candidate values must increase strictly inside the range")

    @property
    def n(self):
        return self.values.size


def sample_candidates(range_, n: int, strategy: str = "uniform", coordinate: str = "u") -> CandidateGrid:
    lo, hi = (float(x) for x in range_)
    if not lo < hi:
        raise ValueError(f"degenerate candidate range [{lo}, {hi}]")
    if n < 3:
        raise ValueError("need at least 3 candidates")
    if strategy != "uniform":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return CandidateGrid(coordinate, np.linspace(lo, hi, n), lo, hi)


def _grid_env(model: ModelSpec, u):
    env = dict(model.parameters)
    env[model.candidate_coordinate] = u
    return env


def residual_loss(model: ModelSpec, u_star: float, net_output):
    """Summed squared residual at one candidate and its gradient in the network outputs.

    ``net_output`` is laid out as ``model.output_names``.
    """
    names = model.output_names
    out = np.asarray(net_output, dtype=float)
    if out.shape != (len(names),):
        raise ValueError(f"expected {len(names)} outputs {names}, got shape {out.shape}")
    env = _grid_env(model, float(u_star))
    env.update({name: float(x) for name, x in zip(names, out)})
    loss = 0.0
    cot = np.zeros(len(names))
    for var, ast in zip(model.state_vars, model.asts):
        try:
            duals = [exprdsl.eval_dual(ast, env, name) for name in names]
        except exprdsl.EvalError as exc:
            raise exprdsl.EvalError(f"equation {var!r} at {model.candidate_coordinate}*={u_star!r}: {exc}") from exc
        f = duals[0].value
        loss += f * f
        cot += 2.0 * f * np.array([d.deriv for d in duals])
    return loss, cot


@dataclass
class TrainedInverseMap:
    model: ModelSpec
    params: net.MlpParams
    grid: CandidateGrid
    final_mse: float
    stop_reason: str  # converged | epoch-cap
    epochs: int = 0
    config: net.TrainConfig = field(default_factory=net.TrainConfig)
    best_epoch: int = 0
    last_mse: float = math.nan
    adam: dict = field(default_factory=lambda: {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8})

    @property
    def lo(self):
        return self.grid.lo

    @property
    def hi(self):
        return self.grid.hi

    def _x(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return (2.0 * (u - self.lo) / (self.hi - self.lo) - 1.0)[:, None]

    def outputs(self, u) -> np.ndarray:
        """(len(u), n_out) array of [lambda, companions...]."""
        return net.forward(self.params, self._x(u))

    def lam(self, u) -> np.ndarray:
        return self.outputs(u)[:, 0]

    def dlam_du(self, u):
        out, d = net.forward_with_input_derivative(self.params, self._x(u), 0)
        return out[:, 0], d[:, 0] * (2.0 / (self.hi - self.lo))


def _training_trees(model, u):
    env = _grid_env(model, u)
    return [exprdsl.specialize(ast, env) for ast in model.asts]


def _failing_sample(model, u, outputs):
    names = model.output_names
    for j in range(u.size):
        env = _grid_env(model, float(u[j]))
        env.update({name: float(outputs[j, k]) for k, name in enumerate(names)})
        try:
            vals = [exprdsl.eval(ast, env) for ast in model.asts]
        except exprdsl.EvalError:
            return j
        if not all(math.isfinite(v) for v in vals):
            return j
    return None


def train(model: ModelSpec, grid: CandidateGrid, config: net.TrainConfig | None = None,
          *, hidden=HIDDEN_LAYERS, log_every: int = 50_000, callback=None) -> TrainedInverseMap:
    """Full-batch Adam on the mean squared equilibrium residual over the grid.

    Stops when the MSE falls below ``config.mse_stop`` or at the epoch cap.
    The returned parameters are the lowest-MSE iterate seen, and
    ``final_mse`` is their MSE. ``callback(epoch, params, mse)`` runs every
    `log_every` epochs; `params` is the live iterate, copy it to keep it.
    """
    config = config or net.TrainConfig()
    if grid.coordinate != model.candidate_coordinate:
        raise ValueError(f"grid sweeps {grid.coordinate!r}, model expects {model.candidate_coordinate!r}")
    wlo, whi = model.candidate_window
    if grid.lo < wlo or grid.hi > whi:
        raise ValueError(f"candidate range [{grid.lo}, {grid.hi}] leaves the model window [{wlo}, {whi}]")
    names = model.output_names
    n_out = len(names)
    u = grid.values
    n = u.size
    params = net.init((1, *hidden, n_out), config.rng_seed)
    state = net.AdamState.fresh(params)
    x = (2.0 * (u - grid.lo) / (grid.hi - grid.lo) - 1.0)[:, None]
    trees = _training_trees(model, u)
    eye = np.eye(n_out)
    tangents = {name: eye[k][:, None] for k, name in enumerate(names)}
    grad = np.empty_like(params.flat)
    best_flat = params.flat.copy()
    best_mse = math.inf
    best_epoch = 0
    cot = np.empty((n_out, n))
    sq = np.empty(n)
    scale = 2.0 / n
    epoch = 0
    stop_reason = "epoch-cap"
    mse = math.inf
    lr = config.learning_rate
    for epoch in range(1, int(config.max_epochs) + 1):
        acts = net.forward_cached(params, x)
        out = acts[-1]
        bind = {name: out[:, k] for k, name in enumerate(names)}
        sq.fill(0.0)
        cot.fill(0.0)
        try:
            for tree in trees:
                f, df = exprdsl.jvp(tree, bind, tangents)
                sq += f * f
                if df is not None:
                    cot += f * df
        except exprdsl.EvalError as exc:
            j = _failing_sample(model, u, out)
            where = "" if j is None else f" at sample {j} ({grid.coordinate}*={float(u[j])!r})"
            raise TrainingDivergedError(f"residual evaluation failed{where}: {exc}", j,
                                        None if j is None else float(u[j])) from exc
        mse = float(np.sum(sq)) / n
        if not math.isfinite(mse):
            bad = np.nonzero(~np.isfinite(sq))[0]
            j = int(bad[0]) if bad.size else None
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}"
                + ("" if j is None else f", sample {j} ({grid.coordinate}*={u[j]!r})"), j,
                None if j is None else float(u[j]))
        if mse < best_mse:
            best_mse = mse
            best_epoch = epoch
            best_flat[:] = params.flat
        if mse < config.mse_stop:
            stop_reason = "converged"
            break
        if epoch == config.max_epochs:
            break
        if log_every and epoch % log_every == 0:
            log.info("%s epoch %d mse %.3e best %.3e", model.id, epoch, mse, best_mse)
            if callback is not None:
                callback(epoch, params, mse)
        net.backward_cached(params, acts, scale * cot.T, out=grad)
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}")
        net.adam_update_(params.flat, grad, state, lr)
    final = net.MlpParams(params.layer_sizes, best_flat)
    log.info("%s stopped (%s) after %d epochs, final mse %.3e", model.id, stop_reason, epoch, best_mse)
    return TrainedInverseMap(model, final, grid, best_mse, stop_reason, epoch, config,
                             best_epoch, mse, {"beta1": state.beta1, "beta2": state.beta2, "eps": state.eps})


@dataclass(frozen=True)
class DiagramPoint:
    u_star: float
    companions: tuple
    lam: float
    residual_norm: float
    feasible: bool
    extrapolated: bool = False


def _residual_norms(model, u, outputs):
    env = _grid_env(model, u)
    for k, name in enumerate(model.output_names):
        env[name] = outputs[:, k]
    total = np.zeros(u.size)
    for ast in model.asts:
        f = exprdsl.eval(ast, env)
        total = total + np.asarray(f, dtype=float) ** 2
    return np.sqrt(total)


def _feasible_mask(model, u, outputs):
    values = {model.candidate_coordinate: u}
    for k, name in enumerate(model.output_names):
        values[name] = outputs[:, k]
    mask = np.ones(u.size, dtype=bool)
    for c in model.feasibility:
        if c.symbol in values:
            mask &= values[c.symbol] >= c.bound
    return mask


def predict_branch(map_: TrainedInverseMap, query_points) -> list:
    """Diagram points at the query candidates; infeasible points are kept and flagged."""
    u = np.asarray(query_points, dtype=float).ravel()
    if u.size == 0:
        return []
    out = map_.outputs(u)
    norms = _residual_norms(map_.model, u, out)
    feasible = _feasible_mask(map_.model, u, out)
    outside = (u < map_.lo) | (u > map_.hi)
    return [DiagramPoint(float(u[j]), tuple(float(c) for c in out[j, 1:]), float(out[j, 0]),
                         float(norms[j]), bool(feasible[j]), bool(outside[j]))
            for j in range(u.size)]


@dataclass(frozen=True)
class Threshold:
    u_star: float
    lam: float
    kind: str  # local_min | local_max
    derivative_residual: float

    def to_dict(self):
        return {"u_star": self.u_star, "lambda": self.lam, "kind": self.kind,
                "derivative_residual": self.derivative_residual}


@dataclass
class ThresholdReport:
    model_id: str
    range: tuple
    thresholds: list
    seed: int | None = None
    final_mse: float | None = None
    source: str = "einn"
    scan_resolution: int | None = None
    refine_tol: float | None = None

    def to_dict(self):
        return {
            "source": self.source,
            "model_id": self.model_id,
            "range": [float(self.range[0]), float(self.range[1])],
            "thresholds": [t.to_dict() for t in self.thresholds],
            "seed": self.seed,
            "final_mse": self.final_mse,
            "scan_resolution": self.scan_resolution,
            "refine_tol": self.refine_tol,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _bisect_derivative(fprime, a, b, da, tol):
    # stop once the bracket is below tol and |f'| is below tol, or at float resolution
    m, dm = a, da
    for _ in range(200):
        m = 0.5 * (a + b)
        dm = fprime(m)
        if dm == 0.0:
            break
        if (b - a) <= tol and abs(dm) <= tol:
            break
        if (b - a) <= 4.0 * np.finfo(float).eps * max(1.0, abs(m)):
            break
        if (dm > 0) == (da > 0):
            a, da = m, dm
        else:
            b = m
    return m, dm


def detect_thresholds(map_: TrainedInverseMap, scan_resolution: int | None = None,
                      refine_tol: float = 1e-6) -> ThresholdReport:
    """Interior extrema of the learned lambda(u*): scan dlambda/du*, then bisect each sign change."""
    lo, hi = map_.lo, map_.hi
    if scan_resolution is None:
        scan_resolution = 10 * map_.grid.n
    if scan_resolution < map_.grid.n:
        raise ValueError("scan_resolution must be at least the grid size")
    us = np.linspace(lo, hi, scan_resolution)
    _, d = map_.dlam_du(us)
    h = us[1] - us[0]

    def fprime(x):
        return float(map_.dlam_du([x])[1][0])

    found = []
    for i in range(scan_resolution - 1):
        if d[i] == 0.0 and 0 < i:
            m, dm = us[i], 0.0
        elif d[i] * d[i + 1] < 0:
            m, dm = _bisect_derivative(fprime, us[i], us[i + 1], d[i], refine_tol)
        else:
            continue
        if not lo < m < hi:
            continue
        lam_m, lam_l, lam_r = map_.lam([m, m - h, m + h])
        curvature = lam_l - 2.0 * lam_m + lam_r
        if curvature == 0.0:
            curvature = d[i + 1] - d[i]
        kind = "local_min" if curvature > 0 else "local_max"
        out = map_.outputs([m])
        if not _feasible_mask(map_.model, np.array([m]), out)[0]:
            continue
        found.append(Threshold(float(m), float(lam_m), kind, abs(float(dm))))
    return ThresholdReport(map_.model.id, (lo, hi), found, map_.config.rng_seed, map_.final_mse,
                           scan_resolution=scan_resolution, refine_tol=refine_tol)


@dataclass
class DiagramComparison:
    max_abs: float
    mean_abs: float
    matched: int
    unmatched_einn: int
    unmatched_oracle: int

    def to_dict(self):
        return {"max_abs_lambda": self.max_abs, "mean_abs_lambda": self.mean_abs, "matched": self.matched,
                "unmatched_einn": self.unmatched_einn, "unmatched_oracle": self.unmatched_oracle}


def _max_gap(sorted_u):
    return float(np.max(np.diff(sorted_u))) if sorted_u.size > 1 else 0.0


def compare_diagrams(einn_points, oracle_points, match_tol: float | None = None) -> DiagramComparison:
    """Lambda discrepancy between two diagrams matched by nearest neighbour in u*.

    Matched EINN points are compared with the oracle curve interpolated
    linearly between the oracle neighbours around them (a single-valued
    lambda(u*) is assumed). EINN points outside the oracle u* support stay
    unmatched. The default match tolerance is the largest gap between
    consecutive oracle u* values, so no point inside the support goes unmatched.
    """
    if not einn_points or not oracle_points:
        raise ValueError("both diagrams must be nonempty")
    ou = np.array([p.u_star for p in oracle_points])
    order = np.argsort(ou, kind="stable")
    ou = ou[order]
    ol = np.array([oracle_points[i].lam for i in order])
    eu = np.array([p.u_star for p in einn_points])
    el = np.array([p.lam for p in einn_points])
    if match_tol is None:
        match_tol = _max_gap(ou)
    idx = np.clip(np.searchsorted(ou, eu), 1, max(ou.size - 1, 1)) if ou.size > 1 else np.zeros(eu.size, int)
    if ou.size > 1:
        dist = np.minimum(np.abs(eu - ou[idx - 1]), np.abs(eu - ou[idx]))
    else:
        dist = np.abs(eu - ou[0])
    # interpolation only inside the oracle support; no extrapolated references
    matched = (dist <= match_tol) & (eu >= ou[0]) & (eu <= ou[-1])
    if not np.any(matched):
        raise DisjointSupportError("no EINN point lies within the oracle u* support")
    ref = np.interp(eu[matched], ou, ol)
    err = np.abs(el[matched] - ref)
    es = np.sort(eu)
    j = np.clip(np.searchsorted(es, ou), 1, max(es.size - 1, 1)) if es.size > 1 else np.zeros(ou.size, int)
    odist = np.minimum(np.abs(ou - es[j - 1]), np.abs(ou - es[j])) if es.size > 1 else np.abs(ou - es[0])
    return DiagramComparison(float(np.max(err)), float(np.mean(err)), int(np.sum(matched)),
                             int(np.sum(~matched)), int(np.sum(odist > match_tol)))


# --- files ---------------------------------------------------------------------------

def _jsonable_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def map_to_dict(map_: TrainedInverseMap) -> dict:
    cfg = map_.config
    training = {
        "seed": cfg.rng_seed,
        "learning_rate": cfg.learning_rate,
        "mse_stop": cfg.mse_stop,
        "max_epochs": int(cfg.max_epochs),
        "epochs": map_.epochs,
        "best_epoch": map_.best_epoch,
        "final_mse": _jsonable_float(map_.final_mse),
        "last_mse": _jsonable_float(map_.last_mse),
        "stop_reason": map_.stop_reason,
        "adam": dict(map_.adam),
        "full_batch": True,
    }
    return {
        "format": MAP_FORMAT,
        "version": MAP_VERSION,
        "model_id": map_.model.id,
        "model_document": dump_spec(map_.model),
        "outputs": list(map_.model.output_names),
        "grid": {"coordinate": map_.grid.coordinate, "lo": map_.lo, "hi": map_.hi,
                 "n": map_.grid.n, "strategy": "uniform"},
        "input_map": {"kind": "affine", "from": [map_.lo, map_.hi], "to": [-1.0, 1.0]},
        "training": training,
        "net": net.params_to_dict(map_.params, {k: training[k] for k in
                                                ("seed", "epochs", "final_mse", "stop_reason")}),
    }


def map_to_json(map_: TrainedInverseMap) -> str:
    return json.dumps(map_to_dict(map_), indent=1) + "\n"


def map_from_json(text: str) -> TrainedInverseMap:
    try:
        doc = json.loads(text)
        if doc.get("format") != MAP_FORMAT:
            raise MapFormatError(f"not an {MAP_FORMAT} document")
        if doc.get("version") != MAP_VERSION:
            raise MapFormatError(f"unsupported map version {doc.get('version')!r}")
        model = load_spec(doc["model_document"])
        g = doc["grid"]
        grid = sample_candidates((g["lo"], g["hi"]), int(g["n"]), g.get("strategy", "uniform"), g["coordinate"])
        params = net.params_from_dict(doc["net"])
        t = doc["training"]
        cfg = net.TrainConfig(t["learning_rate"], t["mse_stop"], t["max_epochs"], t["seed"])
        final_mse = math.inf if t["final_mse"] is None else float(t["final_mse"])
        last_mse = math.nan if t.get("last_mse") is None else float(t["last_mse"])
    except MapFormatError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError, ModelError, net.NetError) as exc:
        raise MapFormatError(f"corrupt inverse-map document: {exc}") from exc
    if list(doc.get("outputs", [])) != list(model.output_names) or params.n_in != 1 \
            or params.n_out != len(model.output_names):
        raise MapFormatError("network shape does not match the embedded model")
    return TrainedInverseMap(model, params, grid, final_mse, t["stop_reason"], int(t["epochs"]), cfg,
                             int(t.get("best_epoch", 0)), last_mse, dict(t.get("adam", {})))


def save_map(map_: TrainedInverseMap, path) -> None:
    with open(path, "w") as fh:
        fh.write(map_to_json(map_))


def load_map(path) -> TrainedInverseMap:
    with open(path) as fh:
        return map_from_json(fh.read())


def _fmt(x):
    return repr(float(x))


def diagram_csv(model: ModelSpec, points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["u_star", *model.companions, "lambda", "residual_norm", "feasible"])
    for p in sorted(points, key=lambda p: p.u_star):
        w.writerow([_fmt(p.u_star), *(_fmt(c) for c in p.companions), _fmt(p.lam), _fmt(p.residual_norm),
                    "true" if p.feasible else "false"])
    return buf.getvalue()


def read_diagram_csv(text: str):
    """Inverse of diagram_csv; returns (companion names, points)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty diagram file")
    header = rows[0]
    if len(header) < 4 or header[0] != "u_star" or header[-3:] != ["lambda", "residual_norm", "feasible"]:
        raise ValueError(f"not a diagram CSV header: {header}")
    companions = tuple(header[1:-3])
    points = []
    for row in rows[1:]:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        points.append(DiagramPoint(float(row[0]), tuple(float(c) for c in row[1:-3]), float(row[-3]),
                                   float(row[-2]), row[-1] == "true"))
    return companions, points
