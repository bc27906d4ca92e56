"""Classical ground truth for EINN outputs.

Equilibria come from bracketed bisection on a scalar residual obtained by
back-substituting every companion state that enters some equation
affinely. Thresholds come from the closed-form inverse of each zoo entry,
stability from the Jacobian built with forward-mode duals.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import exprdsl
from .exprdsl import BinOp, Call, Const, Neg, Pow, Var
from .inverse import Threshold, ThresholdReport
from .models import ModelSpec, ZooEntry, zoo_entry

ROOT_TOL = 1e-12
RESIDUAL_TOL = 1e-10
DEDUPE_TOL = 1e-9
EQUILIBRIUM_TOL = 1e-8
MARGINAL_TOL = 1e-8
THRESHOLD_SCAN = 10_000
THRESHOLD_TOL = 1e-10
DEFAULT_SUBDIVISIONS = 2000


class OracleError(ValueError):
    pass


class UnsupportedModelError(OracleError):
    """The model does not reduce to one scalar equation by affine back-substitution."""


class DomainError(OracleError):
    """Closed-form inverse evaluated outside its domain."""


class NotAnEquilibriumError(OracleError):
    """Stability requested at a state whose residual exceeds the equilibrium tolerance."""


@dataclass(frozen=True)
class RootBracket:
    lo: float
    hi: float
    f_lo: float
    f_hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise OracleError(f"empty bracket [{self.lo}, {self.hi}]")
        if self.f_lo * self.f_hi > 0:
            raise OracleError("bracket endpoints have the same sign")


@dataclass(frozen=True)
class StabilityTag:
    kind: str  # stable | unstable | marginal
    # 1-D: f'(u*). n-D: smallest Routh array first-column entry of the monic
    # characteristic polynomial (positive when every eigenvalue has Re < 0)
    leading_indicator: float


# --- reduction by back-substitution ----------------------------------------------------

def substitute(node, mapping: dict):
    """Replace variables named in `mapping` by the given subtrees."""
    if isinstance(node, Const):
        return node
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, mapping), node.position)
    if isinstance(node, BinOp):
        return BinOp(node.op, substitute(node.left, mapping), substitute(node.right, mapping), node.position)
    if isinstance(node, Pow):
        return exprdsl._make_pow(substitute(node.base, mapping), substitute(node.exponent, mapping), node.position)
    return Call(node.func, tuple(substitute(a, mapping) for a in node.args), node.position)


def _solve_affine(node, name):
    # node = A + B*name  =>  name = -A / B, with A = node(0) and B = node(1) - node(0)
    a = substitute(node, {name: Const(0.0)})
    b = BinOp("-", substitute(node, {name: Const(1.0)}), a)
    return Neg(BinOp("/", a, b))


@dataclass(frozen=True)
class Reduction:
    """Companions as expressions of the candidate coordinate, plus the leftover scalar residual."""

    companions: dict  # name -> expression in candidate, lambda and parameters
    order: tuple  # companion names in solve order
    residual: object  # scalar expression in candidate, lambda and parameters
    residual_index: int  # which model equation is left over


def reduce_model(model: ModelSpec) -> Reduction:
    """Eliminate every companion state from an equation in which it appears affinely.

    Raises UnsupportedModelError when some companion cannot be eliminated that way.
    """
    asts = list(model.asts)
    unsolved = set(model.companions)
    unused = list(range(len(asts)))
    solved, order = {}, []
    while unsolved:
        for i in unused:
            free = exprdsl.variables(asts[i]) & unsolved
            if len(free) == 1:
                (name,) = free
                if exprdsl.is_affine_in(asts[i], name):
                    break
        else:
            raise UnsupportedModelError(
                f"model {model.id!r}: cannot eliminate {sorted(unsolved)} by affine back-substitution")
        expr = _solve_affine(asts[i], name)
        solved[name] = expr
        order.append(name)
        unused.remove(i)
        unsolved.discard(name)
        asts = [substitute(a, {name: expr}) for a in asts]
        solved = {k: substitute(v, {name: expr}) for k, v in solved.items()}
    if len(unused) != 1:
        raise UnsupportedModelError(f"model {model.id!r}: {len(unused)} equations left after elimination")
    return Reduction(solved, tuple(order), asts[unused[0]], unused[0])


def _eval_safe(node, env):
    """Vectorized evaluation with NaN wherever the expression leaves its domain."""
    arrays = [v for v in env.values() if np.ndim(v)]
    shape = np.shape(arrays[0]) if arrays else ()
    with np.errstate(all="ignore"):
        try:
            return np.broadcast_to(np.asarray(exprdsl.eval(node, env), dtype=float), shape).copy()
        except exprdsl.EvalError:
            if not arrays:
                return np.array(np.nan)
        out = np.full(shape, np.nan)
        for j in range(out.size):
            point = {k: (v[j] if np.ndim(v) else v) for k, v in env.items()}
            try:
                out[j] = exprdsl.eval(node, point)
            except exprdsl.EvalError:
                pass
        return out


# --- equilibria ------------------------------------------------------------------------

def _search_window(model, search_window):
    if search_window is not None:
        lo, hi = (float(x) for x in search_window)
    else:
        lo, hi = model.oracle_window or model.candidate_window
    if not lo < hi:
        raise OracleError(f"degenerate search window [{lo}, {hi}]")
    return float(lo), float(hi)


def _bisect(f, a, b, fa, tol, residual_tol):
    m, fm = a, fa
    for _ in range(400):
        m = 0.5 * (a + b)
        fm = f(m)
        if fm == 0.0 or not math.isfinite(fm):
            break
        small = (b - a) <= tol
        if small and abs(fm) <= residual_tol:
            break
        if (b - a) <= 2.0 * np.finfo(float).eps * max(1.0, abs(m)):
            break
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return m, fm


def equilibria_at(model: ModelSpec, lam: float, search_window=None, subdivisions: int = DEFAULT_SUBDIVISIONS,
                  reduction: Reduction | None = None) -> list:
    """All equilibria with the candidate coordinate inside `search_window` at parameter value `lam`.

    Returns state tuples in ``model.state_vars`` order, sorted by the candidate coordinate.
    """
    if subdivisions < 1:
        raise OracleError("subdivisions must be positive")
    red = reduction or reduce_model(model)
    lo, hi = _search_window(model, search_window)
    coord = model.candidate_coordinate
    env = dict(model.parameters)
    env[model.bifurcation_param] = float(lam)

    def residual(u):
        env[coord] = u
        return float(_eval_safe(red.residual, env))

    grid = np.linspace(lo, hi, subdivisions + 1)
    env[coord] = grid
    values = _eval_safe(red.residual, env)
    roots = []
    for i in range(subdivisions + 1):
        if values[i] == 0.0:
            roots.append(grid[i])
    for i in range(subdivisions):
        fa, fb = values[i], values[i + 1]
        if not (np.isfinite(fa) and np.isfinite(fb)) or fa * fb >= 0:
            continue
        bracket = RootBracket(grid[i], grid[i + 1], fa, fb)
        m, fm = _bisect(residual, bracket.lo, bracket.hi, bracket.f_lo, ROOT_TOL, RESIDUAL_TOL)
        # a sign change across a pole shrinks to a huge residual: not a root
        if math.isfinite(fm) and abs(fm) <= 1e-6:
            roots.append(m)
    roots.sort()
    unique = []
    for r in roots:
        if not unique or r - unique[-1] > DEDUPE_TOL:
            unique.append(float(r))
    return [_full_state(model, red, u, lam) for u in unique]


def _full_state(model, red, u, lam):
    env = dict(model.parameters)
    env[model.bifurcation_param] = float(lam)
    env[model.candidate_coordinate] = u
    values = {model.candidate_coordinate: u}
    for name in red.order:
        values[name] = float(exprdsl.eval(red.companions[name], env))
    return tuple(values[s] for s in model.state_vars)


def reduced_residual(model: ModelSpec, u, lam, reduction: Reduction | None = None):
    red = reduction or reduce_model(model)
    env = dict(model.parameters)
    env[model.bifurcation_param] = float(lam)
    env[model.candidate_coordinate] = u
    return exprdsl.eval(red.residual, env)


# --- stability -------------------------------------------------------------------------

def jacobian(model: ModelSpec, state, lam) -> np.ndarray:
    env = dict(model.parameters)
    env.update(_state_dict(model, state))
    env[model.bifurcation_param] = float(lam)
    return np.array([[exprdsl.eval_dual(ast, env, s).deriv for s in model.state_vars] for ast in model.asts],
                    dtype=float)


def _state_dict(model, state):
    if isinstance(state, dict):
        return {s: float(state[s]) for s in model.state_vars}
    values = [float(x) for x in np.ravel(state)]
    if len(values) != len(model.state_vars):
        raise OracleError(f"state has {len(values)} entries, model has {len(model.state_vars)} state variables")
    return dict(zip(model.state_vars, values))


def characteristic_polynomial(a: np.ndarray) -> np.ndarray:
    """Coefficients of det(sI - A), highest power first (Faddeev-LeVerrier)."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    coeffs = [1.0]
    m = np.zeros_like(a)
    eye = np.eye(n)
    for k in range(1, n + 1):
        m = a @ m + coeffs[-1] * eye
        coeffs.append(-np.trace(a @ m) / k)
    return np.array(coeffs)


def routh_first_column(coeffs) -> np.ndarray:
    """First column of the Routh array; a zero pivot ends the array early."""
    c = [float(x) for x in coeffs]
    n = len(c) - 1
    rows = [c[0::2], c[1::2]]
    width = len(rows[0])
    rows = [r + [0.0] * (width - len(r)) for r in rows]
    first = [rows[0][0], rows[1][0]] if n >= 1 else [rows[0][0]]
    for _ in range(n - 1):
        upper, lower = rows[-2], rows[-1]
        if lower[0] == 0.0:
            break
        new = [(lower[0] * upper[j + 1] - upper[0] * lower[j + 1]) / lower[0] for j in range(width - 1)] + [0.0]
        rows.append(new)
        first.append(new[0])
    first += [0.0] * (n + 1 - len(first))
    return np.array(first)


def _hurwitz(a) -> bool:
    """True iff every eigenvalue of `a` has strictly negative real part."""
    col = routh_first_column(characteristic_polynomial(a))
    return bool(np.all(col > 0))


def _max_real_part_2x2(j):
    tr = j[0, 0] + j[1, 1]
    det = j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]
    disc = tr * tr - 4.0 * det
    return 0.5 * (tr + math.sqrt(disc)) if disc > 0 else 0.5 * tr


def classify_stability(model: ModelSpec, state, lam, tol_marginal: float = MARGINAL_TOL) -> StabilityTag:
    values = _state_dict(model, state)
    res = model.residuals(values, float(lam))
    worst = max(abs(float(r)) for r in res)
    if not worst <= EQUILIBRIUM_TOL:
        raise NotAnEquilibriumError(f"residual {worst:.3g} exceeds {EQUILIBRIUM_TOL:g}; not an equilibrium")
    j = jacobian(model, values, lam)
    n = j.shape[0]
    if n == 1:
        growth = indicator = float(j[0, 0])
    elif n == 2:
        growth = _max_real_part_2x2(j)
        indicator = float(np.min(routh_first_column(characteristic_polynomial(j))))
    else:
        indicator = float(np.min(routh_first_column(characteristic_polynomial(j))))
        eye = np.eye(n)
        if _hurwitz(j + tol_marginal * eye):
            return StabilityTag("stable", indicator)
        if not _hurwitz(j - tol_marginal * eye):
            return StabilityTag("unstable", indicator)
        return StabilityTag("marginal", indicator)
    if growth < -tol_marginal:
        return StabilityTag("stable", indicator)
    if growth > tol_marginal:
        return StabilityTag("unstable", indicator)
    return StabilityTag("marginal", indicator)


# --- sweeps ----------------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumPoint:
    lam: float
    state: tuple
    stability: StabilityTag


@dataclass
class BifurcationDiagram:
    model_id: str
    state_vars: tuple
    lambda_grid: np.ndarray
    points: list  # EquilibriumPoint, grid order, candidate-sorted within each lambda
    candidate_coordinate: str = "u"

    def counts(self) -> list:
        """Number of equilibria at each grid value, in grid order."""
        per = {}
        for p in self.points:
            per[p.lam] = per.get(p.lam, 0) + 1
        return [per.get(float(lam), 0) for lam in self.lambda_grid]

    def count_pattern(self) -> list:
        """Run-length compressed counts, e.g. [1, 3, 1]."""
        out = []
        for c in self.counts():
            if not out or out[-1] != c:
                out.append(c)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", *self.state_vars, "stability"])
        for p in self.points:
            w.writerow([repr(float(p.lam)), *(repr(float(x)) for x in p.state), p.stability.kind])
        return buf.getvalue()


def _sweep_chunk(args):
    model, lams, window, subdivisions, tol_marginal = args
    red = reduce_model(model)
    out = []
    for lam in lams:
        for state in equilibria_at(model, lam, window, subdivisions, red):
            out.append(EquilibriumPoint(float(lam), state, classify_stability(model, state, lam, tol_marginal)))
    return out


def sweep(model: ModelSpec, lambda_grid, search_window=None, subdivisions: int = DEFAULT_SUBDIVISIONS,
          jobs: int = 1, overrides: dict | None = None, tol_marginal: float = MARGINAL_TOL) -> BifurcationDiagram:
    """Stability-tagged equilibria for every grid value; grid order is preserved.

    `overrides` replaces fixed parameter values (e.g. eps) before the sweep.
    """
    if overrides:
        model = model.with_parameters(**overrides)
    reduce_model(model)  # fail early, before any worker starts
    grid = np.asarray(lambda_grid, dtype=float).ravel()
    window = _search_window(model, search_window)
    if jobs <= 1 or grid.size < 2:
        points = _sweep_chunk((model, grid, window, subdivisions, tol_marginal))
    else:
        chunks = [c for c in np.array_split(grid, min(jobs, grid.size)) if c.size]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_sweep_chunk, [(model, c, window, subdivisions, tol_marginal) for c in chunks])
            points = [p for part in parts for p in part]
    return BifurcationDiagram(model.id, tuple(model.state_vars), grid, points, model.candidate_coordinate)


def read_sweep_csv(text: str):
    """Parse a sweep CSV; returns (state names, list of (lambda, state tuple, stability kind))."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or len(rows[0]) < 3 or rows[0][0] != "lambda" or rows[0][-1] != "stability":
        raise ValueError("not a sweep CSV header")
    names = tuple(rows[0][1:-1])
    out = []
    for row in rows[1:]:
        if len(row) != len(rows[0]):
            raise ValueError(f"row has {len(row)} fields, header has {len(rows[0])}")
        out.append((float(row[0]), tuple(float(x) for x in row[1:-1]), row[-1]))
    return names, out


# --- closed forms and thresholds -------------------------------------------------------

def _entry(model) -> ZooEntry:
    if isinstance(model, ZooEntry):
        return model
    return zoo_entry(model)


def inverse_expressions(model) -> dict:
    """Expressions for every network output in terms of the candidate coordinate.

    Uses the entry's closed forms when present; otherwise derives them by
    back-substitution when the bifurcation parameter enters the leftover
    residual affinely.
    """
    if isinstance(model, (ZooEntry, str)):
        entry = _entry(model)
        spec = entry.spec
        if set(entry.closed_form_inverse) >= set(spec.output_names):
            return dict(entry.inverse_asts)
    else:
        spec = model
    red = reduce_model(spec)
    lam = spec.bifurcation_param
    if not exprdsl.is_affine_in(red.residual, lam):
        raise UnsupportedModelError(f"model {spec.id!r}: {lam} does not enter the reduced residual affinely")
    lam_expr = _solve_affine(red.residual, lam)
    out = {lam: lam_expr}
    for name in spec.companions:
        out[name] = substitute(red.companions[name], {lam: lam_expr})
    return out


def _spec_of(model):
    return _entry(model).spec if isinstance(model, (ZooEntry, str)) else model


def closed_form_inverse(model, u_star: float, output: str | None = None) -> float:
    """Bifurcation parameter (or the named companion) at equilibrium candidate `u_star`."""
    spec = _spec_of(model)
    exprs = inverse_expressions(model)
    env = dict(spec.parameters)
    env[spec.candidate_coordinate] = float(u_star)
    try:
        return float(exprdsl.eval(exprs[output or spec.bifurcation_param], env))
    except exprdsl.EvalError as exc:
        raise DomainError(f"u_star={u_star!r} outside the inverse domain: {exc}") from None


def closed_form_state(model, u_star: float) -> dict:
    """Every output (bifurcation parameter and companions) at `u_star`."""
    spec = _spec_of(model)
    return {name: closed_form_inverse(model, u_star, name) for name in spec.output_names}


def closed_form_points(model, u_values) -> list:
    """DiagramPoints along the exact inverse, for comparison with EINN diagrams."""
    from .inverse import DiagramPoint

    spec = _spec_of(model)
    pts = []
    for u in np.asarray(u_values, dtype=float):
        s = closed_form_state(model, u)
        values = {spec.candidate_coordinate: float(u), **s}
        pts.append(DiagramPoint(float(u), tuple(s[c] for c in spec.companions), s[spec.bifurcation_param],
                                0.0, spec.feasible(values), False))
    return pts


class OracleThreshold(NamedTuple):
    u_star: float
    lam: float
    kind: str  # local_min | local_max


def _derivative_fn(spec, expr):
    coord = spec.candidate_coordinate

    def dlam(u):
        env = dict(spec.parameters)
        env[coord] = u
        with np.errstate(all="ignore"):
            try:
                return np.asarray(exprdsl.eval_dual(expr, env, coord).deriv, dtype=float)
            except exprdsl.EvalError:
                pass
            u_arr = np.atleast_1d(u)
            out = np.full(u_arr.shape, np.nan)
            for j, x in enumerate(u_arr):
                env[coord] = float(x)
                try:
                    out[j] = exprdsl.eval_dual(expr, env, coord).deriv
                except exprdsl.EvalError:
                    pass
            return out if np.ndim(u) else out[0]
    return dlam


def threshold_oracle(model, window=None, scan: int = THRESHOLD_SCAN, tol: float = THRESHOLD_TOL) -> list:
    """Interior extrema of the exact lambda(u*) on `window`, sorted by u*."""
    spec = _spec_of(model)
    expr = inverse_expressions(model)[spec.bifurcation_param]
    lo, hi = (float(x) for x in (window if window is not None else spec.candidate_window))
    if not lo < hi:
        raise OracleError(f"degenerate window [{lo}, {hi}]")
    dlam = _derivative_fn(spec, expr)
    us = np.linspace(lo, hi, scan)
    d = dlam(us)
    found = []
    for i in range(scan - 1):
        a, b, da, db = us[i], us[i + 1], d[i], d[i + 1]
        if not (np.isfinite(da) and np.isfinite(db)) or da * db >= 0:
            continue
        m, _ = _bisect(lambda x: float(dlam(x)), a, b, da, tol, math.inf)
        if not lo < m < hi:
            continue
        kind = "local_max" if da > 0 else "local_min"
        found.append(OracleThreshold(float(m), closed_form_inverse(model, m), kind))
    return found


def threshold_report(model, window=None, scan: int = THRESHOLD_SCAN, tol: float = THRESHOLD_TOL) -> ThresholdReport:
    """threshold_oracle packaged in the einn report schema with source 'oracle'."""
    spec = _spec_of(model)
    lo, hi = (float(x) for x in (window if window is not None else spec.candidate_window))
    expr = inverse_expressions(model)[spec.bifurcation_param]
    dlam = _derivative_fn(spec, expr)
    ths = [Threshold(t.u_star, t.lam, t.kind, abs(float(dlam(t.u_star))))
           for t in threshold_oracle(model, (lo, hi), scan, tol)]
    return ThresholdReport(spec.id, (lo, hi), ths, source="oracle", scan_resolution=scan, refine_tol=tol)
