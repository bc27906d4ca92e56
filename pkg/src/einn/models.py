"""Model specifications: du/dt = F(u; lambda) as data, plus the built-in zoo.

A model document is an INI file::

    [model]
    schema_version = 1
    id = scheffer
    state_vars = u
    bifurcation_param = r
    candidate_coordinate = u
    candidate_window = 0, 1.5
    feasibility = r >= 0; u >= 0

    [parameters]
    alpha = 0.1

    [equations]
    u = "alpha - beta*u + r*u^p/(u^p + h^p)"

Optional sections: ``[inverse]`` (closed-form equilibrium expressions in the
candidate coordinate, keyed by the bifurcation parameter and companion
states) and ``[reference]`` (``name = u_star, lambda, provenance``).
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

from . import exprdsl

SCHEMA_VERSION = 1
ZOO_IDS = ("scheffer", "may", "abeta_ca", "linear_toy")


class ModelError(ValueError):
    """Schema, parse or invariant violation in a model document."""


@dataclass(frozen=True)
class Constraint:
    symbol: str
    bound: float

    def __str__(self):
        return f"{self.symbol} >= {self.bound!r}"

    def holds(self, value):
        return value >= self.bound


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # error | warning
    location: str
    message: str

    def __str__(self):
        return f"{self.severity}: {self.location}: {self.message}"


@dataclass(frozen=True, eq=False)
class ModelSpec:
    id: str
    state_vars: tuple
    equations: tuple  # one expression source per state variable, same order
    parameters: dict
    bifurcation_param: str
    candidate_coordinate: str
    candidate_window: tuple
    feasibility: tuple = ()
    notes: str = ""
    oracle_window: tuple | None = None
    lambda_window: tuple | None = None

    @property
    def declared(self) -> set:
        return set(self.state_vars) | set(self.parameters) | {self.bifurcation_param}

    @property
    def companions(self) -> tuple:
        return tuple(s for s in self.state_vars if s != self.candidate_coordinate)

    @property
    def output_names(self) -> tuple:
        """Network output layout: the bifurcation parameter, then companion states."""
        return (self.bifurcation_param,) + self.companions

    @cached_property
    def asts(self) -> tuple:
        return tuple(exprdsl.parse_expr(src, self.declared) for src in self.equations)

    def with_parameters(self, **overrides) -> "ModelSpec":
        unknown = set(overrides) - set(self.parameters)
        if unknown:
            raise ModelError(f"unknown parameter(s) {sorted(unknown)}")
        params = dict(self.parameters)
        params.update({k: float(v) for k, v in overrides.items()})
        return ModelSpec(self.id, self.state_vars, self.equations, params, self.bifurcation_param,
                         self.candidate_coordinate, self.candidate_window, self.feasibility,
                         self.notes, self.oracle_window, self.lambda_window)

    def residuals(self, state: dict, lam):
        """Evaluate every right-hand side; `state` maps state names to values."""
        env = dict(self.parameters)
        env.update(state)
        env[self.bifurcation_param] = lam
        return [exprdsl.eval(ast, env) for ast in self.asts]

    def feasible(self, values: dict) -> bool:
        return all(c.holds(values[c.symbol]) for c in self.feasibility if c.symbol in values)

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return _canonical(self) == _canonical(other)

    __hash__ = None


def _canonical(spec):
    return (spec.id, tuple(spec.state_vars), tuple(s.strip() for s in spec.equations),
            tuple(sorted((k, float(v)) for k, v in spec.parameters.items())),
            spec.bifurcation_param, spec.candidate_coordinate,
            tuple(float(x) for x in spec.candidate_window), tuple(spec.feasibility), spec.notes.strip(),
            _window(spec.oracle_window), _window(spec.lambda_window))


def _window(w):
    return None if w is None else tuple(float(x) for x in w)


@dataclass(frozen=True)
class ReferenceThreshold:
    name: str
    u_star: float
    lam: float
    provenance: str


@dataclass(frozen=True, eq=False)
class ZooEntry:
    spec: ModelSpec
    # closed-form equilibrium expressions in the candidate coordinate:
    # name -> source, keyed by the bifurcation parameter and each companion
    closed_form_inverse: dict = field(default_factory=dict)
    reference_thresholds: tuple = ()

    @cached_property
    def inverse_asts(self) -> dict:
        names = {self.spec.candidate_coordinate} | set(self.spec.parameters)
        return {k: exprdsl.parse_expr(src, names) for k, src in self.closed_form_inverse.items()}


def validate(spec: ModelSpec) -> list:
    """Invariant check; returns diagnostics (empty when the model is valid)."""
    diags = []

    def err(location, message):
        diags.append(Diagnostic("error", location, message))

    if not spec.id or not re.fullmatch(r"[A-Za-z0-9_.-]+", spec.id):
        err("model.id", f"invalid model id {spec.id!r}")
    if not spec.state_vars:
        err("model.state_vars", "no state variables")
    if len(set(spec.state_vars)) != len(spec.state_vars):
        err("model.state_vars", "duplicate state variable")
    if len(spec.equations) != len(spec.state_vars):
        err("equations", f"{len(spec.equations)} equation(s) for {len(spec.state_vars)} state variable(s)")
    if spec.bifurcation_param in spec.parameters:
        err("model.bifurcation_param", f"{spec.bifurcation_param!r} is also a fixed parameter")
    if spec.bifurcation_param in spec.state_vars:
        err("model.bifurcation_param", f"{spec.bifurcation_param!r} is also a state variable")
    if spec.candidate_coordinate not in spec.state_vars:
        err("model.candidate_coordinate", f"{spec.candidate_coordinate!r} is not a state variable")
    clash = set(spec.parameters) & set(spec.state_vars)
    if clash:
        err("parameters", f"names used as both parameter and state: {sorted(clash)}")
    for name in spec.declared:
        if name in exprdsl.FUNCTIONS:
            err("model", f"{name!r} is a reserved function name")
    lo_hi = tuple(spec.candidate_window)
    if len(lo_hi) != 2 or not lo_hi[0] < lo_hi[1]:
        err("model.candidate_window", f"degenerate window {list(lo_hi)}")
    for key in ("oracle_window", "lambda_window"):
        w = getattr(spec, key)
        if w is not None and (len(w) != 2 or not w[0] < w[1]):
            err(f"model.{key}", f"degenerate window {list(w)}")
    for c in spec.feasibility:
        if c.symbol not in (set(spec.state_vars) | {spec.bifurcation_param}):
            err("model.feasibility", f"constraint on unknown symbol {c.symbol!r}")
    for name, value in spec.parameters.items():
        if not isinstance(value, (int, float)) or value != value:
            err(f"parameters.{name}", "parameter value is not a real number")
    for var, src in zip(spec.state_vars, spec.equations):
        try:
            exprdsl.parse_expr(src, spec.declared)
        except exprdsl.ExprError as exc:
            err(f"equations.{var}", str(exc))
    return diags


# --- documents -------------------------------------------------------------------------

def _unquote(text):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _floats(text, location, count=None):
    try:
        values = tuple(float(x) for x in text.replace(":", ",").split(","))
    except ValueError:
        raise ModelError(f"{location}: expected numbers, got {text!r}") from None
    if count is not None and len(values) != count:
        raise ModelError(f"{location}: expected {count} numbers, got {text!r}")
    return values


_CONSTRAINT_RE = re.compile(r"^\s*([A-Za-z][A-Za-z0-9_]*)\s*>=\s*(\S+)\s*$")


def _parse_constraints(text):
    out = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        m = _CONSTRAINT_RE.match(part)
        if m is None:
            raise ModelError(f"model.feasibility: cannot parse constraint {part!r} (expected 'name >= number')")
        out.append(Constraint(m.group(1), float(m.group(2))))
    return tuple(out)


def _read(document: str):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(document)
    except configparser.Error as exc:
        raise ModelError(f"malformed model document: {exc}") from None
    return cp


def _spec_from_config(cp) -> ModelSpec:
    if not cp.has_section("model"):
        raise ModelError("missing [model] section")
    m = cp["model"]
    version = m.get("schema_version")
    if version is None:
        raise ModelError("model.schema_version is required")
    if version.strip() != str(SCHEMA_VERSION):
        raise ModelError(f"unsupported schema_version {version!r}")
    for key in ("id", "state_vars", "bifurcation_param", "candidate_window"):
        if not m.get(key, "").strip():
            raise ModelError(f"model.{key} is required")
    state_vars = tuple(s.strip() for s in m["state_vars"].split(",") if s.strip())
    if not cp.has_section("equations"):
        raise ModelError("missing [equations] section")
    eq_section = cp["equations"]
    extra = set(eq_section) - set(state_vars)
    if extra:
        raise ModelError(f"equations for undeclared state variable(s) {sorted(extra)}")
    missing = [s for s in state_vars if s not in eq_section]
    if missing:
        raise ModelError(f"no equation for state variable(s) {missing}")
    equations = tuple(_unquote(eq_section[s]) for s in state_vars)
    params = {}
    if cp.has_section("parameters"):
        for k, v in cp["parameters"].items():
            params[k] = _floats(v, f"parameters.{k}", 1)[0]
    oracle_window = m.get("oracle_window")
    lambda_window = m.get("lambda_window")
    return ModelSpec(
        id=m["id"].strip(),
        state_vars=state_vars,
        equations=equations,
        parameters=params,
        bifurcation_param=m["bifurcation_param"].strip(),
        candidate_coordinate=m.get("candidate_coordinate", state_vars[0] if state_vars else "").strip(),
        candidate_window=_floats(m["candidate_window"], "model.candidate_window", 2),
        feasibility=_parse_constraints(m.get("feasibility", "")),
        notes=_unquote(m.get("notes", "")),
        oracle_window=None if oracle_window is None else _floats(oracle_window, "model.oracle_window", 2),
        lambda_window=None if lambda_window is None else _floats(lambda_window, "model.lambda_window", 2),
    )


def _raise_on_errors(spec):
    errors = [d for d in validate(spec) if d.severity == "error"]
    if errors:
        raise ModelError("; ".join(str(d) for d in errors))


def load_spec(document: str) -> ModelSpec:
    """Parse and fully validate a model document; expressions are parsed eagerly."""
    spec = _spec_from_config(_read(document))
    _raise_on_errors(spec)
    spec.asts  # noqa: B018 - surface parse errors at load time
    return spec


def load_entry(document: str) -> ZooEntry:
    cp = _read(document)
    spec = _spec_from_config(cp)
    _raise_on_errors(spec)
    spec.asts  # noqa: B018
    inverse = {}
    if cp.has_section("inverse"):
        inverse = {k: _unquote(v) for k, v in cp["inverse"].items()}
    refs = []
    if cp.has_section("reference"):
        for name, text in cp["reference"].items():
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != 3:
                raise ModelError(f"reference.{name}: expected 'u_star, lambda, provenance'")
            refs.append(ReferenceThreshold(name, float(parts[0]), float(parts[1]), parts[2]))
    entry = ZooEntry(spec, inverse, tuple(refs))
    try:
        entry.inverse_asts  # noqa: B018
    except exprdsl.ExprError as exc:
        raise ModelError(f"inverse: {exc}") from None
    unknown = set(inverse) - set(spec.output_names)
    if unknown:
        raise ModelError(f"inverse expressions for unknown output(s) {sorted(unknown)}")
    return entry


def dump_spec(spec: ModelSpec, entry: ZooEntry | None = None) -> str:
    """Serialize a spec (and optional closed-form/reference sections) to a model document."""
    lines = [
        "[model]",
        f"schema_version = {SCHEMA_VERSION}",
        f"id = {spec.id}",
        f"state_vars = {', '.join(spec.state_vars)}",
        f"bifurcation_param = {spec.bifurcation_param}",
        f"candidate_coordinate = {spec.candidate_coordinate}",
        f"candidate_window = {spec.candidate_window[0]!r}, {spec.candidate_window[1]!r}",
    ]
    if spec.oracle_window is not None:
        lines.append(f"oracle_window = {spec.oracle_window[0]!r}, {spec.oracle_window[1]!r}")
    if spec.lambda_window is not None:
        lines.append(f"lambda_window = {spec.lambda_window[0]!r}, {spec.lambda_window[1]!r}")
    if spec.feasibility:
        lines.append("feasibility = " + "; ".join(str(c) for c in spec.feasibility))
    if spec.notes:
        lines.append(f'notes = "{" ".join(spec.notes.split())}"')
    lines += ["", "[parameters]"]
    lines += [f"{k} = {float(v)!r}" for k, v in spec.parameters.items()]
    lines += ["", "[equations]"]
    lines += [f'{s} = "{src}"' for s, src in zip(spec.state_vars, spec.equations)]
    if entry is not None and entry.closed_form_inverse:
        lines += ["", "[inverse]"]
        lines += [f'{k} = "{v}"' for k, v in entry.closed_form_inverse.items()]
    if entry is not None and entry.reference_thresholds:
        lines += ["", "[reference]"]
        lines += [f"{r.name} = {r.u_star!r}, {r.lam!r}, {r.provenance}" for r in entry.reference_thresholds]
    return "\n".join(lines) + "\n"


def zoo_document(model_id: str) -> str:
    if model_id not in ZOO_IDS:
        raise ModelError(f"unknown zoo model {model_id!r}; choose from {', '.join(ZOO_IDS)}")
    return resources.files("einn.zoo").joinpath(f"{model_id}.ini").read_text()


def zoo_entry(model_id: str) -> ZooEntry:
    return load_entry(zoo_document(model_id))


def zoo() -> list:
    return [zoo_entry(i) for i in ZOO_IDS]
