"""Right-hand-side expression language with forward-mode derivatives.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | power ;
    power   = primary [ "^" unary ] ;
    primary = number | name | name "(" expr { "," expr } ")" | "(" expr ")" ;

``^`` binds tighter than unary minus (``-u^2`` is ``-(u^2)``) and is
right-associative. Function names are reserved: exp, log, tanh, sqrt,
abs (one argument), min, max (two or more).

Every evaluator accepts floats or numpy arrays as bindings, so a model
residual can be evaluated over a whole candidate grid in one call.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Token", "Const", "Var", "Neg", "BinOp", "Pow", "Call", "Dual",
    "ExprError", "LexError", "ParseError", "EvalError",
    "tokenize", "parse", "parse_expr", "to_source", "variables",
    "eval", "eval_dual", "gradient", "jvp", "specialize", "is_affine_in",
]

FUNCTIONS = {"exp": 1, "log": 1, "tanh": 1, "sqrt": 1, "abs": 1, "min": -2, "max": -2}
OPERATORS = "+-*/^"
MAX_EXACT_POWER = 64


class ExprError(ValueError):
    """Base class for lexing, parsing and evaluation failures."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)


class LexError(ExprError):
    pass


class ParseError(ExprError):
    pass


class EvalError(ExprError):
    pass


@dataclass(frozen=True)
class Token:
    kind: str  # number | identifier | operator | paren | comma
    lexeme: str
    position: int


_TOKEN_RE = re.compile(
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<identifier>[A-Za-z][A-Za-z0-9_]*)"
    r"|(?P<operator>[-+*/^])"
    r"|(?P<paren>[()])"
    r"|(?P<comma>,)"
)


def tokenize(source: str) -> list[Token]:
    tokens = []
    i = 0
    while i < len(source):
        if source[i].isspace():
            i += 1
            continue
        m = _TOKEN_RE.match(source, i)
        if m is None:
            offset = len(source[:i].encode("utf-8"))
            raise LexError(f"unexpected character {source[i]!r}", offset)
        offset = len(source[:i].encode("utf-8"))
        tokens.append(Token(m.lastgroup, m.group(), offset))
        i = m.end()
    return tokens


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Const:
    # value may be an ndarray after specialize()
    value: object
    position: int = -1


@dataclass(frozen=True)
class Var:
    name: str
    position: int = -1


@dataclass(frozen=True)
class Neg:
    operand: "Node"
    position: int = -1


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Node"
    right: "Node"
    position: int = -1


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: "Node"
    position: int = -1
    # set when the exponent is an integer constant; evaluated by repeated multiplication
    int_exponent: int | None = None


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    position: int = -1


Node = Union[Const, Var, Neg, BinOp, Pow, Call]


def _make_pow(base, exponent, position=-1):
    k = None
    if isinstance(exponent, Const) and np.ndim(exponent.value) == 0:
        e = float(exponent.value)
        if e.is_integer() and abs(e) <= MAX_EXACT_POWER:
            k = int(e)
    elif isinstance(exponent, Neg) and isinstance(exponent.operand, Const):
        e = exponent.operand.value
        if np.ndim(e) == 0 and float(e).is_integer() and abs(e) <= MAX_EXACT_POWER:
            k = -int(e)
    return Pow(base, exponent, position, k)


class _Parser:
    def __init__(self, tokens, declared):
        self.tokens = list(tokens)
        self.i = 0
        self.declared = None if declared is None else set(declared)

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, lexeme):
        tok = self.peek()
        if tok is None or tok.lexeme != lexeme:
            where = tok.position if tok is not None else self._end()
            raise ParseError(f"expected {lexeme!r}", where)
        return self.take()

    def _end(self):
        if not self.tokens:
            return 0
        last = self.tokens[-1]
        return last.position + len(last.lexeme.encode("utf-8"))

    def parse(self):
        if not self.tokens:
            raise ParseError("empty expression", 0)
        node = self.expr()
        tok = self.peek()
        if tok is not None:
            if tok.lexeme == ")":
                raise ParseError("unbalanced parentheses", tok.position)
            raise ParseError(f"unexpected trailing token {tok.lexeme!r}", tok.position)
        return node

    def expr(self):
        node = self.term()
        while (tok := self.peek()) is not None and tok.lexeme in "+-" and tok.kind == "operator":
            self.take()
            node = BinOp(tok.lexeme, node, self.term(), tok.position)
        return node

    def term(self):
        node = self.unary()
        while (tok := self.peek()) is not None and tok.lexeme in "*/" and tok.kind == "operator":
            self.take()
            node = BinOp(tok.lexeme, node, self.unary(), tok.position)
        return node

    def unary(self):
        tok = self.peek()
        if tok is not None and tok.lexeme == "-":
            self.take()
            return Neg(self.unary(), tok.position)
        return self.power()

    def power(self):
        base = self.primary()
        tok = self.peek()
        if tok is not None and tok.lexeme == "^":
            self.take()
            return _make_pow(base, self.unary(), tok.position)
        return base

    def primary(self):
        tok = self.take()
        if tok is None:
            raise ParseError("unexpected end of expression", self._end())
        if tok.kind == "number":
            return Const(float(tok.lexeme), tok.position)
        if tok.kind == "identifier":
            nxt = self.peek()
            if nxt is not None and nxt.lexeme == "(":
                return self.call(tok)
            if tok.lexeme in FUNCTIONS:
                raise ParseError(f"function {tok.lexeme!r} used without arguments", tok.position)
            if self.declared is not None and tok.lexeme not in self.declared:
                raise ParseError(f"undeclared identifier {tok.lexeme!r}", tok.position)
            return Var(tok.lexeme, tok.position)
        if tok.lexeme == "(":
            node = self.expr()
            closing = self.peek()
            if closing is None or closing.lexeme != ")":
                raise ParseError("unbalanced parentheses", tok.position)
            self.take()
            return node
        raise ParseError(f"unexpected token {tok.lexeme!r}", tok.position)

    def call(self, name_tok):
        name = name_tok.lexeme
        if name not in FUNCTIONS:
            raise ParseError(f"unknown function {name!r}", name_tok.position)
        open_tok = self.expect("(")
        args = [self.expr()]
        while (tok := self.peek()) is not None and tok.kind == "comma":
            self.take()
            args.append(self.expr())
        closing = self.peek()
        if closing is None or closing.lexeme != ")":
            raise ParseError("unbalanced parentheses", open_tok.position)
        self.take()
        arity = FUNCTIONS[name]
        if (arity > 0 and len(args) != arity) or (arity < 0 and len(args) < -arity):
            raise ParseError(f"wrong number of arguments to {name}", name_tok.position)
        return Call(name, tuple(args), name_tok.position)


def parse(tokens: Sequence[Token], declared=None) -> Node:
    """Build an AST; every identifier must be in `declared` (``None`` skips the check)."""
    return _Parser(tokens, declared).parse()


def parse_expr(source: str, declared=None) -> Node:
    return parse(tokenize(source), declared)


def variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Const):
        return set()
    if isinstance(node, Neg):
        return variables(node.operand)
    if isinstance(node, BinOp):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Pow):
        return variables(node.base) | variables(node.exponent)
    return set().union(*(variables(a) for a in node.args))


def _fmt_number(x: float) -> str:
    text = repr(float(x))
    if text in ("inf", "nan", "-inf"):
        raise ValueError(f"cannot print non-finite constant {text}")
    return text


def to_source(node: Node) -> str:
    """Canonical, fully parenthesised text; ``parse(tokenize(to_source(a)))`` evaluates like `a`."""
    if isinstance(node, Const):
        if np.ndim(node.value) != 0:
            raise ValueError("cannot print an array-valued constant")
        x = float(node.value)
        return f"(-{_fmt_number(-x)})" if x < 0 or (x == 0 and math.copysign(1, x) < 0) else _fmt_number(x)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Pow):
        return f"({to_source(node.base)} ^ {to_source(node.exponent)})"
    return f"{node.func}({', '.join(to_source(a) for a in node.args)})"


# --- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class Dual:
    """A value paired with its derivative along one seed direction."""

    value: object
    deriv: object

    def __iter__(self):
        yield self.value
        yield self.deriv


def _check(cond, message, position):
    if np.any(cond):
        raise EvalError(message, position)


def _add(t1, t2, sign=1.0):
    if t1 is None:
        return t2 if (t2 is None or sign > 0) else -t2
    if t2 is None:
        return t1
    return t1 + t2 if sign > 0 else t1 - t2


def _scale(t, factor):
    return None if t is None else factor * t


def _int_power(x, k):
    result = x
    for _ in range(k - 1):
        result = result * x
    return result


def _ev(node, env, tan):
    """Return (value, tangent); tangent None means identically zero."""
    if isinstance(node, Const):
        return node.value, None
    if isinstance(node, Var):
        try:
            value = env[node.name]
        except KeyError:
            raise EvalError(f"no binding for {node.name!r}", node.position) from None
        return value, tan.get(node.name) if tan else None
    if isinstance(node, Neg):
        a, ta = _ev(node.operand, env, tan)
        return -a, (None if ta is None else -ta)
    if isinstance(node, BinOp):
        a, ta = _ev(node.left, env, tan)
        b, tb = _ev(node.right, env, tan)
        op = node.op
        if op == "+":
            return a + b, _add(ta, tb)
        if op == "-":
            return a - b, _add(ta, tb, -1.0)
        if op == "*":
            return a * b, _add(_scale(ta, b), _scale(tb, a))
        _check(np.equal(b, 0), "division by zero", node.position)
        q = a / b
        if ta is None and tb is None:
            return q, None
        return q, _add(_scale(ta, 1.0 / b), _scale(tb, -q / b))
    if isinstance(node, Pow):
        return _ev_pow(node, env, tan)
    return _ev_call(node, env, tan)


def _ev_pow(node, env, tan):
    a, ta = _ev(node.base, env, tan)
    k = node.int_exponent
    if k is not None:
        if k == 0:
            return np.ones_like(a) if np.ndim(a) else 1.0, None
        n = abs(k)
        p = _int_power(a, n)
        dp = None if ta is None else (n * _int_power(a, n - 1) if n > 1 else 1.0) * ta
        if k > 0:
            return p, dp
        _check(np.equal(p, 0), "division by zero in negative power", node.position)
        return 1.0 / p, (None if dp is None else -dp / (p * p))
    b, tb = _ev(node.exponent, env, tan)
    _check(np.less(a, 0), "non-integer power of a negative number", node.position)
    value = np.power(a, b)
    deriv = None
    if ta is not None:
        _check(np.equal(a, 0) & np.less(b, 1), "derivative of power undefined at zero base", node.position)
        deriv = b * np.power(a, b - 1.0) * ta
    if tb is not None:
        _check(np.equal(a, 0), "derivative of power with respect to exponent undefined at zero base", node.position)
        deriv = _add(deriv, value * np.log(a) * tb)
    return value, deriv


def _ev_call(node, env, tan):
    args = [_ev(a, env, tan) for a in node.args]
    f = node.func
    if f in ("min", "max"):
        value, t = args[0]
        for b, tb in args[1:]:
            pick = np.less(b, value) if f == "min" else np.greater(b, value)
            tie = np.equal(b, value)
            new_value = np.where(pick, b, value) if np.ndim(pick) else (b if pick else value)
            if t is not None or tb is not None:
                ta0 = 0.0 if t is None else t
                tb0 = 0.0 if tb is None else tb
                # at ties take the one-sided (right-hand) directional derivative
                tie_t = np.minimum(ta0, tb0) if f == "min" else np.maximum(ta0, tb0)
                t = np.where(tie, tie_t, np.where(pick, tb0, ta0))
            value = new_value
        return value, t
    a, ta = args[0]
    if f == "exp":
        value = np.exp(a)
        return value, _scale(ta, value)
    if f == "log":
        _check(np.less_equal(a, 0), "log of non-positive value", node.position)
        return np.log(a), _scale(ta, 1.0 / a)
    if f == "tanh":
        value = np.tanh(a)
        return value, _scale(ta, 1.0 - value * value)
    if f == "sqrt":
        _check(np.less(a, 0), "sqrt of negative value", node.position)
        value = np.sqrt(a)
        if ta is not None:
            _check(np.equal(a, 0), "derivative of sqrt undefined at zero", node.position)
            return value, ta / (2.0 * value)
        return value, None
    if f == "abs":
        value = np.abs(a)
        if ta is None:
            return value, None
        # right-hand directional derivative: d|x| = |dx| at x == 0
        return value, np.where(np.greater(a, 0), ta, np.where(np.less(a, 0), -ta, np.abs(ta)))
    raise EvalError(f"unknown function {f!r}", node.position)


def _scalarize(x):
    if isinstance(x, np.ndarray) and x.ndim == 0:
        return float(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def eval(node: Node, bindings: Mapping[str, object]):  # noqa: A001 - mirrors the operation name
    value, _ = _ev(node, bindings, None)
    return _scalarize(value)


def eval_dual(node: Node, bindings: Mapping[str, object], seed: str) -> Dual:
    """Value and exact partial derivative with respect to `seed`."""
    if seed not in bindings:
        raise EvalError(f"seed {seed!r} is not bound")
    value, deriv = _ev(node, bindings, {seed: 1.0})
    if deriv is None:
        deriv = np.zeros_like(value) if np.ndim(value) else 0.0
    else:
        deriv = deriv + np.zeros_like(value) if np.ndim(value) else deriv
    return Dual(_scalarize(value), _scalarize(deriv))


def gradient(node: Node, bindings: Mapping[str, object], seeds: Sequence[str]) -> np.ndarray:
    return np.array([eval_dual(node, bindings, s).deriv for s in seeds], dtype=float)


def jvp(node: Node, bindings: Mapping[str, object], tangents: Mapping[str, object]):
    """Value and directional derivative for several seeds in one pass.

    Tangents may carry a leading axis (one row per direction); results
    broadcast against the value's shape. Returns ``(value, tangent)`` with
    ``tangent`` None when the expression does not depend on any seed.
    """
    return _ev(node, bindings, dict(tangents))


# --- structural helpers --------------------------------------------------------

def specialize(node: Node, bindings: Mapping[str, object]) -> Node:
    """Fold every subtree whose variables are all bound into a constant.

    The result still evaluates to the same value for any binding of the
    remaining free variables; used to hoist grid-only terms out of training loops.
    """
    if isinstance(node, Const):
        return node
    if not (variables(node) - set(bindings)):
        return Const(_ev(node, bindings, None)[0], node.position)
    if isinstance(node, Var):
        return node
    if isinstance(node, Neg):
        return Neg(specialize(node.operand, bindings), node.position)
    if isinstance(node, BinOp):
        return BinOp(node.op, specialize(node.left, bindings), specialize(node.right, bindings), node.position)
    if isinstance(node, Pow):
        base = specialize(node.base, bindings)
        exponent = specialize(node.exponent, bindings)
        pow_node = _make_pow(base, exponent, node.position)
        return pow_node
    return Call(node.func, tuple(specialize(a, bindings) for a in node.args), node.position)


def is_affine_in(node: Node, name: str) -> bool:
    """True when `node` is provably of the form A + B*name with A, B free of `name`."""
    return _degree(node, name) <= 1


def _degree(node, name):
    # 0: independent, 1: affine, 2: anything else
    if isinstance(node, Const):
        return 0
    if isinstance(node, Var):
        return 1 if node.name == name else 0
    if isinstance(node, Neg):
        return _degree(node.operand, name)
    if isinstance(node, BinOp):
        dl, dr = _degree(node.left, name), _degree(node.right, name)
        if node.op in "+-":
            return max(dl, dr)
        if node.op == "*":
            return min(dl + dr, 2)
        return dl if dr == 0 else 2
    if isinstance(node, Pow):
        if _degree(node.exponent, name) != 0:
            return 2
        db = _degree(node.base, name)
        if db == 0:
            return 0
        return 1 if node.int_exponent == 1 else 2
    return 0 if all(_degree(a, name) == 0 for a in node.args) else 2
