"""Small arithmetic expression language for config-defined model functions.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-'? atom ('^' integer)?
    atom   := number | identifier | func '(' expr {',' expr} ')' | '(' expr ')'

``^`` binds tighter than unary minus, so ``-x^2`` is ``-(x^2)``.  Evaluation
works on Python floats and on numpy arrays alike (element-wise).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import EvaluationError, ExprSyntaxError

__all__ = [
    "Constant",
    "Variable",
    "Negate",
    "BinaryOp",
    "Power",
    "Call",
    "Expression",
    "parse",
    "evaluate",
    "FUNCTIONS",
]


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Negate:
    operand: "Node"


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Power:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Node = Union[Constant, Variable, Negate, BinaryOp, Power, Call]


def _domain_log(x):
    if np.any(np.asarray(x) <= 0):
        raise ValueError("log of nonpositive value")
    return np.log(x)


def _domain_sqrt(x):
    if np.any(np.asarray(x) < 0):
        raise ValueError("sqrt of negative value")
    return np.sqrt(x)


# name -> (callable, min arity, max arity or None for variadic)
FUNCTIONS = {
    "abs": (np.abs, 1, 1),
    "exp": (np.exp, 1, 1),
    "log": (_domain_log, 1, 1),
    "sqrt": (_domain_sqrt, 1, 1),
    "sin": (np.sin, 1, 1),
    "cos": (np.cos, 1, 1),
    "tanh": (np.tanh, 1, 1),
    "min": (lambda *a: np.minimum.reduce(np.broadcast_arrays(*a)), 2, None),
    "max": (lambda *a: np.maximum.reduce(np.broadcast_arrays(*a)), 2, None),
}

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source):
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def _advance(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def _expect(self, text):
        kind, value, pos = self.tok
        if value != text or kind == "end":
            found = "end of input" if kind == "end" else repr(value)
            raise ExprSyntaxError(f"expected {text!r}, found {found}", pos)
        return self._advance()

    def parse(self):
        node = self.expr()
        kind, value, pos = self.tok
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {value!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.tok[1] in ("+", "-") and self.tok[0] == "op":
            op = self._advance()[1]
            node = BinaryOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.tok[1] in ("*", "/") and self.tok[0] == "op":
            op = self._advance()[1]
            node = BinaryOp(op, node, self.factor())
        return node

    def factor(self):
        negate = False
        if self.tok == ("op", "-", self.tok[2]):
            self._advance()
            negate = True
        node = self.atom()
        if self.tok[0] == "op" and self.tok[1] == "^":
            self._advance()
            kind, value, pos = self.tok
            if kind != "number" or not value.isdigit():
                raise ExprSyntaxError("exponent must be a nonnegative integer literal", pos)
            self._advance()
            node = Power(node, int(value))
        return Negate(node) if negate else node

    def atom(self):
        kind, value, pos = self._advance()
        if kind == "number":
            return Constant(float(value))
        if kind == "ident":
            if self.tok[0] == "op" and self.tok[1] == "(":
                return self.call(value, pos)
            if value in FUNCTIONS:
                raise ExprSyntaxError(f"function {value!r} needs an argument list", pos)
            return Variable(value)
        if kind == "op" and value == "(":
            node = self.expr()
            self._expect(")")
            return node
        found = "end of input" if kind == "end" else repr(value)
        raise ExprSyntaxError(f"expected a number, name or '(', found {found}", pos)

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise ExprSyntaxError(f"unknown function {name!r}", pos)
        self._expect("(")
        args = [self.expr()]
        while self.tok[0] == "op" and self.tok[1] == ",":
            self._advance()
            args.append(self.expr())
        self._expect(")")
        _, lo, hi = FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = str(lo) if hi == lo else f"at least {lo}"
            raise ExprSyntaxError(
                f"function {name!r} takes {want} argument(s), got {len(args)}", pos
            )
        return Call(name, tuple(args))


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node):
    if isinstance(node, BinaryOp):
        return _PREC[node.op]
    if isinstance(node, Negate):
        return 3
    return 4


def to_source(node: Node) -> str:
    """Serialize an AST so that ``parse(to_source(ast)).ast == ast``."""
    if isinstance(node, Constant):
        if node.value < 0 or not np.isfinite(node.value):
            raise ValueError(f"constant {node.value} has no literal form")
        return repr(float(node.value))
    if isinstance(node, Variable):
        return node.name
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a) for a in node.args)})"
    if isinstance(node, Power):
        base = to_source(node.base)
        if _prec(node.base) < 4 or isinstance(node.base, Power):
            base = f"({base})"
        return f"{base}^{node.exponent}"
    if isinstance(node, Negate):
        inner = to_source(node.operand)
        # parser only accepts an atom or atom^k after the minus
        if not isinstance(node.operand, (Constant, Variable, Call, Power)):
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[node.op]
    left = to_source(node.left)
    if _prec(node.left) < p:
        left = f"({left})"
    right = to_source(node.right)
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def _free(node, acc):
    if isinstance(node, Variable):
        acc.add(node.name)
    elif isinstance(node, Negate):
        _free(node.operand, acc)
    elif isinstance(node, Power):
        _free(node.base, acc)
    elif isinstance(node, BinaryOp):
        _free(node.left, acc)
        _free(node.right, acc)
    elif isinstance(node, Call):
        for a in node.args:
            _free(a, acc)
    return acc


def _eval(node, env):
    if isinstance(node, Constant):
        return np.float64(node.value)
    if isinstance(node, Variable):
        try:
            return env[node.name]
        except KeyError:
            raise EvaluationError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Negate):
        return -_eval(node.operand, env)
    if isinstance(node, Power):
        return _eval(node.base, env) ** node.exponent
    if isinstance(node, BinaryOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return a / b
    fn = FUNCTIONS[node.name][0]
    args = [_eval(a, env) for a in node.args]
    try:
        return fn(*args)
    except ValueError as exc:
        raise EvaluationError(f"{exc} in {to_source(node)}") from None


@dataclass(frozen=True)
class Expression:
    source: str
    ast: Node
    free_variables: frozenset

    def evaluate(self, bindings: Mapping[str, object]):
        return evaluate(self, bindings)

    def to_source(self) -> str:
        return to_source(self.ast)

    def __str__(self):
        return self.source


def parse(source: str) -> Expression:
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    ast = _Parser(source).parse()
    return Expression(source, ast, frozenset(_free(ast, set())))


def evaluate(expr: Expression, bindings: Mapping[str, object]):
    """Evaluate ``expr``; arrays in ``bindings`` broadcast element-wise.

    Returns a float for scalar bindings and an ndarray otherwise.
    """
    missing = expr.free_variables - set(bindings)
    if missing:
        raise EvaluationError(f"unbound variable(s) {sorted(missing)}")
    env = {k: np.asarray(v, dtype=np.float64) if not np.isscalar(v) else np.float64(v)
           for k, v in bindings.items()}
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _eval(expr.ast, env)
    if np.ndim(out) == 0:
        return float(out)
    return out
