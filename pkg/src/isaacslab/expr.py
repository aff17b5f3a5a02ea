"""Small arithmetic expression language for model coefficients.

Expressions are written over a fixed vocabulary of variables::

    s                       time
    x1 .. xd                state components
    p1 .. pd                gradient components
    u1_1 .. u1_k            player-1 control components
    u2_1 .. u2_k            player-2 control components
    u_1 .. u_k              single-controller components (control problems)

and the functions ``sin cos exp log abs sqrt min max clamp sign step pow``.
The constant ``pi`` is also recognised.

Precedence from tightest to loosest is: unary minus, ``^`` (right
associative), ``*``/``/``, ``+``/``-`` (both left associative).  Because
unary minus binds tighter than ``^``, ``-x^2`` means ``(-x)^2``.

Evaluation works on scalars and on numpy arrays alike, so a single parsed
coefficient can be evaluated over a whole grid by broadcasting.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "ArityError",
    "UnboundVariableError",
    "ExprDomainError",
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Call",
    "Expr",
    "parse",
    "evaluate",
    "free_vars",
    "to_source",
    "fold_constants",
    "rename_vars",
    "FUNCTIONS",
    "is_variable_name",
]


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class UnknownIdentifierError(ExprSyntaxError):
    pass


class ArityError(ExprSyntaxError):
    pass


class UnboundVariableError(ExprError):
    pass


class ExprDomainError(ExprError):
    pass


Span = tuple  # (start, end) character offsets


@dataclass(frozen=True)
class Const:
    value: float
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    name: str
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    span: Span = field(default=(0, 0), compare=False, repr=False)


Node = Union[Const, Var, Unary, Binary, Call]

# name -> arity
FUNCTIONS = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "abs": 1,
    "sqrt": 1,
    "sign": 1,
    "step": 1,
    "min": 2,
    "max": 2,
    "pow": 2,
    "clamp": 3,
}

NAMED_CONSTANTS = {"pi": math.pi}

_VAR_RE = re.compile(r"^(s|x[1-9]\d*|p[1-9]\d*|u[12]_[1-9]\d*|u_[1-9]\d*)$")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def is_variable_name(name: str) -> bool:
    return bool(_VAR_RE.match(name))


@dataclass(frozen=True)
class _Token:
    kind: str  # num | ident | op | end
    text: str
    pos: int


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser.

    Grammar::

        expr   := term (('+' | '-') term)*
        term   := power (('*' | '/') power)*
        power  := unary ('^' power)?
        unary  := '-' unary | atom
        atom   := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'
    """

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        return ExprSyntaxError(message, tok.pos, self.text)

    def expect(self, text: str) -> _Token:
        if self.tok.kind == "op" and self.tok.text == text:
            return self.advance()
        found = "end of input" if self.tok.kind == "end" else repr(self.tok.text)
        raise self.error(f"expected {text!r}, found {found}")

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            raise self.error(f"unexpected token {self.tok.text!r}")
        return node

    def expr(self) -> Node:
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            right = self.term()
            left = Binary(op, left, right, (left.span[0], right.span[1]))
        return left

    def term(self) -> Node:
        left = self.power()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            right = self.power()
            left = Binary(op, left, right, (left.span[0], right.span[1]))
        return left

    def power(self) -> Node:
        base = self.unary()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            exponent = self.power()
            return Binary("^", base, exponent, (base.span[0], exponent.span[1]))
        return base

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            start = self.advance().pos
            operand = self.unary()
            return Unary("-", operand, (start, operand.span[1]))
        return self.atom()

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Const(float(tok.text), (tok.pos, tok.pos + len(tok.text)))
        if tok.kind == "ident":
            self.advance()
            name = tok.text
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(tok)
            if name in FUNCTIONS:
                raise self.error(f"function {name!r} used without arguments", tok)
            if name in NAMED_CONSTANTS:
                return Const(NAMED_CONSTANTS[name], (tok.pos, tok.pos + len(name)))
            if not is_variable_name(name):
                raise UnknownIdentifierError(f"unknown identifier {name!r}", tok.pos, self.text)
            return Var(name, (tok.pos, tok.pos + len(name)))
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "end":
            raise self.error("unexpected end of input")
        raise self.error(f"unexpected token {tok.text!r}")

    def call(self, name_tok: _Token) -> Node:
        name = name_tok.text
        if name not in FUNCTIONS:
            raise UnknownIdentifierError(f"unknown function {name!r}", name_tok.pos, self.text)
        self.expect("(")
        args = []
        if not (self.tok.kind == "op" and self.tok.text == ")"):
            args.append(self.expr())
            while self.tok.kind == "op" and self.tok.text == ",":
                self.advance()
                args.append(self.expr())
        end = self.expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ArityError(
                f"{name}() takes {FUNCTIONS[name]} argument(s), got {len(args)}",
                name_tok.pos,
                self.text,
            )
        return Call(name, tuple(args), (name_tok.pos, end.pos + 1))


def parse(text: str) -> Node:
    """Parse ``text`` into an expression tree.

    Raises
    ------
    ExprSyntaxError
        On malformed input; ``position`` holds the 0-based offset of the
        offending token.  ``UnknownIdentifierError`` and ``ArityError`` are
        subclasses.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text if isinstance(text, str) else "")
    return _Parser(text).parse()


def free_vars(node: Node) -> frozenset:
    if isinstance(node, Var):
        return frozenset([node.name])
    if isinstance(node, Const):
        return frozenset()
    if isinstance(node, Unary):
        return free_vars(node.operand)
    if isinstance(node, Binary):
        return free_vars(node.left) | free_vars(node.right)
    return frozenset().union(*(free_vars(a) for a in node.args))


def rename_vars(node: Node, mapping: Mapping[str, str]) -> Node:
    """Return a copy of ``node`` with variables renamed through ``mapping``."""
    if isinstance(node, Var):
        return Var(mapping.get(node.name, node.name), node.span)
    if isinstance(node, Const):
        return node
    if isinstance(node, Unary):
        return Unary(node.op, rename_vars(node.operand, mapping), node.span)
    if isinstance(node, Binary):
        return Binary(node.op, rename_vars(node.left, mapping), rename_vars(node.right, mapping), node.span)
    return Call(node.func, tuple(rename_vars(a, mapping) for a in node.args), node.span)


# ---------------------------------------------------------------- evaluation


def _check(value, what: str):
    if np.any(np.isnan(value)):
        raise ExprDomainError(f"{what} produced NaN")
    return value


def _step(a):
    return np.where(a >= 0, 1.0, 0.0)


def _apply_call(name: str, args: list, node: Call):
    if name == "log":
        (a,) = args
        if np.any(a <= 0):
            raise ExprDomainError(f"log of non-positive value (span {node.span})")
        return np.log(a)
    if name == "sqrt":
        (a,) = args
        if np.any(a < 0):
            raise ExprDomainError(f"sqrt of negative value (span {node.span})")
        return np.sqrt(a)
    if name == "pow":
        return _power(args[0], args[1], node)
    if name == "clamp":
        a, lo, hi = args
        return np.minimum(np.maximum(a, lo), hi)
    fn = {
        "sin": np.sin,
        "cos": np.cos,
        "exp": np.exp,
        "abs": np.abs,
        "sign": np.sign,
        "step": _step,
        "min": np.minimum,
        "max": np.maximum,
    }[name]
    return fn(*args)


def _power(a, b, node):
    bad = (np.asarray(a) < 0) & (np.asarray(b) != np.floor(b))
    if np.any(bad):
        raise ExprDomainError(f"negative base with non-integer exponent (span {node.span})")
    if np.any((np.asarray(a) == 0) & (np.asarray(b) < 0)):
        raise ExprDomainError(f"zero raised to a negative power (span {node.span})")
    return np.power(a, b)


def _eval(node: Node, env: Mapping):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariableError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Unary):
        return -_eval(node.operand, env)
    if isinstance(node, Binary):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        op = node.op
        if op == "+":
            return np.add(a, b)
        if op == "-":
            return np.subtract(a, b)
        if op == "*":
            return np.multiply(a, b)
        if op == "/":
            if np.any(np.asarray(b) == 0):
                raise ExprDomainError(f"division by zero (span {node.span})")
            return np.divide(a, b)
        return _power(a, b, node)
    return _apply_call(node.func, [_eval(a, env) for a in node.args], node)


def evaluate(node: Node, env: Mapping | None = None):
    """Evaluate an expression tree.

    ``env`` maps variable names to floats or numpy arrays; arrays broadcast
    against each other.  A 0-d result is returned as a Python float.
    """
    env = {} if env is None else env
    with np.errstate(all="ignore"):
        out = _check(_eval(node, env), "expression")
    if np.ndim(out) == 0:
        return float(out)
    return out


def fold_constants(node: Node) -> Node:
    """Collapse variable-free subtrees into constants.

    Subtrees that would raise a domain error are left unfolded so the error
    surfaces at evaluation time with the original span.
    """
    if isinstance(node, (Const, Var)):
        return node
    if isinstance(node, Unary):
        child = fold_constants(node.operand)
        if isinstance(child, Const):
            return Const(-child.value, node.span)
        return Unary(node.op, child, node.span)
    if isinstance(node, Binary):
        new = Binary(node.op, fold_constants(node.left), fold_constants(node.right), node.span)
        children = (new.left, new.right)
    else:
        new = Call(node.func, tuple(fold_constants(a) for a in node.args), node.span)
        children = new.args
    if all(isinstance(c, Const) for c in children):
        try:
            return Const(evaluate(new), node.span)
        except ExprDomainError:
            return new
    return new


# ---------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}
_UNARY_PREC = 4
_ATOM_PREC = 5


def _prec(node: Node) -> int:
    if isinstance(node, Binary):
        return _PREC[node.op]
    if isinstance(node, Unary):
        return _UNARY_PREC
    if isinstance(node, Const) and node.value < 0:
        return _UNARY_PREC
    return _ATOM_PREC


def _wrap(node: Node, needs_parens: bool) -> str:
    text = to_source(node)
    return f"({text})" if needs_parens else text


def to_source(node: Node) -> str:
    """Render ``node`` back to text with the minimum of parentheses."""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return "-" + _wrap(node.operand, _prec(node.operand) < _UNARY_PREC)
    if isinstance(node, Call):
        return f"{node.func}(" + ", ".join(to_source(a) for a in node.args) + ")"
    p = _PREC[node.op]
    if node.op == "^":
        left = _wrap(node.left, _prec(node.left) <= p)
        right = _wrap(node.right, _prec(node.right) < p)
    else:
        left = _wrap(node.left, _prec(node.left) < p)
        right = _wrap(node.right, _prec(node.right) <= p)
    return f"{left} {node.op} {right}"


class Expr:
    """A parsed coefficient expression with its constant-folded form."""

    __slots__ = ("source", "ast", "folded", "free_vars")

    def __init__(self, source: str | Node):
        if isinstance(source, str):
            self.source = source
            self.ast = parse(source)
        else:
            self.ast = source
            self.source = to_source(source)
        self.folded = fold_constants(self.ast)
        self.free_vars = free_vars(self.ast)

    @property
    def is_constant(self) -> bool:
        return isinstance(self.folded, Const)

    def __call__(self, env: Mapping | None = None):
        return evaluate(self.folded, env)

    def rename(self, mapping: Mapping[str, str]) -> "Expr":
        return Expr(rename_vars(self.ast, mapping))

    def __repr__(self):
        return f"Expr({self.source!r})"
