"""Closed analytic expression language.

Grammar: variables t1..tn, decimal constants, pi, binary + - * /,
integer powers via ^, unary minus, and the functions sin, cos, exp,
sqrt.  Expressions are immutable ASTs with deterministic evaluation,
symbolic partial derivatives, and a numpy code-generation path used by
the flow and quadrature hot loops.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Expression",
    "ExpressionError",
    "ParseError",
    "EvalError",
    "parse_expression",
]

_FUNCTIONS = ("sin", "cos", "exp", "sqrt")
_VAR_RE = re.compile(r"t([1-9][0-9]*)$")


class ExpressionError(ValueError):
    pass


class ParseError(ExpressionError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalError(ExpressionError):
    pass


# ---------------------------------------------------------------------------
# AST nodes.  Frozen so they hash; shared subtrees are fine.

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Const(Node):
    value: float


@dataclass(frozen=True)
class Pi(Node):
    pass


@dataclass(frozen=True)
class Var(Node):
    index: int  # t1 -> 0


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class Bin(Node):
    op: str  # + - * /
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int


@dataclass(frozen=True)
class Call(Node):
    fn: str
    arg: Node


_ZERO = Const(0.0)
_ONE = Const(1.0)


def _is_const(node: Node, value: float | None = None) -> bool:
    return isinstance(node, Const) and (value is None or node.value == value)


# Smart constructors: constant folding and unit elimination only.  No deeper
# rewriting; derivative trees stay small enough without it.

def _add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Bin("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(a, 0.0):
        return _neg(b)
    return Bin("-", a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Bin("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return _ZERO
    if _is_const(b, 1.0):
        return a
    return Bin("/", a, b)


def _neg(a: Node) -> Node:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _pow(a: Node, k: int) -> Node:
    if k == 0:
        return _ONE
    if k == 1:
        return a
    if isinstance(a, Const):
        return Const(a.value ** k)
    return Pow(a, k)


# ---------------------------------------------------------------------------
# Tokenizer / recursive-descent parser.

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(source):
            m = _TOKEN_RE.match(source, pos)
            if m is None or m.end() == pos:
                if source[pos:].strip():
                    raise ParseError(f"unexpected character {source[pos:].strip()[0]!r}", pos)
                break
            if m.group("num") is not None:
                # the token spans from the literal start to the match end so
                # any scientific-notation exponent is included
                self.tokens.append(("num", source[m.start("num"):m.end()], m.start("num")))
            elif m.group("ident") is not None:
                self.tokens.append(("ident", m.group("ident"), m.start()))
            else:
                self.tokens.append(("op", m.group("op"), m.start()))
            pos = m.end()
        self.i = 0

    def peek(self) -> tuple[str, str, int] | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self) -> tuple[str, str, int]:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", len(self.source))
        self.i += 1
        return tok

    def expect_op(self, op: str) -> None:
        tok = self.peek()
        if tok is None or tok[0] != "op" or tok[1] != op:
            pos = tok[2] if tok else len(self.source)
            raise ParseError(f"expected {op!r}", pos)
        self.i += 1

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok is not None:
            raise ParseError(f"trailing input {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Node:
        node = self.term()
        while (tok := self.peek()) and tok[0] == "op" and tok[1] in "+-":
            self.next()
            rhs = self.term()
            node = Bin(tok[1], node, rhs)
        return node

    def term(self) -> Node:
        node = self.factor()
        while (tok := self.peek()) and tok[0] == "op" and tok[1] in "*/":
            self.next()
            rhs = self.factor()
            node = Bin(tok[1], node, rhs)
        return node

    def factor(self) -> Node:
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] == "-":
            self.next()
            return _neg(self.factor())
        if tok and tok[0] == "op" and tok[1] == "+":
            self.next()
            return self.factor()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] == "^":
            self.next()
            base = Pow(base, self.int_literal())
        return base

    def int_literal(self) -> int:
        sign = 1
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] in "+-":
            self.next()
            if tok[1] == "-":
                sign = -1
            tok = self.peek()
        if tok is None or tok[0] != "num":
            pos = tok[2] if tok else len(self.source)
            raise ParseError("exponent must be an integer literal", pos)
        self.next()
        if not tok[1].isdigit():
            raise ParseError("exponent must be an integer literal", tok[2])
        return sign * int(tok[1])

    def atom(self) -> Node:
        kind, text, pos = self.next()
        if kind == "num":
            return Const(float(text))
        if kind == "ident":
            if text == "pi":
                return Pi()
            if text in _FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return Call(text, arg)
            m = _VAR_RE.match(text)
            if m:
                return Var(int(m.group(1)) - 1)
            raise ParseError(f"unknown identifier {text!r}", pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected token {text!r}", pos)


# ---------------------------------------------------------------------------
# Evaluation (scalar, checked), differentiation, unparsing, codegen.

def _eval(node: Node, args) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Pi):
        return math.pi
    if isinstance(node, Var):
        if node.index >= len(args):
            raise EvalError(f"expression uses t{node.index + 1} but only {len(args)} coordinates given")
        return float(args[node.index])
    if isinstance(node, Neg):
        return -_eval(node.arg, args)
    if isinstance(node, Bin):
        a = _eval(node.left, args)
        b = _eval(node.right, args)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if b == 0.0:
            raise EvalError("division by zero")
        return a / b
    if isinstance(node, Pow):
        base = _eval(node.base, args)
        if base == 0.0 and node.exponent < 0:
            raise EvalError("zero raised to a negative power")
        return base ** node.exponent
    if isinstance(node, Call):
        v = _eval(node.arg, args)
        if node.fn == "sin":
            return math.sin(v)
        if node.fn == "cos":
            return math.cos(v)
        if node.fn == "exp":
            return math.exp(v)
        if v < 0.0:
            raise EvalError(f"sqrt of negative value {v}")
        return math.sqrt(v)
    raise TypeError(f"unknown node {node!r}")


def _diff(node: Node, i: int) -> Node:
    if isinstance(node, (Const, Pi)):
        return _ZERO
    if isinstance(node, Var):
        return _ONE if node.index == i else _ZERO
    if isinstance(node, Neg):
        return _neg(_diff(node.arg, i))
    if isinstance(node, Bin):
        da = _diff(node.left, i)
        db = _diff(node.right, i)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, node.right), _mul(node.left, db))
        # quotient rule
        num = _sub(_mul(da, node.right), _mul(node.left, db))
        return _div(num, _pow(node.right, 2))
    if isinstance(node, Pow):
        du = _diff(node.base, i)
        return _mul(_mul(Const(float(node.exponent)), _pow(node.base, node.exponent - 1)), du)
    if isinstance(node, Call):
        du = _diff(node.arg, i)
        if node.fn == "sin":
            return _mul(Call("cos", node.arg), du)
        if node.fn == "cos":
            return _neg(_mul(Call("sin", node.arg), du))
        if node.fn == "exp":
            return _mul(node, du)
        return _div(du, _mul(Const(2.0), node))
    raise TypeError(f"unknown node {node!r}")


def _const_str(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


# precedence: additive 1, multiplicative 2, unary 3, power 4, atom 5
def _unparse(node: Node) -> tuple[str, int]:
    if isinstance(node, Const):
        s = _const_str(node.value)
        return (s, 5 if node.value >= 0 else 3)
    if isinstance(node, Pi):
        return ("pi", 5)
    if isinstance(node, Var):
        return (f"t{node.index + 1}", 5)
    if isinstance(node, Neg):
        s, lvl = _unparse(node.arg)
        if lvl < 3:
            s = f"({s})"
        return (f"-{s}", 3)
    if isinstance(node, Bin):
        ls, llvl = _unparse(node.left)
        rs, rlvl = _unparse(node.right)
        if node.op in "+-":
            if llvl < 1:
                ls = f"({ls})"
            if rlvl <= 1:
                rs = f"({rs})"
            return (f"{ls} {node.op} {rs}", 1)
        if llvl < 2:
            ls = f"({ls})"
        if rlvl <= 2:
            rs = f"({rs})"
        return (f"{ls}{node.op}{rs}", 2)
    if isinstance(node, Pow):
        bs, blvl = _unparse(node.base)
        if blvl < 5:
            bs = f"({bs})"
        return (f"{bs}^{node.exponent}", 4)
    if isinstance(node, Call):
        arg, _ = _unparse(node.arg)
        return (f"{node.fn}({arg})", 5)
    raise TypeError(f"unknown node {node!r}")


def _emit_numpy(node: Node) -> str:
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, Pi):
        return "_pi"
    if isinstance(node, Var):
        return f"t[..., {node.index}]"
    if isinstance(node, Neg):
        return f"(-{_emit_numpy(node.arg)})"
    if isinstance(node, Bin):
        return f"({_emit_numpy(node.left)} {node.op} {_emit_numpy(node.right)})"
    if isinstance(node, Pow):
        if node.exponent < 0:
            return f"({_emit_numpy(node.base)} ** {node.exponent}.0)"
        return f"({_emit_numpy(node.base)} ** {node.exponent})"
    if isinstance(node, Call):
        return f"_np.{node.fn}({_emit_numpy(node.arg)})"
    raise TypeError(f"unknown node {node!r}")


def _substitute(node: Node, repl: tuple[Node, ...]) -> Node:
    if isinstance(node, (Const, Pi)):
        return node
    if isinstance(node, Var):
        if node.index >= len(repl):
            raise ExpressionError(f"no substitution provided for t{node.index + 1}")
        return repl[node.index]
    if isinstance(node, Neg):
        return _neg(_substitute(node.arg, repl))
    if isinstance(node, Bin):
        a = _substitute(node.left, repl)
        b = _substitute(node.right, repl)
        if node.op == "+":
            return _add(a, b)
        if node.op == "-":
            return _sub(a, b)
        if node.op == "*":
            return _mul(a, b)
        return _div(a, b)
    if isinstance(node, Pow):
        return _pow(_substitute(node.base, repl), node.exponent)
    if isinstance(node, Call):
        return Call(node.fn, _substitute(node.arg, repl))
    raise TypeError(f"unknown node {node!r}")


def _max_var(node: Node) -> int:
    if isinstance(node, Var):
        return node.index + 1
    if isinstance(node, Neg):
        return _max_var(node.arg)
    if isinstance(node, Bin):
        return max(_max_var(node.left), _max_var(node.right))
    if isinstance(node, Pow):
        return _max_var(node.base)
    if isinstance(node, Call):
        return _max_var(node.arg)
    return 0


@lru_cache(maxsize=None)
def _compile_node(node: Node):
    src = f"lambda t: _np.asarray({_emit_numpy(node)}, dtype=float) + _np.zeros(t.shape[:-1])"
    raw = eval(src, {"_np": np, "_pi": np.pi})

    def fn(t):
        # off-domain points may produce nan/inf; callers mask them via guards
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return raw(t)

    return fn


@lru_cache(maxsize=None)
def _compile_stack(nodes: tuple):
    """One generated callable for a whole component tuple (single call site
    beats per-component dispatch in the integration hot loops)."""
    parts = ", ".join(
        f"_np.asarray({_emit_numpy(nd)}, dtype=float) + _z" for nd in nodes)
    src = f"lambda t, _z: _np.stack([{parts}], axis=-1)"
    raw = eval(src, {"_np": np, "_pi": np.pi})

    def fn(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return raw(t, np.zeros(t.shape[:-1]))

    return fn


class Expression:
    """Immutable wrapper around a parsed AST."""

    __slots__ = ("root", "_nvars")

    def __init__(self, root: Node):
        self.root = root
        self._nvars = _max_var(root)

    @property
    def nvars(self) -> int:
        return self._nvars

    def __call__(self, *args: float) -> float:
        if len(args) == 1 and hasattr(args[0], "__len__"):
            args = tuple(args[0])
        return _eval(self.root, args)

    def evaluate(self, point) -> float:
        return _eval(self.root, tuple(point))

    def diff(self, i: int) -> Expression:
        return Expression(_diff(self.root, i))

    def gradient(self, n: int) -> tuple[Expression, ...]:
        return tuple(self.diff(i) for i in range(n))

    def substitute(self, replacements) -> Expression:
        """Replace t1..tk by the given expressions (composition)."""
        return Expression(_substitute(self.root, tuple(r.root for r in replacements)))

    def to_source(self) -> str:
        return _unparse(self.root)[0]

    def compiled(self):
        """Vectorized callable: points of shape (..., n) -> values (...,).

        The fast path does not re-check domains; callers keep it on data
        already known admissible.
        """
        return _compile_node(self.root)

    def __eq__(self, other) -> bool:
        return isinstance(other, Expression) and self.root == other.root

    def __hash__(self) -> int:
        return hash(self.root)

    def __repr__(self) -> str:
        return f"Expression({self.to_source()!r})"

    # AST-level algebra, used when builtins assemble vector fields from
    # metric and potential.
    def __add__(self, other: Expression) -> Expression:
        return Expression(_add(self.root, other.root))

    def __sub__(self, other: Expression) -> Expression:
        return Expression(_sub(self.root, other.root))

    def __mul__(self, other: Expression) -> Expression:
        return Expression(_mul(self.root, other.root))

    def __truediv__(self, other: Expression) -> Expression:
        return Expression(_div(self.root, other.root))

    def __neg__(self) -> Expression:
        return Expression(_neg(self.root))

    def is_zero(self) -> bool:
        return _is_const(self.root, 0.0)


def parse_expression(source: str) -> Expression:
    """Parse ``source`` into an Expression; raises ParseError on bad input."""
    return Expression(_Parser(source).parse())


def const(value: float) -> Expression:
    return Expression(Const(float(value)))


ZERO_EXPR = Expression(_ZERO)
ONE_EXPR = Expression(_ONE)


def compile_vector(exprs, n: int):
    """Compile component expressions into points (..., n) -> (..., k)."""
    return _compile_stack(tuple(ex.root for ex in exprs))


def compile_matrix(rows, n: int):
    """Compile a matrix of expressions into points (..., n) -> (..., r, c)."""
    rows = tuple(tuple(row) for row in rows)
    shape = (len(rows), len(rows[0]))
    flat = _compile_stack(tuple(ex.root for row in rows for ex in row))

    def fn(t: np.ndarray) -> np.ndarray:
        out = flat(t)
        return out.reshape(out.shape[:-1] + shape)

    return fn
