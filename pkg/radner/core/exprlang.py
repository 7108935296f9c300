"""
Expression language for entitlements, dividends and diffusion coefficients.

Grammar (whitespace insensitive, ``**`` is accepted as an alias of ``^``)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | 't' | 'x<k>' | FUNC '(' expr ')' | '(' expr ')'

so ``^`` binds tighter than unary minus, which binds tighter than ``*`` and ``/``,
and ``^`` is right-associative. Expressions are immutable trees; ``compile``
turns one into a vectorised numpy callable ``f(t, X)`` where ``X`` has the state
components on its last axis.
"""
import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, FrozenSet, List, Optional, Tuple, Union

import numpy as np

from radner.exceptions import ExprDomainError, ExprSyntaxError

ArrayLike = Union[float, np.ndarray]
Compiled = Callable[[ArrayLike, np.ndarray], np.ndarray]

FUNCTIONS = ("exp", "log", "sqrt", "sin", "cos", "neg")
TIME = "t"

_VAR_RE = re.compile(r"x([0-9]+)$")


@dataclass(frozen=True)
class Expr:
    """Base node. Subclasses are value objects: equal trees compare equal."""

    def __str__(self) -> str:
        return to_string(self)

    def __call__(self, t: ArrayLike, x: ArrayLike) -> np.ndarray:
        return self.compiled(t, x)

    @cached_property
    def compiled(self) -> Compiled:
        return compile_expr(self)

    @cached_property
    def free_variables(self) -> FrozenSet[str]:
        return free_variables(self)

    def depends_on(self, var: str) -> bool:
        return var in self.free_variables

    def diff(self, var: str) -> "Expr":
        return differentiate(self, var)


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str

    @property
    def index(self) -> Optional[int]:
        """Zero-based state index, ``None`` for time."""
        if self.name == TIME:
            return None
        return int(self.name[1:]) - 1


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


ZERO = Const(0.0)
ONE = Const(1.0)


def var_name(index: int) -> str:
    """State variable name for a zero-based index."""
    return f"x{index + 1}"


def state_variables(K: int) -> List[str]:
    return [var_name(i) for i in range(K)]


# ============= Parsing =============

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^()])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = match.lastgroup
        value = match.group(kind)
        if kind != "ws":
            if value == "**":
                value = "^"
            tokens.append((kind, value, pos))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, K: int):
        self.text = text
        self.K = K
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def current(self) -> Tuple[str, str, int]:
        return self.tokens[self.i]

    def _advance(self) -> Tuple[str, str, int]:
        token = self.tokens[self.i]
        self.i += 1
        return token

    def _accept(self, value: str) -> bool:
        kind, tok, _ = self.current
        if kind == "op" and tok == value:
            self.i += 1
            return True
        return False

    def _expect(self, value: str):
        if not self._accept(value):
            kind, tok, pos = self.current
            found = "end of input" if kind == "end" else repr(tok)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos, self.text)

    def parse(self) -> Expr:
        node = self.expr()
        kind, tok, pos = self.current
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {tok!r}", pos, self.text)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            if self._accept("+"):
                node = BinOp("+", node, self.term())
            elif self._accept("-"):
                node = BinOp("-", node, self.term())
            else:
                return node

    def term(self) -> Expr:
        node = self.unary()
        while True:
            if self._accept("*"):
                node = BinOp("*", node, self.unary())
            elif self._accept("/"):
                node = BinOp("/", node, self.unary())
            else:
                return node

    def unary(self) -> Expr:
        if self._accept("-"):
            return Call("neg", self.unary())
        if self._accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self._accept("^"):
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, tok, pos = self._advance()
        if kind == "number":
            value = float(tok)
            if not math.isfinite(value):
                raise ExprSyntaxError(f"numeric literal {tok!r} is out of range", pos, self.text)
            return Const(value)
        if kind == "ident":
            return self._identifier(tok, pos)
        if kind == "op" and tok == "(":
            node = self.expr()
            self._expect(")")
            return node
        found = "end of input" if kind == "end" else repr(tok)
        raise ExprSyntaxError(f"unexpected {found}", pos, self.text)

    def _identifier(self, name: str, pos: int) -> Expr:
        if name in FUNCTIONS:
            self._expect("(")
            arg = self.expr()
            self._expect(")")
            return Call(name, arg)
        if name == TIME:
            return Var(TIME)
        match = _VAR_RE.match(name)
        if match is None:
            raise ExprSyntaxError(f"unknown identifier {name!r}", pos, self.text)
        index = int(match.group(1))
        if index < 1 or index > self.K:
            raise ExprSyntaxError(
                f"variable index out of range: {name} (K={self.K})", pos, self.text
            )
        return Var(name)


def parse(text: str, K: int) -> Expr:
    """Parse ``text`` into an expression over ``t, x1..xK``."""
    if K < 1:
        raise ValueError(f"state dimension must be positive, got {K}")
    return _Parser(text, K).parse()


# ============= Printing =============

def to_string(e: Expr) -> str:
    """Fully parenthesised rendering; ``parse(to_string(parse(s)))`` reproduces the tree."""
    if isinstance(e, Const):
        return repr(float(e.value)) if e.value >= 0 else f"(-{repr(float(-e.value))})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, BinOp):
        return f"({to_string(e.left)} {e.op} {to_string(e.right)})"
    if isinstance(e, Call):
        if e.func == "neg":
            return f"(-{to_string(e.arg)})"
        return f"{e.func}({to_string(e.arg)})"
    raise TypeError(f"not an expression node: {e!r}")


def free_variables(e: Expr) -> FrozenSet[str]:
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Var):
        return frozenset([e.name])
    if isinstance(e, BinOp):
        return free_variables(e.left) | free_variables(e.right)
    if isinstance(e, Call):
        return free_variables(e.arg)
    raise TypeError(f"not an expression node: {e!r}")


# ============= Folding constructors =============

_SCALAR_FUNCS = {
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "sin": math.sin,
    "cos": math.cos,
    "neg": lambda v: -v,
}


def _is(e: Expr, value: float) -> bool:
    return isinstance(e, Const) and e.value == value


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is(b, 1.0):
        return a
    if _is(a, 0.0) and not _is(b, 0.0):
        return ZERO
    return BinOp("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            value = a.value ** b.value
        except (ZeroDivisionError, OverflowError):
            return BinOp("^", a, b)
        if isinstance(value, float) and math.isfinite(value):
            return Const(value)
        return BinOp("^", a, b)
    if _is(b, 0.0):
        return ONE
    if _is(b, 1.0):
        return a
    return BinOp("^", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Call) and a.func == "neg":
        return a.arg
    return Call("neg", a)


def call(func: str, a: Expr) -> Expr:
    if func == "neg":
        return neg(a)
    if isinstance(a, Const):
        try:
            return Const(_SCALAR_FUNCS[func](a.value))
        except (ValueError, OverflowError):
            pass
    return Call(func, a)


def total(terms: List[Expr]) -> Expr:
    result: Expr = ZERO
    for term in terms:
        result = add(result, term)
    return result


def substitute(e: Expr, var: str, replacement: Expr) -> Expr:
    """Replace every occurrence of ``var`` and fold the constants this exposes."""
    if isinstance(e, Const):
        return e
    if isinstance(e, Var):
        return replacement if e.name == var else e
    if isinstance(e, BinOp):
        left = substitute(e.left, var, replacement)
        right = substitute(e.right, var, replacement)
        return _BUILDERS[e.op](left, right)
    if isinstance(e, Call):
        return call(e.func, substitute(e.arg, var, replacement))
    raise TypeError(f"not an expression node: {e!r}")


_BUILDERS = {"+": add, "-": sub, "*": mul, "/": div, "^": power}


# ============= Differentiation =============

def differentiate(e: Expr, var: str) -> Expr:
    """Exact partial derivative with respect to ``var`` (``t`` or ``x<k>``)."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if not e.depends_on(var):
        return ZERO
    if isinstance(e, BinOp):
        u, v = e.left, e.right
        du, dv = differentiate(u, var), differentiate(v, var)
        if e.op == "+":
            return add(du, dv)
        if e.op == "-":
            return sub(du, dv)
        if e.op == "*":
            return add(mul(du, v), mul(u, dv))
        if e.op == "/":
            return div(sub(mul(du, v), mul(u, dv)), power(v, Const(2.0)))
        if e.op == "^":
            if not v.depends_on(var):
                return mul(mul(v, power(u, sub(v, ONE))), du)
            if not u.depends_on(var):
                return mul(mul(e, call("log", u)), dv)
            return mul(e, add(mul(dv, call("log", u)), div(mul(v, du), u)))
    if isinstance(e, Call):
        u = e.arg
        du = differentiate(u, var)
        if e.func == "neg":
            return neg(du)
        if e.func == "exp":
            return mul(call("exp", u), du)
        if e.func == "log":
            return div(du, u)
        if e.func == "sqrt":
            return div(du, mul(Const(2.0), call("sqrt", u)))
        if e.func == "sin":
            return mul(call("cos", u), du)
        if e.func == "cos":
            return mul(neg(call("sin", u)), du)
    raise TypeError(f"cannot differentiate {e!r}")


def gradient(e: Expr, K: int) -> List[Expr]:
    return [differentiate(e, name) for name in state_variables(K)]


# ============= Evaluation =============

def _domain_error(node: Expr, message: str) -> ExprDomainError:
    return ExprDomainError(message, to_string(node))


def _compile_node(e: Expr) -> Compiled:
    if isinstance(e, Const):
        value = np.float64(e.value)
        return lambda t, x: value

    if isinstance(e, Var):
        index = e.index
        if index is None:
            return lambda t, x: t
        return lambda t, x: x[..., index]

    if isinstance(e, BinOp):
        left, right = _compile_node(e.left), _compile_node(e.right)
        if e.op == "+":
            return lambda t, x: left(t, x) + right(t, x)
        if e.op == "-":
            return lambda t, x: left(t, x) - right(t, x)
        if e.op == "*":
            return lambda t, x: left(t, x) * right(t, x)
        if e.op == "/":
            def _div(t, x):
                den = right(t, x)
                if np.any(den == 0.0):
                    raise _domain_error(e, "division by zero")
                return left(t, x) / den
            return _div
        if e.op == "^":
            integral_exponent = isinstance(e.right, Const) and float(e.right.value).is_integer()

            def _pow(t, x):
                base, exponent = left(t, x), right(t, x)
                if not integral_exponent and np.any(
                    (np.asarray(base) < 0.0) & (np.mod(exponent, 1.0) != 0.0)
                ):
                    raise _domain_error(e, "negative base with non-integer exponent")
                if np.any((np.asarray(base) == 0.0) & (np.asarray(exponent) < 0.0)):
                    raise _domain_error(e, "zero raised to a negative power")
                return np.power(base, exponent)
            return _pow

    if isinstance(e, Call):
        arg = _compile_node(e.arg)
        if e.func == "neg":
            return lambda t, x: -arg(t, x)
        if e.func == "exp":
            return lambda t, x: np.exp(arg(t, x))
        if e.func == "sin":
            return lambda t, x: np.sin(arg(t, x))
        if e.func == "cos":
            return lambda t, x: np.cos(arg(t, x))
        if e.func == "log":
            def _log(t, x):
                a = arg(t, x)
                if np.any(a <= 0.0):
                    raise _domain_error(e, "log of nonpositive argument")
                return np.log(a)
            return _log
        if e.func == "sqrt":
            def _sqrt(t, x):
                a = arg(t, x)
                if np.any(a < 0.0):
                    raise _domain_error(e, "sqrt of negative argument")
                return np.sqrt(a)
            return _sqrt

    raise TypeError(f"not an expression node: {e!r}")


def compile_expr(e: Expr) -> Compiled:
    """Vectorised evaluator; the result broadcasts ``t`` against ``X[..., 0]``."""
    inner = _compile_node(e)

    def evaluator(t: ArrayLike, x: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1)
        shape = np.broadcast_shapes(t.shape, x.shape[:-1])
        with np.errstate(all="ignore"):
            value = np.broadcast_to(np.asarray(inner(t, x), dtype=float), shape)
        if not np.all(np.isfinite(value)):
            raise _domain_error(e, "non-finite value")
        return value

    return evaluator


def evaluate(e: Expr, t: float, x: ArrayLike) -> float:
    """Value of ``e`` at a single point ``(t, x)``."""
    return float(e.compiled(t, np.asarray(x, dtype=float)))
