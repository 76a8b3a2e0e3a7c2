"""Signal temporal logic: parsing, pretty-printing, robust semantics.

Formulas are evaluated over `signals.Trace` objects on the sampling
grid: a temporal interval [a, b] covers every grid point i*dt with
a <= i*dt <= b (closed on both ends, 1e-9 snap tolerance), and no
inter-sample interpolation is performed. Robustness follows the usual
space-robustness recursion:

    predicate  signed margin of the comparison at the sample
    not        negation
    and / or   min / max
    a -> b     max(-rob(a), rob(b))
    G[a,b] p   min of rob(p) over grid points in the shifted interval
    F[a,b] p   max over the same points
    p U[a,b] q max over t' in the interval of
               min(rob(q, t'), min of rob(p) strictly before t')

Robustness >= 0 counts as satisfied (ties break toward satisfaction).

Concrete grammar (infix, keywords are case-sensitive)::

    formula  := implies
    implies  := or ( '->' implies )?                 right-associative
    or       := and ( 'or' and )*
    and      := until ( 'and' until )*
    until    := unary ( 'U' '[' a ',' b ']' unary )?
    unary    := 'not' unary
              | 'G' '[' a ',' b ']' unary            always
              | 'F' '[' a ',' b ']' unary            eventually
              | '(' formula ')'
              | predicate
    predicate := expr ('<='|'<'|'>='|'>') expr
    expr     := term ( ('+'|'-') term )*
    term     := factor ( '*' factor )*
    factor   := number | channel | 'abs' '(' expr ')' | '-' factor
              | '(' expr ')'

Channel names must resolve against the trace they are evaluated on.
Reference specification strings for the bundled plants:

    acc safety      G[0,50](d_rel - (d_safe + 1.4*v_ego) >= 0)
    acc recovery    G[0,50]((d_rel < d_safe + 1.4*v_ego)
                            -> F[0,5](d_rel > d_safe + 1.4*v_ego))
    cstr tracking   G[27,30](abs(error) <= 0.35)
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .signals import Trace

_SNAP = 1e-9


# ---------------------------------------------------------------------------
# expression AST (the left/right sides of predicates)


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class BinExpr:
    op: str  # '+', '-', '*'
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class NegExpr:
    operand: "Expr"


@dataclass(frozen=True)
class AbsExpr:
    operand: "Expr"


Expr = Var | Const | BinExpr | NegExpr | AbsExpr


def eval_expr(expr: Expr, trace: Trace) -> np.ndarray:
    """Vector of expression values, one entry per trace step."""
    if isinstance(expr, Var):
        return trace.column(expr.name)
    if isinstance(expr, Const):
        return np.full(len(trace), expr.value)
    if isinstance(expr, NegExpr):
        return -eval_expr(expr.operand, trace)
    if isinstance(expr, AbsExpr):
        return np.abs(eval_expr(expr.operand, trace))
    left = eval_expr(expr.left, trace)
    right = eval_expr(expr.right, trace)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    if expr.op == "*":
        return left * right
    raise ValueError(f"unknown operator {expr.op!r}")


# ---------------------------------------------------------------------------
# formula AST


@dataclass(frozen=True)
class Pred:
    left: Expr
    op: str  # '<=', '<', '>=', '>'
    right: Expr


@dataclass(frozen=True)
class Not:
    operand: "StlFormula"


@dataclass(frozen=True)
class And:
    left: "StlFormula"
    right: "StlFormula"


@dataclass(frozen=True)
class Or:
    left: "StlFormula"
    right: "StlFormula"


@dataclass(frozen=True)
class Implies:
    left: "StlFormula"
    right: "StlFormula"


def _check_interval(lo: float, hi: float) -> None:
    if not 0.0 <= lo <= hi:
        raise ValueError(f"malformed temporal interval [{lo}, {hi}]")


@dataclass(frozen=True)
class Always:
    lo: float
    hi: float
    operand: "StlFormula"

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


@dataclass(frozen=True)
class Eventually:
    lo: float
    hi: float
    operand: "StlFormula"

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


@dataclass(frozen=True)
class Until:
    lo: float
    hi: float
    left: "StlFormula"
    right: "StlFormula"

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


StlFormula = Pred | Not | And | Or | Implies | Always | Eventually | Until


def horizon(formula: StlFormula) -> float:
    """Largest look-ahead in seconds the formula needs beyond its start time."""
    if isinstance(formula, Pred):
        return 0.0
    if isinstance(formula, Not):
        return horizon(formula.operand)
    if isinstance(formula, (And, Or, Implies)):
        return max(horizon(formula.left), horizon(formula.right))
    if isinstance(formula, (Always, Eventually)):
        return formula.hi + horizon(formula.operand)
    if isinstance(formula, Until):
        return formula.hi + max(horizon(formula.left), horizon(formula.right))
    raise TypeError(f"not an STL formula: {formula!r}")


# ---------------------------------------------------------------------------
# parser


class StlSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_TOKEN = re.compile(
    r"(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><=|>=|->|[-+*<>()\[\],])"
)

_KEYWORDS = {"not", "and", "or", "abs"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(text, i)
        if m is None:
            raise StlSyntaxError(f"unexpected character {text[i]!r}", i)
        kind = m.lastgroup
        tokens.append((kind, m.group(), i))
        i = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, val, at = self.peek()
        if val != value:
            raise StlSyntaxError(f"expected {value!r}, found {val or 'end of input'!r}", at)
        return self.next()

    def error(self, message: str):
        _, val, at = self.peek()
        raise StlSyntaxError(f"{message} (found {val or 'end of input'!r})", at)

    # formula levels ---------------------------------------------------

    def parse_formula(self) -> StlFormula:
        left = self.parse_or()
        if self.peek()[1] == "->":
            self.next()
            return Implies(left, self.parse_formula())
        return left

    def parse_or(self) -> StlFormula:
        node = self.parse_and()
        while self.peek()[1] == "or":
            self.next()
            node = Or(node, self.parse_and())
        return node

    def parse_and(self) -> StlFormula:
        node = self.parse_until()
        while self.peek()[1] == "and":
            self.next()
            node = And(node, self.parse_until())
        return node

    def parse_until(self) -> StlFormula:
        node = self.parse_unary()
        if self.peek()[1] == "U":
            self.next()
            lo, hi = self.parse_interval()
            node = Until(lo, hi, node, self.parse_unary())
        return node

    def parse_interval(self) -> tuple[float, float]:
        self.expect("[")
        lo = self.parse_number()
        self.expect(",")
        hi = self.parse_number()
        kind, _, at = self.peek()
        self.expect("]")
        if lo < 0 or lo > hi:
            raise StlSyntaxError(f"malformed interval [{lo}, {hi}]", at)
        return lo, hi

    def parse_number(self) -> float:
        sign = 1.0
        if self.peek()[1] == "-":
            self.next()
            sign = -1.0
        kind, val, at = self.peek()
        if kind != "num":
            raise StlSyntaxError(f"expected a number, found {val!r}", at)
        self.next()
        return sign * float(val)

    def parse_unary(self) -> StlFormula:
        kind, val, at = self.peek()
        if val == "not":
            self.next()
            return Not(self.parse_unary())
        if val in ("G", "F") and self.tokens[self.pos + 1][1] == "[":
            self.next()
            lo, hi = self.parse_interval()
            node = self.parse_unary()
            return Always(lo, hi, node) if val == "G" else Eventually(lo, hi, node)
        if val == "(":
            # Could open a parenthesized formula or the left expression of a
            # predicate; try the formula reading and fall back on the latter,
            # keeping whichever error got further into the input.
            saved = self.pos
            try:
                self.next()
                node = self.parse_formula()
                self.expect(")")
            except StlSyntaxError as formula_err:
                self.pos = saved
                try:
                    return self.parse_predicate()
                except StlSyntaxError as pred_err:
                    raise formula_err if formula_err.position >= pred_err.position else pred_err from None
            if self.peek()[1] in ("<=", "<", ">=", ">", "+", "-", "*"):
                self.pos = saved
                return self.parse_predicate()
            return node
        return self.parse_predicate()

    # predicates and expressions ----------------------------------------

    def parse_predicate(self) -> Pred:
        left = self.parse_expr()
        kind, val, at = self.peek()
        if val not in ("<=", "<", ">=", ">"):
            raise StlSyntaxError(f"expected a comparison operator, found {val or 'end of input'!r}", at)
        self.next()
        right = self.parse_expr()
        return Pred(left, val, right)

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            node = BinExpr(op, node, self.parse_term())
        return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while self.peek()[1] == "*":
            self.next()
            node = BinExpr("*", node, self.parse_factor())
        return node

    def parse_factor(self) -> Expr:
        kind, val, at = self.peek()
        if val == "-":
            self.next()
            return NegExpr(self.parse_factor())
        if kind == "num":
            self.next()
            return Const(float(val))
        if val == "abs":
            self.next()
            self.expect("(")
            inner = self.parse_expr()
            self.expect(")")
            return AbsExpr(inner)
        if kind == "name" and val not in _KEYWORDS:
            self.next()
            return Var(val)
        if val == "(":
            self.next()
            inner = self.parse_expr()
            self.expect(")")
            return inner
        raise StlSyntaxError(f"expected a value, found {val or 'end of input'!r}", at)


def parse_stl(text: str) -> StlFormula:
    """Parse the documented grammar; raises StlSyntaxError with a position."""
    parser = _Parser(text)
    node = parser.parse_formula()
    kind, val, at = parser.peek()
    if kind != "end":
        raise StlSyntaxError(f"trailing input {val!r}", at)
    return node


# ---------------------------------------------------------------------------
# pretty printer (parse(format_stl(f)) == f)


def _fmt_num(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _fmt_expr(expr: Expr) -> str:
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Const):
        return _fmt_num(expr.value)
    if isinstance(expr, NegExpr):
        return f"-{_fmt_expr_atom(expr.operand)}"
    if isinstance(expr, AbsExpr):
        return f"abs({_fmt_expr(expr.operand)})"
    if expr.op == "*":
        return f"{_fmt_expr_atom(expr.left)}*{_fmt_expr_atom(expr.right)}"
    return f"{_fmt_expr(expr.left)} {expr.op} {_fmt_expr_atom(expr.right)}"


def _fmt_expr_atom(expr: Expr) -> str:
    if isinstance(expr, BinExpr):
        return f"({_fmt_expr(expr)})"
    return _fmt_expr(expr)


def format_stl(formula: StlFormula) -> str:
    if isinstance(formula, Pred):
        return f"{_fmt_expr(formula.left)} {formula.op} {_fmt_expr(formula.right)}"
    if isinstance(formula, Not):
        return f"not ({format_stl(formula.operand)})"
    if isinstance(formula, And):
        return f"({format_stl(formula.left)}) and ({format_stl(formula.right)})"
    if isinstance(formula, Or):
        return f"({format_stl(formula.left)}) or ({format_stl(formula.right)})"
    if isinstance(formula, Implies):
        return f"({format_stl(formula.left)}) -> ({format_stl(formula.right)})"
    if isinstance(formula, Always):
        return f"G[{_fmt_num(formula.lo)},{_fmt_num(formula.hi)}]({format_stl(formula.operand)})"
    if isinstance(formula, Eventually):
        return f"F[{_fmt_num(formula.lo)},{_fmt_num(formula.hi)}]({format_stl(formula.operand)})"
    if isinstance(formula, Until):
        return (
            f"({format_stl(formula.left)}) U[{_fmt_num(formula.lo)},{_fmt_num(formula.hi)}]"
            f" ({format_stl(formula.right)})"
        )
    raise TypeError(f"not an STL formula: {formula!r}")


# ---------------------------------------------------------------------------
# robust semantics


def _offsets(lo: float, hi: float, dt: float) -> tuple[int, int]:
    """Grid offsets [j0, j1] covered by the closed interval [lo, hi]."""
    j0 = int(math.ceil((lo - _SNAP) / dt))
    j1 = int(math.floor((hi + _SNAP) / dt))
    return max(j0, 0), j1


def _window_extreme(values: np.ndarray, j0: int, j1: int, kind: str) -> np.ndarray:
    """out[i] = min/max of values[i+j0 .. i+j1], clipped at the trace end.

    Windows that fall entirely past the end yield +inf (min) / -inf (max).
    """
    T = len(values)
    if j1 < j0:
        fill = np.inf if kind == "min" else -np.inf
        return np.full(T, fill)
    width = j1 - j0 + 1
    pad_value = np.inf if kind == "min" else -np.inf
    ext = np.concatenate([values, np.full(j0 + width, pad_value)])
    windows = np.lib.stride_tricks.sliding_window_view(ext, width)
    agg = windows.min(axis=1) if kind == "min" else windows.max(axis=1)
    return agg[j0 : j0 + T]


def _rob_array(formula: StlFormula, trace: Trace) -> np.ndarray:
    """Robustness at every start index, windows clipped at the trace end."""
    if isinstance(formula, Pred):
        left = eval_expr(formula.left, trace)
        right = eval_expr(formula.right, trace)
        if formula.op in (">=", ">"):
            return left - right
        return right - left
    if isinstance(formula, Not):
        return -_rob_array(formula.operand, trace)
    if isinstance(formula, And):
        return np.minimum(_rob_array(formula.left, trace), _rob_array(formula.right, trace))
    if isinstance(formula, Or):
        return np.maximum(_rob_array(formula.left, trace), _rob_array(formula.right, trace))
    if isinstance(formula, Implies):
        return np.maximum(-_rob_array(formula.left, trace), _rob_array(formula.right, trace))
    if isinstance(formula, (Always, Eventually)):
        inner = _rob_array(formula.operand, trace)
        j0, j1 = _offsets(formula.lo, formula.hi, trace.dt)
        kind = "min" if isinstance(formula, Always) else "max"
        return _window_extreme(inner, j0, j1, kind)
    if isinstance(formula, Until):
        left = _rob_array(formula.left, trace)
        right = _rob_array(formula.right, trace)
        j0, j1 = _offsets(formula.lo, formula.hi, trace.dt)
        T = len(trace)
        out = np.full(T, -np.inf)
        for i in range(T):
            prefix = np.inf  # min of left strictly before the witness point
            best = -np.inf
            top = min(j1, T - 1 - i)
            for j in range(0, top + 1):
                if j >= 1:
                    prefix = min(prefix, left[i + j - 1])
                if j >= j0:
                    best = max(best, min(right[i + j], prefix))
            out[i] = best
        return out
    raise TypeError(f"not an STL formula: {formula!r}")


def robustness_per_step(trace: Trace, formula: StlFormula) -> np.ndarray:
    """Robustness at every grid index, temporal windows falling back to
    the largest horizon the trace still covers."""
    return _rob_array(formula, trace)


def labeling_robustness(trace: Trace, formula: StlFormula) -> np.ndarray:
    """Per-state robustness used to label abstract states.

    For the usual safety shape G[a,b](body) this is the body's
    robustness at each step, so a state is scored by how the system is
    doing right there, not by whether the rest of the run eventually
    fails somewhere else; suffix scoring smears one late violation over
    every earlier state and makes labels spatially meaningless. For
    formulas that are not top-level always-patterns it falls back to
    the clipped whole-formula robustness at each start index.
    """
    if isinstance(formula, Always):
        return _rob_array(formula.operand, trace)
    return _rob_array(formula, trace)


def robustness(trace: Trace, formula: StlFormula, t0: float = 0.0) -> float:
    """Robust satisfaction degree of the formula at start time t0."""
    need = t0 + horizon(formula)
    if need > trace.end_time + _SNAP:
        raise ValueError(
            f"trace too short for formula horizon: needs {need}s, trace covers {trace.end_time}s"
        )
    if t0 < -_SNAP:
        raise ValueError(f"start time {t0} before trace start")
    i0 = min(int(math.floor(t0 / trace.dt + 0.5)), len(trace) - 1)
    return float(_rob_array(formula, trace)[i0])


def satisfied(trace: Trace, formula: StlFormula) -> bool:
    """Boolean verdict at time 0; zero robustness counts as satisfied."""
    return robustness(trace, formula, 0.0) >= 0.0
