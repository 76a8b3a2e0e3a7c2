"""Probabilistic model checking of PCTL queries on an AbstractMdp.

State formulas: ``true``, quoted atomic propositions, ``&``, ``!``,
parentheses, and the probability operator. Path formulas: next,
unbounded always/eventually, bounded eventually, and (bounded) until.

Concrete grammar::

    state := conj
    conj  := atom ( '&' atom )*
    atom  := 'true' | '"' name '"' | '!' atom | '(' state ')'
           | 'P' cmp number '[' path ']'
    cmp   := '<' | '<=' | '>' | '>='
    path  := 'X' state
           | 'G' state
           | 'F' ('<=' int)? state
           | state 'U' ('<=' int)? state

Canonical safety queries::

    P>0.8 [ F<=10 "rob=-1" ]
    P>0.5 [ X "rob=-1" ]

The probability operator computes the extremal path probability over
schedulers; the default is MAX (worst case for unsafe-reachability
queries), with MIN available via the ``semantics`` argument. Bounded
operators run k sweeps of value iteration; unbounded ones iterate to a
sup-norm below 1e-9 with a 1e5 iteration cap. States with no outgoing
choice are treated as absorbing: they contribute probability 0 unless
they already satisfy the target. Unbounded always goes through the
dual: Pmax[G phi] = 1 - Pmin[F !phi] (and with MAX/MIN swapped).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .abstraction import AbstractMdp, StateId

MAX_ITERATIONS = 100_000
CONVERGENCE_TOL = 1e-9


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class TrueF:
    pass


@dataclass(frozen=True)
class Ap:
    name: str


@dataclass(frozen=True)
class NotF:
    operand: "PctlFormula"


@dataclass(frozen=True)
class AndF:
    left: "PctlFormula"
    right: "PctlFormula"


@dataclass(frozen=True)
class ProbF:
    op: str  # '<', '<=', '>', '>='
    bound: float
    path: "PathFormula"


@dataclass(frozen=True)
class Next:
    operand: "PctlFormula"


@dataclass(frozen=True)
class Globally:
    operand: "PctlFormula"


@dataclass(frozen=True)
class Finally:
    operand: "PctlFormula"
    k: int | None = None  # None = unbounded


@dataclass(frozen=True)
class UntilF:
    left: "PctlFormula"
    right: "PctlFormula"
    k: int | None = None


PctlFormula = TrueF | Ap | NotF | AndF | ProbF
PathFormula = Next | Globally | Finally | UntilF


class PctlSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_TOKEN = re.compile(
    r"(?P<str>\"[^\"]*\")"
    r"|(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><=|>=|[!&<>()\[\]])"
)


def _tokenize(text: str):
    tokens = []
    i = 0
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(text, i)
        if m is None:
            raise PctlSyntaxError(f"unexpected character {text[i]!r}", i)
        tokens.append((m.lastgroup, m.group(), i))
        i = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
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
            raise PctlSyntaxError(f"expected {value!r}, found {val or 'end of input'!r}", at)
        return self.next()

    def parse_state(self) -> PctlFormula:
        node = self.parse_atom()
        while self.peek()[1] == "&":
            self.next()
            node = AndF(node, self.parse_atom())
        return node

    def parse_atom(self) -> PctlFormula:
        kind, val, at = self.peek()
        if val == "true":
            self.next()
            return TrueF()
        if kind == "str":
            self.next()
            return Ap(val[1:-1])
        if val == "!":
            self.next()
            return NotF(self.parse_atom())
        if val == "(":
            self.next()
            node = self.parse_state()
            self.expect(")")
            return node
        if val == "P":
            self.next()
            kind, op, at = self.peek()
            if op not in ("<", "<=", ">", ">="):
                raise PctlSyntaxError(f"expected a comparison after P, found {op!r}", at)
            self.next()
            kind, num, at = self.peek()
            if kind != "num":
                raise PctlSyntaxError(f"expected a probability bound, found {num!r}", at)
            self.next()
            bound = float(num)
            if not 0.0 <= bound <= 1.0:
                raise PctlSyntaxError(f"probability bound {bound} outside [0, 1]", at)
            self.expect("[")
            path = self.parse_path()
            self.expect("]")
            return ProbF(op, bound, path)
        raise PctlSyntaxError(f"expected a state formula, found {val or 'end of input'!r}", at)

    def parse_bound(self) -> int | None:
        if self.peek()[1] == "<=":
            self.next()
            kind, num, at = self.peek()
            if kind != "num" or "." in num or "e" in num.lower():
                raise PctlSyntaxError(f"expected an integer step bound, found {num!r}", at)
            self.next()
            return int(num)
        return None

    def parse_path(self) -> PathFormula:
        kind, val, at = self.peek()
        if val == "X":
            self.next()
            return Next(self.parse_state())
        if val == "G":
            self.next()
            return Globally(self.parse_state())
        if val == "F":
            self.next()
            k = self.parse_bound()
            return Finally(self.parse_state(), k)
        left = self.parse_state()
        self.expect("U")
        k = self.parse_bound()
        right = self.parse_state()
        return UntilF(left, right, k)


def parse_pctl(text: str) -> PctlFormula:
    parser = _Parser(text)
    node = parser.parse_state()
    kind, val, at = parser.peek()
    if kind != "end":
        raise PctlSyntaxError(f"trailing input {val!r}", at)
    return node


def format_pctl(formula) -> str:
    if isinstance(formula, TrueF):
        return "true"
    if isinstance(formula, Ap):
        return f'"{formula.name}"'
    if isinstance(formula, NotF):
        return f"!({format_pctl(formula.operand)})"
    if isinstance(formula, AndF):
        return f"({format_pctl(formula.left)}) & ({format_pctl(formula.right)})"
    if isinstance(formula, ProbF):
        return f"P{formula.op}{formula.bound:g} [ {format_pctl(formula.path)} ]"
    if isinstance(formula, Next):
        return f"X ({format_pctl(formula.operand)})"
    if isinstance(formula, Globally):
        return f"G ({format_pctl(formula.operand)})"
    if isinstance(formula, Finally):
        bound = f"<={formula.k}" if formula.k is not None else ""
        return f"F{bound} ({format_pctl(formula.operand)})"
    if isinstance(formula, UntilF):
        bound = f"<={formula.k}" if formula.k is not None else ""
        return f"({format_pctl(formula.left)}) U{bound} ({format_pctl(formula.right)})"
    raise TypeError(f"not a PCTL formula: {formula!r}")


# ---------------------------------------------------------------------------
# engine


@dataclass(frozen=True)
class Verdict:
    holds: bool
    probability: float | None  # set when the formula is a top-level P operator
    semantics: str  # "MAX" or "MIN"


@dataclass(frozen=True)
class ReachResult:
    probs: dict[StateId, float]
    converged: bool


class _Indexed:
    """Flat transition arrays for vectorized value-iteration sweeps."""

    def __init__(self, model: AbstractMdp):
        self.order: list[StateId] = sorted(model.states)
        self.index = {sid: i for i, sid in enumerate(self.order)}
        self.n = len(self.order)
        by_state: dict[StateId, list[int]] = {}
        for (s, act) in model.transitions:
            by_state.setdefault(s, []).append(act)
        src_g, dst, prob = [], [], []
        group_src = []
        group = 0
        for sid in self.order:
            for act in sorted(by_state.get(sid, ())):
                for d, p in sorted(model.transitions[(sid, act)].items()):
                    src_g.append(group)
                    dst.append(self.index[d])
                    prob.append(p)
                group_src.append(self.index[sid])
                group += 1
        self.tr_group = np.array(src_g, dtype=int)
        self.tr_dst = np.array(dst, dtype=int)
        self.tr_prob = np.array(prob, dtype=float)
        self.group_src = np.array(group_src, dtype=int)
        self.n_groups = group
        self.has_choice = np.zeros(self.n, dtype=bool)
        self.has_choice[self.group_src] = True


def _indexed(model: AbstractMdp) -> _Indexed:
    cached = model.caches.get("indexed")
    if cached is None:
        cached = model.caches["indexed"] = _Indexed(model)
    return cached


def _sweep(ix: _Indexed, x: np.ndarray, semantics: str) -> np.ndarray:
    """One Bellman sweep: optimal one-step expectation per state; states
    with no choice keep probability 0 (absorbing convention)."""
    if ix.n_groups == 0:
        return np.zeros(ix.n)
    group_vals = np.zeros(ix.n_groups)
    np.add.at(group_vals, ix.tr_group, ix.tr_prob * x[ix.tr_dst])
    out = np.zeros(ix.n)
    if semantics == "MAX":
        per_state = np.full(ix.n, -np.inf)
        np.maximum.at(per_state, ix.group_src, group_vals)
    else:
        per_state = np.full(ix.n, np.inf)
        np.minimum.at(per_state, ix.group_src, group_vals)
    out[ix.has_choice] = per_state[ix.has_choice]
    return out


def _until_probs(model: AbstractMdp, hold: np.ndarray, target: np.ndarray,
                 k: int | None, semantics: str) -> tuple[np.ndarray, bool]:
    """Extremal probability of (hold U target), optionally step-bounded."""
    ix = _indexed(model)
    x = np.where(target, 1.0, 0.0)
    frozen = target | ~hold  # value fixed: 1 in target, 0 where hold fails
    if k is not None:
        for _ in range(k):
            x_new = _sweep(ix, x, semantics)
            x_new[frozen] = np.where(target[frozen], 1.0, 0.0)
            x = x_new
        return x, True
    for _ in range(MAX_ITERATIONS):
        x_new = _sweep(ix, x, semantics)
        x_new[frozen] = np.where(target[frozen], 1.0, 0.0)
        if np.max(np.abs(x_new - x)) < CONVERGENCE_TOL:
            return x_new, True
        x = x_new
    return x, False


def _sat_mask(model: AbstractMdp, formula: PctlFormula, semantics: str) -> np.ndarray:
    ix = _indexed(model)
    if isinstance(formula, TrueF):
        return np.ones(ix.n, dtype=bool)
    if isinstance(formula, Ap):
        if formula.name not in model.atomic_propositions:
            raise ValueError(
                f"unknown atomic proposition {formula.name!r}; model has {model.atomic_propositions}"
            )
        return np.array([model.label_name(sid) == formula.name for sid in ix.order], dtype=bool)
    if isinstance(formula, NotF):
        return ~_sat_mask(model, formula.operand, semantics)
    if isinstance(formula, AndF):
        return _sat_mask(model, formula.left, semantics) & _sat_mask(model, formula.right, semantics)
    if isinstance(formula, ProbF):
        probs = _path_probs(model, formula.path, semantics)
        cmp = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}[formula.op]
        return cmp(probs, formula.bound)
    raise TypeError(f"not a PCTL state formula: {formula!r}")


def _path_probs(model: AbstractMdp, path: PathFormula, semantics: str) -> np.ndarray:
    ix = _indexed(model)
    if isinstance(path, Next):
        sat = _sat_mask(model, path.operand, semantics)
        return _sweep(ix, np.where(sat, 1.0, 0.0), semantics)
    if isinstance(path, Finally):
        target = _sat_mask(model, path.operand, semantics)
        hold = np.ones(ix.n, dtype=bool)
        probs, converged = _until_probs(model, hold, target, path.k, semantics)
        if not converged:
            raise RuntimeError("value iteration hit the iteration cap")
        return probs
    if isinstance(path, UntilF):
        hold = _sat_mask(model, path.left, semantics)
        target = _sat_mask(model, path.right, semantics)
        probs, converged = _until_probs(model, hold, target, path.k, semantics)
        if not converged:
            raise RuntimeError("value iteration hit the iteration cap")
        return probs
    if isinstance(path, Globally):
        # Pmax[G phi] = 1 - Pmin[F !phi] and dually for MIN.
        dual = "MIN" if semantics == "MAX" else "MAX"
        inner = _path_probs(model, Finally(NotF(path.operand)), dual)
        return 1.0 - inner
    raise TypeError(f"not a PCTL path formula: {path!r}")


def reach_prob(model: AbstractMdp, target: set[StateId], k: int | None = None,
               semantics: str = "MAX") -> ReachResult:
    """Extremal probability, per state, of reaching the target set
    (within k steps when bounded)."""
    ix = _indexed(model)
    unknown = set(target) - set(model.states)
    if unknown:
        raise ValueError(f"target states not in the model: {sorted(unknown)}")
    mask = np.array([sid in target for sid in ix.order], dtype=bool)
    probs, converged = _until_probs(model, np.ones(ix.n, dtype=bool), mask, k, semantics)
    return ReachResult(
        probs={sid: float(p) for sid, p in zip(ix.order, probs)},
        converged=converged,
    )


def check(model: AbstractMdp, state: StateId, formula: PctlFormula,
          semantics: str = "MAX") -> Verdict:
    """Evaluate a PCTL state formula at one state of the model."""
    if state not in model.states:
        raise ValueError(f"state {state!r} is not in the model")
    return check_all(model, formula, semantics)[state]


def check_all(model: AbstractMdp, formula: PctlFormula, semantics: str = "MAX") -> dict[StateId, Verdict]:
    """Verdicts for every state in one pass (memoized on the model)."""
    if semantics not in ("MAX", "MIN"):
        raise ValueError(f"semantics must be MAX or MIN, got {semantics!r}")
    key = ("verdicts", format_pctl(formula), semantics)
    cached = model.caches.get(key)
    if cached is not None:
        return cached
    ix = _indexed(model)
    if isinstance(formula, ProbF):
        probs = _path_probs(model, formula.path, semantics)
        cmp = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}[formula.op]
        sat = cmp(probs, formula.bound)
    else:
        probs = None
        sat = _sat_mask(model, formula, semantics)
    verdicts = {}
    for i, sid in enumerate(ix.order):
        p = float(probs[i]) if probs is not None else None
        verdicts[sid] = Verdict(holds=bool(sat[i]), probability=p, semantics=semantics)
    model.caches[key] = verdicts
    return verdicts
