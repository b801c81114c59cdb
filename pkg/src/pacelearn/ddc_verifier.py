"""Discrete duration calculus over dense symbol traces, pacing requirements and lockstep verification.

Time is one unit per tick. An interval ``[b, e]`` with ``0 <= b <= e <= n``
ranges over tick indices of a trace of length ``n``; index ``n`` (the point
just past the last tick) reads as an empty symbol.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass
from typing import Callable, Sequence

from .heart_model import ALL_MODES, Heart, HeartMode, HeartParams
from .loop import Controller, PacingLoop
from .trace_model import Symbol, TimedTrace, TimingConfig, densify

COMPARATORS: dict[str, Callable[[int, int], bool]] = {
    "<": operator.lt, "<=": operator.le, "=": operator.eq, ">=": operator.ge, ">": operator.gt,
}


# -- state propositions -------------------------------------------------------------

@dataclass(frozen=True)
class PTrue:
    pass


@dataclass(frozen=True)
class PFalse:
    pass


@dataclass(frozen=True)
class Var:
    """Holds at an index whose symbol is ``sym``."""
    sym: Symbol


@dataclass(frozen=True)
class PAnd:
    left: "Prop"
    right: "Prop"


@dataclass(frozen=True)
class PNot:
    arg: "Prop"


Prop = PTrue | PFalse | Var | PAnd | PNot


def p_or(a: Prop, b: Prop) -> Prop:
    return PNot(PAnd(PNot(a), PNot(b)))


def any_of(*syms: Symbol) -> Prop:
    prop: Prop = PFalse()
    for s in syms:
        prop = Var(s) if isinstance(prop, PFalse) else p_or(prop, Var(s))
    return prop


def eval_prop(p: Prop, symbols: Sequence[Symbol], i: int) -> bool:
    if isinstance(p, PTrue):
        return True
    if isinstance(p, PFalse):
        return False
    if isinstance(p, Var):
        sym = symbols[i] if i < len(symbols) else Symbol.NONE
        return sym is p.sym
    if isinstance(p, PAnd):
        return eval_prop(p.left, symbols, i) and eval_prop(p.right, symbols, i)
    if isinstance(p, PNot):
        return not eval_prop(p.arg, symbols, i)
    raise TypeError(f"not a proposition: {p!r}")


# -- interval formulas -----------------------------------------------------------------

@dataclass(frozen=True)
class Range:
    """Non-point interval whose interior ticks all satisfy ``prop``."""
    prop: Prop


@dataclass(frozen=True)
class Point:
    prop: Prop


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class Chop:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Sum:
    """Number of ticks ``i`` in ``[b, e)`` satisfying ``prop``, compared with ``c``."""
    prop: Prop
    op: str
    c: int

    def __post_init__(self):
        _check_bound(self.op, self.c)


@dataclass(frozen=True)
class Len:
    op: str
    c: int

    def __post_init__(self):
        _check_bound(self.op, self.c)


Formula = Range | Point | And | Not | Chop | Sum | Len


def _check_bound(op: str, c: int) -> None:
    if op not in COMPARATORS:
        raise ValueError(f"unknown comparator {op!r}")
    if not isinstance(c, int) or c < 0:
        raise ValueError(f"bound must be a non-negative integer, got {c!r}")


TRUE: Formula = Len(">=", 0)


def f_or(a: Formula, b: Formula) -> Formula:
    return Not(And(Not(a), Not(b)))


def implies(a: Formula, b: Formula) -> Formula:
    return Not(And(a, Not(b)))


def eventually(d: Formula) -> Formula:
    return Chop(TRUE, Chop(d, TRUE))


def globally(d: Formula) -> Formula:
    return Not(eventually(Not(d)))


class Evaluator:
    """Memoised satisfaction checker for one trace."""

    def __init__(self, symbols: Sequence[Symbol]):
        self.symbols = list(symbols)
        self.n = len(self.symbols)
        self._memo: dict[tuple[int, int, int], bool] = {}
        self._prop_prefix: dict[Prop, list[int]] = {}
        self._keep: list[Formula] = []  # keeps memo keys (ids) alive

    def _prefix(self, p: Prop) -> list[int]:
        pre = self._prop_prefix.get(p)
        if pre is None:
            pre = [0]
            for i in range(self.n + 1):
                pre.append(pre[-1] + eval_prop(p, self.symbols, i))
            self._prop_prefix[p] = pre
        return pre

    def holds(self, f: Formula, b: int, e: int) -> bool:
        if not 0 <= b <= e <= self.n:
            raise ValueError(f"malformed interval [{b}, {e}] for trace of length {self.n}")
        return self._eval(f, b, e)

    def _eval(self, f: Formula, b: int, e: int) -> bool:
        key = (id(f), b, e)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        if isinstance(f, Range):
            pre = self._prefix(f.prop)
            res = b < e and pre[e] - pre[b + 1] == e - b - 1
        elif isinstance(f, Point):
            res = b == e and eval_prop(f.prop, self.symbols, b)
        elif isinstance(f, And):
            res = self._eval(f.left, b, e) and self._eval(f.right, b, e)
        elif isinstance(f, Not):
            res = not self._eval(f.arg, b, e)
        elif isinstance(f, Chop):
            res = any(self._eval(f.left, b, z) and self._eval(f.right, z, e) for z in range(b, e + 1))
        elif isinstance(f, Sum):
            pre = self._prefix(f.prop)
            res = COMPARATORS[f.op](pre[e] - pre[b], f.c)
        elif isinstance(f, Len):
            res = COMPARATORS[f.op](e - b, f.c)
        else:
            raise TypeError(f"not a formula: {f!r}")
        self._keep.append(f)
        self._memo[key] = res
        return res


def _symbols_of(trace: TimedTrace | Sequence[Symbol]) -> list[Symbol]:
    if isinstance(trace, TimedTrace):
        return densify(trace, trace.length)
    return list(trace)


def eval_ddc(trace: TimedTrace | Sequence[Symbol], b: int, e: int, formula: Formula) -> bool:
    return Evaluator(_symbols_of(trace)).holds(formula, b, e)


# -- pacing requirements -----------------------------------------------------------------

ATRIAL = any_of(Symbol.AP, Symbol.AS)
VENTRICULAR = any_of(Symbol.VP, Symbol.VS)


def consecutive(prop: Prop, last: Prop | None = None) -> Formula:
    """Interval from a ``prop`` tick to the next ``prop`` tick (which must satisfy ``last``)."""
    end = Point(last if last is not None else prop)
    return Chop(Point(prop), Chop(Range(PNot(prop)), end))


def lri_formula(config: TimingConfig) -> Formula:
    """No two consecutive atrial events further apart than the lower rate interval."""
    return globally(implies(consecutive(ATRIAL), Len("<=", config.lri_ticks)))


def vri_formula(config: TimingConfig) -> Formula:
    """Ventricular analogue; the bound allows for one AV delay on top of the LRI."""
    return globally(implies(consecutive(VENTRICULAR), Len("<=", config.lri_ticks + config.avi_ticks)))


def url_formula(config: TimingConfig) -> Formula:
    """A ventricular pace never follows the previous ventricular event by less than the URL."""
    return globally(implies(consecutive(VENTRICULAR, Var(Symbol.VP)), Len(">=", config.url_ticks)))


@dataclass(frozen=True)
class Violation:
    requirement: str
    begin: int
    end: int
    length: int


def _event_ticks(symbols: Sequence[Symbol], syms: tuple[Symbol, ...]) -> list[int]:
    return [i for i, s in enumerate(symbols) if s in syms]


def check_pacing_requirements(trace: TimedTrace | Sequence[Symbol], config: TimingConfig) -> list[Violation]:
    """Intervals anchored at consecutive chamber events that break a rate requirement.

    Checked: atrial events at most ``lri`` apart (``lri``), ventricular events
    at most ``lri + avi`` apart (``vri``), and a VP at least ``url`` after the
    previous ventricular event (``url``). A trailing gap after the last event
    of a chamber that has already outgrown its bound is reported too.
    """
    symbols = _symbols_of(trace)
    ev = Evaluator(symbols)
    n = len(symbols)
    out: list[Violation] = []
    rules = (
        ("lri", (Symbol.AP, Symbol.AS), Len("<=", config.lri_ticks)),
        ("vri", (Symbol.VP, Symbol.VS), Len("<=", config.lri_ticks + config.avi_ticks)),
    )
    for name, syms, bound in rules:
        ticks = _event_ticks(symbols, syms)
        for a, b in zip(ticks, ticks[1:]):
            if not ev.holds(bound, a, b):
                out.append(Violation(name, a, b, b - a))
        if ticks and n - 1 > ticks[-1] and not ev.holds(Len("<", bound.c), ticks[-1], n - 1):
            out.append(Violation(name, ticks[-1], n - 1, n - 1 - ticks[-1]))
    url = Len(">=", config.url_ticks)
    vent = _event_ticks(symbols, (Symbol.VP, Symbol.VS))
    for a, b in zip(vent, vent[1:]):
        if symbols[b] is Symbol.VP and not ev.holds(url, a, b):
            out.append(Violation("url", a, b, b - a))
    out.sort(key=lambda v: (v.begin, v.end, v.requirement))
    return out


# -- lockstep verification ----------------------------------------------------------------

@dataclass(frozen=True)
class VerifyReport:
    mode: str
    steps: int
    ap_count: int
    vp_count: int
    incorrect_count: int
    first_violation: tuple[int, str, str] | None = None  # (tick, expected, actual)
    requirement_violations: int = 0

    @property
    def passed(self) -> bool:
        return self.incorrect_count == 0 and self.requirement_violations == 0


def statistical_verify(controller: Controller, mode: HeartMode | str, steps: int, seed: int,
                       config: TimingConfig | None = None, params: HeartParams | None = None) -> VerifyReport:
    """Run ``controller`` against a heart and compare each action with the reference's.

    Both see the same device state every tick, so any deviation, whether a
    wrong chamber, a wrong time or a missing pace, counts as incorrect.
    """
    mode = HeartMode.parse(mode)
    config = config or TimingConfig()
    loop = PacingLoop(Heart(mode, params or HeartParams(), seed), config, controller)
    ap = vp = bad = 0
    first = None
    symbols = []
    for _ in range(steps):
        t = loop.step()
        symbols.append(t.symbol)
        ap += t.action is Symbol.AP
        vp += t.action is Symbol.VP
        if t.action is not t.reference_action:
            bad += 1
            if first is None:
                first = (t.tick, t.reference_action.value, t.action.value)
    violations = check_pacing_requirements(symbols, config)
    return VerifyReport(mode.value, steps, ap, vp, bad, first, len(violations))


def verify_all_modes(controller: Controller, steps: int, seed: int, config: TimingConfig | None = None,
                     params: HeartParams | None = None, modes: Sequence[HeartMode] = ALL_MODES) -> list[VerifyReport]:
    return [statistical_verify(controller, m, steps, seed, config, params) for m in modes]


# -- prefix-syntax parser ---------------------------------------------------------------------

def _tokenize(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_formula(text: str) -> Formula:
    """Parse a parenthesised prefix formula such as ``(chop (range (sym VP)) (len <= 40))``."""
    tokens = _tokenize(text)
    if not tokens:
        raise ValueError("empty formula")
    pos, tree = _read(tokens, 0)
    if pos != len(tokens):
        raise ValueError(f"unexpected trailing tokens: {' '.join(tokens[pos:])}")
    return _to_formula(tree)


def _read(tokens: list[str], pos: int):
    tok = tokens[pos]
    if tok == "(":
        items = []
        pos += 1
        while pos < len(tokens) and tokens[pos] != ")":
            pos, item = _read(tokens, pos)
            items.append(item)
        if pos >= len(tokens):
            raise ValueError("unbalanced parentheses")
        return pos + 1, items
    if tok == ")":
        raise ValueError("unexpected ')'")
    return pos + 1, tok


def _symbol(name: str) -> Symbol:
    try:
        return Symbol(name)
    except ValueError:
        raise ValueError(f"unknown symbol {name!r}") from None


def _to_prop(tree) -> Prop:
    if isinstance(tree, str):
        if tree == "true":
            return PTrue()
        if tree == "false":
            return PFalse()
        return Var(_symbol(tree))
    if not tree:
        raise ValueError("empty proposition")
    head, args = tree[0], tree[1:]
    if head == "sym" and len(args) == 1:
        return Var(_symbol(args[0]))
    if head == "not" and len(args) == 1:
        return PNot(_to_prop(args[0]))
    if head in ("and", "or") and len(args) >= 2:
        props = [_to_prop(a) for a in args]
        acc = props[0]
        for p in props[1:]:
            acc = PAnd(acc, p) if head == "and" else p_or(acc, p)
        return acc
    raise ValueError(f"malformed proposition: {tree!r}")


def _bound(op: str, c: str) -> tuple[str, int]:
    if op not in COMPARATORS:
        raise ValueError(f"unknown comparator {op!r}")
    return op, int(c)


def _to_formula(tree) -> Formula:
    if tree == "true":
        return TRUE
    if tree == "false":
        return Not(TRUE)
    if isinstance(tree, str) or not tree:
        raise ValueError(f"malformed formula: {tree!r}")
    head, args = tree[0], tree[1:]
    if head in ("range", "point") and len(args) == 1:
        return (Range if head == "range" else Point)(_to_prop(args[0]))
    if head == "len" and len(args) == 2:
        return Len(*_bound(*args))
    if head == "sum" and len(args) == 3:
        return Sum(_to_prop(args[0]), *_bound(args[1], args[2]))
    if head == "not" and len(args) == 1:
        return Not(_to_formula(args[0]))
    if head in ("eventually", "globally") and len(args) == 1:
        return (eventually if head == "eventually" else globally)(_to_formula(args[0]))
    if head == "implies" and len(args) == 2:
        return implies(_to_formula(args[0]), _to_formula(args[1]))
    if head in ("and", "or", "chop") and len(args) >= 2:
        parts = [_to_formula(a) for a in args]
        combine = {"and": And, "or": f_or, "chop": Chop}[head]
        acc = parts[-1]
        for p in reversed(parts[:-1]):
            acc = combine(p, acc)
        return acc
    raise ValueError(f"malformed formula: {tree!r}")
