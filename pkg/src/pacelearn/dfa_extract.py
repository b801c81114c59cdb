"""Controller extraction as a labelled transition graph over device state bytes."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .heart_model import ALL_MODES, Heart, HeartMode, HeartParams
from .loop import Controller, PacingLoop, reference_controller
from .ref_pacemaker import decode_state, format_byte
from .trace_model import Symbol, TimingConfig

WAIT = "-"

Edge = tuple[int, str, int]


@dataclass
class ControllerDfa:
    """States are state bytes; an edge ``(s, label, s')`` records one observed tick.

    The label is the controller's pace when it paced, otherwise the sense
    the device accepted on the following tick, otherwise ``-``.
    """
    states: set[int] = field(default_factory=set)
    edges: set[Edge] = field(default_factory=set)
    initial: int | None = None
    action_counts: dict[int, Counter] = field(default_factory=lambda: defaultdict(Counter))
    ticks: int = 0

    def add(self, src: int, label: str, dst: int) -> None:
        self.states.update((src, dst))
        self.edges.add((src, label, dst))

    def conflicts(self) -> dict[int, dict[str, int]]:
        """States where the controller chose more than one action, with counts."""
        return {s: dict(sorted(c.items())) for s, c in sorted(self.action_counts.items()) if len(c) > 1}

    @property
    def deterministic(self) -> bool:
        return not self.conflicts()

    def action_of(self, state: int) -> str | None:
        c = self.action_counts.get(state)
        if not c:
            return None
        return c.most_common(1)[0][0]

    def out_labels(self, state: int) -> set[str]:
        return {lab for s, lab, _ in self.edges if s == state}

    def merge(self, other: "ControllerDfa") -> None:
        self.states |= other.states
        self.edges |= other.edges
        for s, c in other.action_counts.items():
            self.action_counts[s].update(c)
        self.ticks += other.ticks
        if self.initial is None:
            self.initial = other.initial


def trace_dfa(controller: Controller, mode: HeartMode | str, horizon: int, seed: int,
              config: TimingConfig | None = None, params: HeartParams | None = None) -> ControllerDfa:
    """Transitions visited in one closed-loop run."""
    loop = PacingLoop(Heart(mode, params or HeartParams(), seed), config or TimingConfig(), controller)
    dfa = ControllerDfa()
    ticks = loop.run(horizon + 1)
    dfa.initial = ticks[0].byte
    for cur, nxt in zip(ticks, ticks[1:]):
        dfa.action_counts[cur.byte][cur.action.value] += 1
        if cur.action.is_pace:
            label = cur.action.value
        elif nxt.accepted:
            label = "+".join(s.value for s in nxt.accepted)
        else:
            label = WAIT
        dfa.add(cur.byte, label, nxt.byte)
    dfa.ticks = horizon
    return dfa


def extract(controller: Controller | None = None, horizon: int = 20000, seeds: Sequence[int] = (0, 1, 2),
            config: TimingConfig | None = None, params: HeartParams | None = None,
            modes: Sequence[HeartMode] = ALL_MODES) -> ControllerDfa:
    """Union of the graphs visited across heart modes and seeds (reference automaton by default)."""
    controller = controller or reference_controller
    dfa = ControllerDfa()
    for mode in modes:
        for seed in seeds:
            dfa.merge(trace_dfa(controller, mode, horizon, seed, config, params))
    return dfa


def to_dot(dfa: ControllerDfa, name: str = "controller") -> str:
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=circle];"]
    if dfa.initial is not None:
        lines.append(f'  start [shape=point]; start -> "{format_byte(dfa.initial)}";')
    for s in sorted(dfa.states):
        lines.append(f'  "{format_byte(s)}";')
    for src, label, dst in sorted(dfa.edges):
        lines.append(f'  "{format_byte(src)}" -> "{format_byte(dst)}" [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_json(dfa: ControllerDfa) -> str:
    obj = {
        "initial": None if dfa.initial is None else format_byte(dfa.initial),
        "states": [format_byte(s) for s in sorted(dfa.states)],
        "edges": [[format_byte(a), lab, format_byte(b)] for a, lab, b in sorted(dfa.edges)],
    }
    return json.dumps(obj, indent=1)


def from_json(text: str) -> ControllerDfa:
    obj = json.loads(text)
    dfa = ControllerDfa()
    dfa.initial = None if obj.get("initial") is None else int(obj["initial"], 2)
    dfa.states = {int(s, 2) for s in obj["states"]}
    dfa.edges = {(int(a, 2), lab, int(b, 2)) for a, lab, b in obj["edges"]}
    return dfa


@dataclass(frozen=True)
class EquivalenceReport:
    only_in_a_states: tuple[int, ...]
    only_in_b_states: tuple[int, ...]
    only_in_a_edges: tuple[Edge, ...]
    only_in_b_edges: tuple[Edge, ...]

    @property
    def equivalent(self) -> bool:
        return not (self.only_in_a_states or self.only_in_b_states or self.only_in_a_edges or self.only_in_b_edges)

    def diff_lines(self) -> list[str]:
        out = [f"state only in A: {format_byte(s)}" for s in self.only_in_a_states]
        out += [f"state only in B: {format_byte(s)}" for s in self.only_in_b_states]
        out += [f"edge only in A: {format_byte(a)} -{l}-> {format_byte(b)}" for a, l, b in self.only_in_a_edges]
        out += [f"edge only in B: {format_byte(a)} -{l}-> {format_byte(b)}" for a, l, b in self.only_in_b_edges]
        return out


def equivalence(a: ControllerDfa, b: ControllerDfa) -> EquivalenceReport:
    return EquivalenceReport(tuple(sorted(a.states - b.states)), tuple(sorted(b.states - a.states)),
                             tuple(sorted(a.edges - b.edges)), tuple(sorted(b.edges - a.edges)))


def coverage(dfa: ControllerDfa, reference: ControllerDfa) -> float:
    """Fraction of the reference's states that ``dfa`` visited."""
    if not reference.states:
        return 1.0
    return len(dfa.states & reference.states) / len(reference.states)


def describe(dfa: ControllerDfa) -> list[str]:
    return [f"{format_byte(s)}: {', '.join(decode_state(s))}" for s in sorted(dfa.states)]


def write_dfa(dfa: ControllerDfa, dot_path: str | Path, json_path: str | Path | None = None) -> None:
    Path(dot_path).write_text(to_dot(dfa), encoding="utf-8")
    if json_path is not None:
        Path(json_path).write_text(to_json(dfa), encoding="utf-8")


def edges_from(dfa: ControllerDfa, state: int) -> Iterable[Edge]:
    return sorted(e for e in dfa.edges if e[0] == state)
