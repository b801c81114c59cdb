"""Tick-level intrinsic heart model with the arrhythmias used to generate traces."""

from __future__ import annotations

import copy
import enum
import random
from dataclasses import dataclass

from .trace_model import Symbol


class HeartMode(enum.Enum):
    COMPLETE_AV_BLOCK = "complete-av-block"
    PVC = "pvc"
    MOBITZ_II = "mobitz-ii"
    STOCHASTIC = "stochastic"
    SINUS_ARREST = "sinus-arrest"
    HEALTHY = "healthy"

    @classmethod
    def parse(cls, name: "str | HeartMode") -> "HeartMode":
        if isinstance(name, HeartMode):
            return name
        try:
            return cls(name.lower().replace("_", "-"))
        except ValueError:
            raise ValueError(f"unknown heart mode {name!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


ALL_MODES: tuple[HeartMode, ...] = tuple(HeartMode)
# modes a stochastic heart mixes per cycle
_MIXED = tuple(m for m in HeartMode if m is not HeartMode.STOCHASTIC)


@dataclass(frozen=True)
class HeartParams:
    nominal_aa_ticks: int = 18
    min_aa: int = 16
    max_aa: int = 22
    drift_step_prob: float = 0.3
    conduction_delay_ticks: int = 3
    pvc_prob: float = 0.15
    arrest_period_beats: int = 8
    arrest_len_ticks: int = 30

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if not self.min_aa <= self.nominal_aa_ticks <= self.max_aa:
            problems.append(f"min_aa <= nominal_aa_ticks <= max_aa "
                            f"({self.min_aa}, {self.nominal_aa_ticks}, {self.max_aa})")
        if self.min_aa < 1:
            problems.append(f"min_aa >= 1 ({self.min_aa})")
        for name in ("drift_step_prob", "pvc_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                problems.append(f"0 <= {name} <= 1 ({p})")
        if self.conduction_delay_ticks < 1:
            problems.append(f"conduction_delay_ticks >= 1 ({self.conduction_delay_ticks})")
        if self.conduction_delay_ticks >= self.min_aa:
            problems.append(f"conduction_delay_ticks < min_aa ({self.conduction_delay_ticks})")
        if self.arrest_period_beats < 1 or self.arrest_len_ticks < 1:
            problems.append("arrest_period_beats and arrest_len_ticks must be >= 1")
        if problems:
            raise ValueError("invalid HeartParams: " + "; ".join(problems))


class Heart:
    """Intrinsic atrial/ventricular activity, one tick per :meth:`step`.

    The first sinus beat falls on tick 0. Conducted ventricular beats follow
    each atrial contraction (sensed or paced) after ``conduction_delay_ticks``
    when the active mode lets the beat through.
    """

    def __init__(self, mode: HeartMode | str, params: HeartParams | None = None, seed: int = 0):
        self.mode = HeartMode.parse(mode)
        self.params = params or HeartParams()
        self.params.validate()
        self.rng = random.Random(seed)
        self.tick = -1
        self.intrinsic_aa_ticks = self.params.nominal_aa_ticks
        self.next_as = 0
        self.arrest_end = -1
        self.pending_vs: int | None = None
        self.pvc_tick: int | None = None
        self.conduction_counter = 0
        self.beats = 0
        self.cycle_mode = self.mode if self.mode is not HeartMode.STOCHASTIC else HeartMode.HEALTHY

    def copy(self) -> "Heart":
        return copy.deepcopy(self)

    def step(self, paced: Symbol | None = None) -> list[Symbol]:
        """Advance one tick and return the intrinsic events of that tick.

        ``paced`` is the pace the device delivered on the previous tick; it
        shapes this tick onward (an AP restarts the sinus cycle, a VP
        depolarises the ventricle and cancels pending conduction).
        """
        self.tick += 1
        t = self.tick
        if paced is Symbol.AP:
            self._atrial_beat(t - 1)
        elif paced is Symbol.VP:
            self.pending_vs = None
            if self.pvc_tick is not None and self.pvc_tick <= t:
                self.pvc_tick = None

        events = []
        if t >= self.next_as:
            events.append(Symbol.AS)
            self._atrial_beat(t)
        vent = False
        if self.pending_vs is not None and self.pending_vs <= t:
            vent = True
            self.pending_vs = None
        if self.pvc_tick is not None and self.pvc_tick <= t:
            vent = True
            self.pvc_tick = None
        if vent:
            if events:
                # one event per tick: the ventricular beat slips to the next tick
                self.pending_vs = t + 1
            else:
                events.append(Symbol.VS)
        return events

    def _atrial_beat(self, t0: int) -> None:
        p = self.params
        rng = self.rng
        if self.mode is HeartMode.STOCHASTIC:
            self.cycle_mode = _MIXED[rng.randrange(len(_MIXED))]
        mode = self.cycle_mode
        self.beats += 1

        if rng.random() < p.drift_step_prob:
            step = 1 if rng.random() < 0.5 else -1
            self.intrinsic_aa_ticks = min(p.max_aa, max(p.min_aa, self.intrinsic_aa_ticks + step))

        nxt = t0 + self.intrinsic_aa_ticks
        arrest = (mode is HeartMode.SINUS_ARREST
                  and (self.mode is HeartMode.STOCHASTIC or self.beats % p.arrest_period_beats == 0))
        if arrest:
            self.arrest_end = max(self.arrest_end, t0 + p.arrest_len_ticks)
        self.next_as = max(nxt, self.arrest_end)

        if mode is HeartMode.COMPLETE_AV_BLOCK:
            conducts = False
        elif mode is HeartMode.MOBITZ_II:
            conducts = self.conduction_counter != 2
            self.conduction_counter = (self.conduction_counter + 1) % 3
        else:
            conducts = True
        self.pending_vs = t0 + p.conduction_delay_ticks if conducts else None

        self.pvc_tick = None
        if mode is HeartMode.PVC and rng.random() < p.pvc_prob:
            lo = t0 + p.conduction_delay_ticks + 1
            hi = self.next_as - 1
            if hi >= lo:
                self.pvc_tick = rng.randint(lo, hi)


def run_unpaced(mode: HeartMode | str, ticks: int, params: HeartParams | None = None,
                seed: int = 0) -> list[tuple[int, Symbol]]:
    """Intrinsic events over ``ticks`` ticks with no device attached."""
    heart = Heart(mode, params, seed)
    out = []
    for _ in range(ticks):
        for e in heart.step(None):
            out.append((heart.tick, e))
    return out
