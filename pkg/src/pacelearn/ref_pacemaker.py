"""Reference dual-chamber (DDD) timing automaton.

One call to :meth:`Pacer.sense` advances the device clock by a tick and feeds
it the heart events of that tick; :meth:`Pacer.decide` then picks the pace the
reference automaton would deliver, and :meth:`Pacer.apply` commits an action
(the reference's own, or one chosen by a learned controller).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable

from .trace_model import Symbol, TimingConfig

AV, VA = "AV", "VA"

# state byte layout, most significant bit first
BIT_NAMES = (
    "Interval (1=VA, 0=AV)",
    "Ventricular Sense",
    "Atrial Sense",
    "AV or VA Interval Running",
    "Atrial Refractory",
    "Atrial Blanking",
    "Ventricular Refractory",
    "Ventricular Blanking",
)

_NEVER = -(10 ** 9)


@dataclass(frozen=True)
class PacerOutput:
    action: Symbol
    accepted_events: tuple[Symbol, ...]


class Pacer:
    """Mutable DDD pacer state.

    Timers hold ticks remaining; a period set on tick ``t`` with length ``n``
    is active on ticks ``t .. t+n-1`` and an interval of length ``n`` started
    on tick ``t`` expires on tick ``t+n``.
    """

    def __init__(self, config: TimingConfig | None = None):
        self.config = config or TimingConfig()
        self.config.validate()
        self.tick = -1
        self.phase = VA
        self.phase_timer = self.config.va_ticks
        self.atrial_blank = 0
        self.vent_blank = 0
        self.atrial_refrac = 0
        self.vent_refrac = 0
        self.last_vent_tick = -1
        self.last_atrial_tick = _NEVER
        self.opened_by_sense = False

    def copy(self) -> "Pacer":
        return copy.copy(self)

    # -- clock and sensing -------------------------------------------------
    def sense(self, heart_events: Iterable[Symbol]) -> tuple[Symbol, ...]:
        """Advance one tick and process that tick's heart events.

        Returns the senses the device accepted (not blanked, not refractory).
        """
        self.tick += 1
        if self.phase_timer > 0:
            self.phase_timer -= 1
        if self.atrial_blank > 0:
            self.atrial_blank -= 1
        if self.vent_blank > 0:
            self.vent_blank -= 1
        if self.atrial_refrac > 0:
            self.atrial_refrac -= 1
        if self.vent_refrac > 0:
            self.vent_refrac -= 1

        accepted = []
        for ev in sorted(set(heart_events), key=lambda s: s.index):
            if ev is Symbol.AS and self._sense_atrium():
                accepted.append(ev)
            elif ev is Symbol.VS and self._sense_ventricle():
                accepted.append(ev)
        return tuple(accepted)

    def _sense_atrium(self) -> bool:
        cfg = self.config
        if self.atrial_blank > 0:
            return False
        if self.atrial_refrac > 0 or self.phase == AV:
            # too early to count, but the refractory window restarts
            self.atrial_refrac = cfg.atrial_refrac_ticks
            return False
        self._start_av(sensed=True)
        return True

    def _sense_ventricle(self) -> bool:
        cfg = self.config
        if self.vent_blank > 0:
            return False
        if self.vent_refrac > 0:
            self.vent_refrac = cfg.vent_refrac_ticks
            return False
        # in AV this ends the interval; in VA (premature beat) it restarts it
        self._start_va(sensed=True)
        return True

    # -- pacing ------------------------------------------------------------
    @property
    def interval_expired(self) -> bool:
        """True when the running interval has run out and a pace is allowed now."""
        if self.phase_timer > 0:
            return False
        if self.phase == AV:
            return self.tick - self.last_vent_tick >= self.config.url_ticks
        return True

    def decide(self) -> Symbol:
        """The reference automaton's action for the current tick."""
        if not self.interval_expired:
            return Symbol.NONE
        return Symbol.AP if self.phase == VA else Symbol.VP

    def apply(self, action: Symbol) -> None:
        if action is Symbol.AP:
            self._start_av(sensed=False)
        elif action is Symbol.VP:
            self._start_va(sensed=False)

    def step(self, heart_events: Iterable[Symbol]) -> PacerOutput:
        accepted = self.sense(heart_events)
        action = self.decide()
        self.apply(action)
        return PacerOutput(action, accepted)

    def _start_av(self, sensed: bool) -> None:
        cfg = self.config
        self.phase = AV
        self.phase_timer = cfg.avi_ticks
        self.atrial_blank = cfg.atrial_blank_ticks
        self.atrial_refrac = cfg.atrial_refrac_ticks
        self.last_atrial_tick = self.tick
        self.opened_by_sense = sensed

    def _start_va(self, sensed: bool) -> None:
        cfg = self.config
        self.phase = VA
        self.phase_timer = cfg.va_ticks
        if self.last_atrial_tick != _NEVER:
            # anchored on the last atrial event so the A-A interval never exceeds the LRI
            since = self.tick - self.last_atrial_tick
            self.phase_timer = max(0, min(cfg.va_ticks, cfg.lri_ticks - since))
        self.vent_blank = cfg.vent_blank_ticks
        self.vent_refrac = cfg.vent_refrac_ticks
        self.last_vent_tick = self.tick
        self.opened_by_sense = sensed

    # -- observation ---------------------------------------------------------
    def state_byte(self) -> int:
        b = 0
        if self.phase == VA:
            b |= 0x80
            if self.opened_by_sense:
                b |= 0x40
        elif self.opened_by_sense:
            b |= 0x20
        if not self.interval_expired:
            b |= 0x10
        if self.atrial_refrac > 0:
            b |= 0x08
        if self.atrial_blank > 0:
            b |= 0x04
        if self.vent_refrac > 0:
            b |= 0x02
        if self.vent_blank > 0:
            b |= 0x01
        return b

    def timer_fractions(self) -> tuple[float, float]:
        """(interval time remaining, refractory time remaining) as fractions in [0, 1]."""
        cfg = self.config
        span = cfg.avi_ticks if self.phase == AV else cfg.va_ticks
        if self.phase == AV:
            refrac = self.atrial_refrac / cfg.atrial_refrac_ticks
        else:
            refrac = self.vent_refrac / cfg.vent_refrac_ticks
        return self.phase_timer / span, refrac


def new_pacer(config: TimingConfig | None = None) -> Pacer:
    return Pacer(config)


def step_pacer(state: Pacer, heart_events: Iterable[Symbol]) -> tuple[Pacer, PacerOutput]:
    """Pure form of :meth:`Pacer.step`: ``state`` is left untouched."""
    nxt = state.copy()
    out = nxt.step(heart_events)
    return nxt, out


def state_byte(state: Pacer) -> int:
    return state.state_byte()


def format_byte(byte: int) -> str:
    return format(byte, "08b")


def decode_state(byte: int) -> list[str]:
    """Names of the flags set in a state byte, b7 first.

    b7 is reported as "VA interval" when set and "AV interval" when clear.
    """
    flags = ["VA interval" if byte & 0x80 else "AV interval"]
    for bit, name in zip(range(6, -1, -1), BIT_NAMES[1:]):
        if byte >> bit & 1:
            flags.append(name)
    return flags
