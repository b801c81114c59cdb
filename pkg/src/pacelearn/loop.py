"""Heart + device closed loop shared by trace generation, verification and extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .heart_model import Heart, HeartMode, HeartParams
from .ref_pacemaker import Pacer
from .trace_model import Symbol, TimedTrace, TimingConfig, sparsify

# a controller maps the device's view (pacer bookkeeping) to an action
Controller = Callable[[Pacer], Symbol]


def reference_controller(pacer: Pacer) -> Symbol:
    return pacer.decide()


@dataclass(frozen=True)
class Tick:
    tick: int
    byte: int
    action: Symbol
    accepted: tuple[Symbol, ...]
    symbol: Symbol
    reference_action: Symbol


class PacingLoop:
    """Runs a heart against a device whose actions come from ``controller``.

    Per tick: the heart emits its events (reacting to the previous tick's
    pace), the device's bookkeeping accepts or discards them, the controller
    picks an action from the resulting state and the action is committed.
    The recorded trace symbol is the accepted sense, else the pace, else '-'.
    """

    def __init__(self, heart: Heart, config: TimingConfig | None = None,
                 controller: Optional[Controller] = None, pacer: Pacer | None = None):
        self.heart = heart
        self.pacer = pacer or Pacer(config)
        self.controller = controller or reference_controller
        self.last_action: Symbol | None = None

    def sense(self) -> tuple[Symbol, ...]:
        events = self.heart.step(self.last_action)
        return self.pacer.sense(events)

    def act(self, action: Symbol, accepted: tuple[Symbol, ...]) -> Symbol:
        self.pacer.apply(action)
        self.last_action = action if action.is_pace else None
        if action.is_pace:
            return action
        return accepted[0] if accepted else Symbol.NONE

    def step(self) -> Tick:
        accepted = self.sense()
        byte = self.pacer.state_byte()
        ref = self.pacer.decide()
        action = self.controller(self.pacer)
        symbol = self.act(action, accepted)
        return Tick(self.pacer.tick, byte, action, accepted, symbol, ref)

    def run(self, ticks: int) -> list[Tick]:
        return [self.step() for _ in range(ticks)]


def simulate_symbols(mode: HeartMode | str, config: TimingConfig, params: HeartParams,
                     length: int, seed: int) -> list[Symbol]:
    loop = PacingLoop(Heart(mode, params, seed), config)
    heart_step = loop.heart.step
    pacer = loop.pacer
    out = []
    last = None
    # unrolled reference loop; equivalent to PacingLoop.step with the reference controller
    for _ in range(length):
        accepted = pacer.sense(heart_step(last))
        action = pacer.decide()
        pacer.apply(action)
        if action is not Symbol.NONE:
            out.append(action)
            last = action
        else:
            out.append(accepted[0] if accepted else Symbol.NONE)
            last = None
    return out


def simulate_trace(mode: HeartMode | str, config: TimingConfig | None = None,
                   params: HeartParams | None = None, length: int = 500,
                   seed: int = 0) -> TimedTrace:
    """Closed-loop trace of the reference pacemaker; labelled positive."""
    mode = HeartMode.parse(mode)
    config = config or TimingConfig()
    params = params or HeartParams()
    symbols = simulate_symbols(mode, config, params, length, seed)
    return sparsify(symbols, mode=mode.value, label="pos")


def replay_reference(symbols: list[Symbol], config: TimingConfig) -> list[Symbol]:
    """Recompute the reference trace from the senses stored in ``symbols``.

    Only accepted senses are stored, so feeding them back to a fresh pacer
    reproduces the pacer's actions tick for tick. The result holds the
    reference's symbol (sense, pace or '-') for every tick.
    """
    pacer = Pacer(config)
    out = []
    for s in symbols:
        accepted = pacer.sense([s] if s.is_sense else [])
        action = pacer.decide()
        pacer.apply(action)
        out.append(action if action.is_pace else (accepted[0] if accepted else Symbol.NONE))
    return out
