"""Event alphabet, timed traces, timing configuration and the JSONL trace format."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np


class Symbol(enum.Enum):
    AP = "AP"
    VP = "VP"
    AS = "AS"
    VS = "VS"
    NONE = "-"

    @property
    def index(self) -> int:
        return _INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "Symbol":
        return ALPHABET[i]

    @property
    def is_pace(self) -> bool:
        return self in (Symbol.AP, Symbol.VP)

    @property
    def is_sense(self) -> bool:
        return self in (Symbol.AS, Symbol.VS)

    @property
    def is_atrial(self) -> bool:
        return self in (Symbol.AP, Symbol.AS)

    @property
    def is_ventricular(self) -> bool:
        return self in (Symbol.VP, Symbol.VS)

    def __str__(self) -> str:
        return self.value


ALPHABET: tuple[Symbol, ...] = (Symbol.AP, Symbol.VP, Symbol.AS, Symbol.VS, Symbol.NONE)
_INDEX = {s: i for i, s in enumerate(ALPHABET)}
N_SYMBOLS = len(ALPHABET)


def one_hot(symbol: Symbol) -> np.ndarray:
    v = np.zeros(N_SYMBOLS)
    v[symbol.index] = 1.0
    return v


def decode(vector: Sequence[float]) -> Symbol:
    return ALPHABET[int(np.argmax(vector))]


def encode_sequence(symbols: Sequence[Symbol], dtype=np.float64) -> np.ndarray:
    """One-hot encode a symbol sequence into a ``len(symbols) x 5`` array."""
    out = np.zeros((len(symbols), N_SYMBOLS), dtype=dtype)
    out[np.arange(len(symbols)), [s.index for s in symbols]] = 1.0
    return out


@dataclass(frozen=True)
class TimingConfig:
    """Pacemaker timing parameters, all durations in ticks.

    The defaults use 50 ms ticks: LRI 1000 ms (60 bpm), AV delay 200 ms,
    upper rate interval 600 ms (100 bpm), blanking 50 ms, refractory 150 ms.
    """

    tick_ms: int = 50
    lri_ticks: int = 20
    avi_ticks: int = 4
    url_ticks: int = 12
    atrial_blank_ticks: int = 1
    vent_blank_ticks: int = 1
    atrial_refrac_ticks: int = 3
    vent_refrac_ticks: int = 3

    def __post_init__(self):
        self.validate()

    @property
    def va_ticks(self) -> int:
        return self.lri_ticks - self.avi_ticks

    def validate(self) -> None:
        for name in ("tick_ms", "lri_ticks", "avi_ticks", "url_ticks", "atrial_blank_ticks",
                     "vent_blank_ticks", "atrial_refrac_ticks", "vent_refrac_ticks"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"TimingConfig.{name} must be positive, got {getattr(self, name)}")
        if self.avi_ticks >= self.lri_ticks:
            raise ValueError(f"avi_ticks ({self.avi_ticks}) must be < lri_ticks ({self.lri_ticks})")
        if self.url_ticks >= self.lri_ticks:
            raise ValueError(f"url_ticks ({self.url_ticks}) must be < lri_ticks ({self.lri_ticks})")
        for chamber in ("atrial", "vent"):
            blank = getattr(self, f"{chamber}_blank_ticks")
            refrac = getattr(self, f"{chamber}_refrac_ticks")
            if blank > refrac:
                raise ValueError(f"{chamber} blanking ({blank}) exceeds refractory ({refrac})")
            if refrac >= self.avi_ticks or refrac >= self.va_ticks:
                raise ValueError(
                    f"{chamber} refractory ({refrac}) must be shorter than both the AV "
                    f"({self.avi_ticks}) and VA ({self.va_ticks}) intervals")

    @classmethod
    def fine(cls) -> "TimingConfig":
        """25 ms ticks: the same physiological settings at double resolution."""
        return cls(tick_ms=25, lri_ticks=40, avi_ticks=8, url_ticks=24, atrial_blank_ticks=2,
                   vent_blank_ticks=2, atrial_refrac_ticks=5, vent_refrac_ticks=5)


LABELS = ("pos", "neg", "unlabeled")
ERROR_KINDS = ("omission", "extraneous")


@dataclass(frozen=True)
class TimedTrace:
    """A sparse, tick-stamped event sequence.

    ``length`` is the number of ticks the trace covers; the dense form has
    ``None`` wherever no event is stored.
    """

    events: tuple[tuple[int, Symbol], ...]
    length: int
    mode: str = "healthy"
    label: str = "unlabeled"
    errors: tuple[tuple[int, str], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple((int(t), Symbol(s)) for t, s in self.events))
        object.__setattr__(self, "errors", tuple((int(t), str(k)) for t, k in self.errors))
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.label == "pos" and self.errors:
            raise ValueError("a positive trace cannot carry errors")
        last = -1
        for t, s in self.events:
            if t <= last:
                raise ValueError(f"event ticks must strictly increase (tick {t} after {last})")
            if s is Symbol.NONE:
                raise ValueError(f"sparse traces do not store '-' events (tick {t})")
            last = t
        if last >= self.length:
            raise ValueError(f"event at tick {last} outside trace of length {self.length}")
        for _, kind in self.errors:
            if kind not in ERROR_KINDS:
                raise ValueError(f"unknown error kind {kind!r}")

    def dense(self) -> list[Symbol]:
        return densify(self, self.length)

    def counts(self) -> dict[Symbol, int]:
        out = {s: 0 for s in ALPHABET if s is not Symbol.NONE}
        for _, s in self.events:
            out[s] += 1
        return out


def densify(trace: TimedTrace, length: int) -> list[Symbol]:
    out = [Symbol.NONE] * length
    seen = set()
    for t, s in trace.events:
        if t < 0 or t >= length:
            raise IndexError(f"event tick {t} out of range for length {length}")
        if t in seen:
            raise ValueError(f"two events at tick {t}")
        seen.add(t)
        out[t] = s
    return out


def sparsify(symbols: Sequence[Symbol], **kwargs) -> TimedTrace:
    events = tuple((t, s) for t, s in enumerate(symbols) if s is not Symbol.NONE)
    return TimedTrace(events=events, length=len(symbols), **kwargs)


def trace_to_json(trace: TimedTrace) -> str:
    obj = {
        "mode": trace.mode,
        "label": trace.label,
        "events": [{"t": t, "sym": s.value} for t, s in trace.events],
        "errors": [{"t": t, "kind": k} for t, k in trace.errors],
        "len": trace.length,
    }
    return json.dumps(obj, separators=(",", ":"))


def trace_from_json(line: str) -> TimedTrace:
    obj = json.loads(line)
    events = [(e["t"], Symbol(e["sym"])) for e in obj["events"]]
    length = obj.get("len")
    if length is None:
        length = events[-1][0] + 1 if events else 0
    return TimedTrace(
        events=tuple(events),
        length=int(length),
        mode=obj["mode"],
        label=obj["label"],
        errors=tuple((e["t"], e["kind"]) for e in obj.get("errors", [])),
    )


def write_traces(traces: Iterable[TimedTrace], destination: str | Path | IO[str]) -> int:
    """Write traces as JSONL. Returns the number of lines written."""
    if isinstance(destination, (str, Path)):
        path = Path(destination)
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                return write_traces(traces, fh)
        except OSError as exc:
            raise OSError(f"cannot write traces to {path}: {exc}") from exc
    n = 0
    for trace in traces:
        destination.write(trace_to_json(trace))
        destination.write("\n")
        n += 1
    return n


def read_traces(source: str | Path | IO[str]) -> list[TimedTrace]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            with open(path, encoding="utf-8") as fh:
                return read_traces(fh)
        except OSError as exc:
            raise OSError(f"cannot read traces from {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            out.append(trace_from_json(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed trace on line {lineno}: {exc}") from exc
    return out
