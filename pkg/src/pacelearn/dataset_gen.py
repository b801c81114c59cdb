"""Labelled trace corpus, error injection, window extraction and fold splits."""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from .heart_model import ALL_MODES, HeartMode, HeartParams
from .loop import replay_reference, simulate_trace
from .trace_model import Symbol, TimedTrace, TimingConfig, densify, sparsify

DEFAULT_WINDOWS = (20, 30, 50, 100)


def derive_seed(master: int, component: str, index: int = 0) -> int:
    """Stable 63-bit sub-seed: sha256 of ``master:component:index``."""
    digest = hashlib.sha256(f"{master}:{component}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class DatasetSpec:
    per_class_count: int = 1000
    trace_len_ticks: int = 500
    error_count_range: tuple[int, int] = (1, 5)
    window_sizes: tuple[int, ...] = DEFAULT_WINDOWS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "window_sizes", tuple(int(w) for w in self.window_sizes))
        object.__setattr__(self, "error_count_range", tuple(int(x) for x in self.error_count_range))
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        lo, hi = self.error_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"error_count_range must satisfy 1 <= min <= max, got {self.error_count_range}")
        if not self.window_sizes or min(self.window_sizes) < 1:
            raise ValueError("window_sizes must be positive")
        if self.trace_len_ticks < self.max_window + 2:
            raise ValueError(f"trace_len_ticks ({self.trace_len_ticks}) too short for window {self.max_window}")

    @property
    def max_window(self) -> int:
        return max(self.window_sizes)


@dataclass(frozen=True)
class LabeledWindow:
    context: tuple[Symbol, ...]
    next: Symbol
    label: int  # 1 = correct, 0 = incorrect
    source_mode: str
    sample_id: int = -1
    tick: int = -1  # tick of ``next`` in the source trace

    @property
    def symbols(self) -> list[Symbol]:
        return [*self.context, self.next]


def inject_errors(trace: TimedTrace, n_errors: int, seed: int, min_tick: int = 101,
                  kinds: Sequence[str] | None = None) -> TimedTrace:
    """Corrupt a clean trace with omitted and extraneous paces.

    Each error's kind is drawn uniformly (or taken from ``kinds``) and its
    location uniformly among eligible ticks ``>= min_tick``: a scheduled pace
    for an omission, an empty tick for an extraneous AP or VP. If there are
    fewer paces than requested omissions the shortfall becomes extraneous
    errors; the returned ``errors`` list records what was actually injected.
    """
    if trace.label != "pos":
        raise ValueError("errors can only be injected into a positive trace")
    if n_errors < 1:
        raise ValueError("n_errors must be >= 1")
    rng = random.Random(seed)
    symbols = densify(trace, trace.length)
    paces = [t for t in range(min_tick, trace.length) if symbols[t].is_pace]
    empty = [t for t in range(min_tick, trace.length) if symbols[t] is Symbol.NONE]
    if kinds is None:
        kinds = ["omission" if rng.random() < 0.5 else "extraneous" for _ in range(n_errors)]
    kinds = list(kinds)
    n_omit = min(kinds.count("omission"), len(paces))
    n_extra = min(len(kinds) - n_omit, len(empty))
    if n_omit + n_extra == 0:
        raise ValueError("trace has no eligible tick for error injection")
    errors = []
    for t in rng.sample(paces, n_omit):
        symbols[t] = Symbol.NONE
        errors.append((t, "omission"))
    for t in rng.sample(empty, n_extra):
        symbols[t] = Symbol.AP if rng.random() < 0.5 else Symbol.VP
        errors.append((t, "extraneous"))
    errors.sort()
    return sparsify(symbols, mode=trace.mode, label="neg", errors=tuple(errors))


def build_dataset(spec: DatasetSpec, config: TimingConfig | None = None,
                  params: HeartParams | None = None) -> tuple[list[TimedTrace], dict[str, dict[str, int]]]:
    """Generate the corpus: N negatives per mode, N positives per mode except AV block.

    Returns the traces (positives then negatives, mode by mode) and the
    per-mode class counts.
    """
    config = config or TimingConfig()
    params = params or HeartParams()
    traces: list[TimedTrace] = []
    table: dict[str, dict[str, int]] = {}
    lo, hi = spec.error_count_range
    for mode in ALL_MODES:
        n_pos = 0 if mode is HeartMode.COMPLETE_AV_BLOCK else spec.per_class_count
        for i in range(n_pos):
            seed = derive_seed(spec.seed, f"pos/{mode.value}", i)
            traces.append(simulate_trace(mode, config, params, spec.trace_len_ticks, seed))
        for i in range(spec.per_class_count):
            seed = derive_seed(spec.seed, f"neg/{mode.value}", i)
            clean = simulate_trace(mode, config, params, spec.trace_len_ticks, seed)
            err_rng = random.Random(derive_seed(spec.seed, f"err/{mode.value}", i))
            n = err_rng.randint(lo, hi)
            traces.append(inject_errors(clean, n, err_rng.getrandbits(63), min_tick=spec.max_window + 1))
        table[mode.value] = {"pos": n_pos, "neg": spec.per_class_count}
    table["total"] = {
        "pos": sum(v["pos"] for v in table.values()),
        "neg": sum(v["neg"] for v in table.values()),
    }
    return traces, table


def extract_window(trace: TimedTrace, w: int, seed: int, sample_id: int = -1) -> LabeledWindow:
    """One labelled window from a trace.

    Negative trace: the ``w`` symbols before the first injected error, and
    the erroneous symbol. Positive trace: the target tick is, with equal
    odds, one of the trace's paces or any tick, so correct paces are
    represented as often as the incorrect ones negatives carry.
    """
    if trace.length < w + 1:
        raise ValueError(f"trace of length {trace.length} too short for window {w}")
    symbols = densify(trace, trace.length)
    if trace.label == "neg":
        if not trace.errors:
            raise ValueError("negative trace without recorded errors")
        t = trace.errors[0][0]
        if t < w:
            raise ValueError(f"first error at tick {t} leaves no full window of {w}")
        label = 0
    else:
        rng = random.Random(seed)
        paces = [i for i in range(w, trace.length) if symbols[i].is_pace]
        if paces and rng.random() < 0.5:
            t = rng.choice(paces)
        else:
            t = rng.randrange(w, trace.length)
        label = 1
    return LabeledWindow(tuple(symbols[t - w:t]), symbols[t], label, trace.mode, sample_id, t)


def extract_windows(traces: Sequence[TimedTrace], w: int, seed: int) -> list[LabeledWindow]:
    return [extract_window(tr, w, derive_seed(seed, f"window/{w}", i), sample_id=i)
            for i, tr in enumerate(traces)]


def oracle_symbol(trace: TimedTrace, tick: int, config: TimingConfig) -> Symbol:
    """What the reference automaton would have recorded at ``tick``."""
    symbols = densify(trace, trace.length)
    return replay_reference(symbols[:tick + 1], config)[tick]


def check_window_labels(traces: Sequence[TimedTrace], windows: Sequence[LabeledWindow],
                        config: TimingConfig) -> list[int]:
    """Sample ids whose label disagrees with the reference recomputation."""
    bad = []
    for win in windows:
        trace = traces[win.sample_id]
        symbols = densify(trace, trace.length)
        ref = replay_reference(symbols[:win.tick + 1], config)
        context_ok = ref[win.tick - len(win.context):win.tick] == list(win.context)
        agrees = ref[win.tick] == win.next
        if not context_ok or agrees != bool(win.label):
            bad.append(win.sample_id)
    return bad


@dataclass(frozen=True)
class FoldSplit:
    config_id: int
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    val_fold: int
    test_fold: int
    fold_assignment: dict[int, int] = field(default_factory=dict, compare=False, repr=False)

    def check_disjoint(self) -> None:
        tr, va, te = set(self.train), set(self.val), set(self.test)
        if tr & va or tr & te or va & te:
            raise AssertionError(f"configuration {self.config_id}: train/val/test overlap")


def assign_folds(windows: Sequence[LabeledWindow], seed: int, n_folds: int = 5) -> dict[int, int]:
    """Stratified fold assignment by (mode, label)."""
    strata: dict[tuple[str, int], list[int]] = defaultdict(list)
    for w in windows:
        strata[(w.source_mode, w.label)].append(w.sample_id)
    rng = random.Random(seed)
    assignment = {}
    offset = 0
    for key in sorted(strata):
        ids = sorted(strata[key])
        rng.shuffle(ids)
        for j, sid in enumerate(ids):
            assignment[sid] = (j + offset) % n_folds
        # rotate so remainders do not always pile onto fold 0
        offset += len(ids)
    return assignment


def split_folds(windows: Sequence[LabeledWindow], seed: int, n_folds: int = 5) -> list[FoldSplit]:
    """All ordered (validation, test) fold pairs; the remaining folds train."""
    if len(windows) < n_folds:
        raise ValueError(f"need at least {n_folds} samples, got {len(windows)}")
    assignment = assign_folds(windows, seed, n_folds)
    by_fold: dict[int, list[int]] = defaultdict(list)
    for sid in sorted(assignment):
        by_fold[assignment[sid]].append(sid)
    splits = []
    cid = 0
    for v in range(n_folds):
        for t in range(n_folds):
            if v == t:
                continue
            train = tuple(s for f in range(n_folds) if f not in (v, t) for s in by_fold[f])
            splits.append(FoldSplit(cid, train, tuple(by_fold[v]), tuple(by_fold[t]), v, t, assignment))
            cid += 1
    return splits


def class_table(traces: Iterable[TimedTrace]) -> dict[str, dict[str, int]]:
    counts: Counter = Counter((t.mode, t.label) for t in traces)
    table = {m.value: {"pos": counts[(m.value, "pos")], "neg": counts[(m.value, "neg")]}
             for m in ALL_MODES}
    table["total"] = {"pos": sum(v["pos"] for v in table.values()),
                      "neg": sum(v["neg"] for v in table.values())}
    return table


def window_to_json(win: LabeledWindow) -> str:
    return json.dumps({"ctx": [s.value for s in win.context], "next": win.next.value,
                       "label": win.label, "mode": win.source_mode}, separators=(",", ":"))


def write_windows(windows: Iterable[LabeledWindow], destination: str | Path | IO[str]) -> int:
    if isinstance(destination, (str, Path)):
        with open(destination, "w", encoding="utf-8", newline="\n") as fh:
            return write_windows(windows, fh)
    n = 0
    for win in windows:
        destination.write(window_to_json(win) + "\n")
        n += 1
    return n


def read_windows(source: str | Path | IO[str]) -> list[LabeledWindow]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return read_windows(fh)
    out = []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(LabeledWindow(tuple(Symbol(s) for s in obj["ctx"]), Symbol(obj["next"]),
                                     int(obj["label"]), obj["mode"], sample_id=len(out)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed window on line {lineno}: {exc}") from exc
    return out
