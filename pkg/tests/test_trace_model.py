import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacelearn.trace_model import (
    ALPHABET, Symbol, TimedTrace, TimingConfig, decode, densify, encode_sequence, one_hot,
    read_traces, sparsify, trace_from_json, trace_to_json, write_traces,
)


def test_alphabet_order_and_one_hot():
    assert [s.value for s in ALPHABET] == ["AP", "VP", "AS", "VS", "-"]
    assert one_hot(Symbol.AP).tolist() == [1, 0, 0, 0, 0]
    assert one_hot(Symbol.NONE).tolist() == [0, 0, 0, 0, 1]
    for s in ALPHABET:
        assert decode(one_hot(s)) is s
        assert Symbol.from_index(s.index) is s


def test_encode_sequence_rows_are_one_hot():
    x = encode_sequence([Symbol.AS, Symbol.NONE, Symbol.VP], dtype=np.float32)
    assert x.dtype == np.float32
    assert x.shape == (3, 5)
    assert x.sum(axis=1).tolist() == [1, 1, 1]
    assert [decode(r) for r in x] == [Symbol.AS, Symbol.NONE, Symbol.VP]


def test_timing_defaults_validate():
    TimingConfig()
    TimingConfig.fine()
    with pytest.raises(ValueError, match="avi_ticks"):
        TimingConfig(avi_ticks=20, lri_ticks=20)
    with pytest.raises(ValueError, match="url_ticks"):
        TimingConfig(url_ticks=25)
    with pytest.raises(ValueError, match="blanking"):
        TimingConfig(atrial_blank_ticks=3, atrial_refrac_ticks=2)
    with pytest.raises(ValueError, match="refractory"):
        TimingConfig(vent_refrac_ticks=4)


def test_trace_invariants():
    with pytest.raises(ValueError, match="strictly increase"):
        TimedTrace(events=((3, Symbol.AS), (3, Symbol.VP)), length=5)
    with pytest.raises(ValueError, match="positive"):
        TimedTrace(events=(), length=5, label="pos", errors=((1, "omission"),))
    with pytest.raises(ValueError, match="outside"):
        TimedTrace(events=((5, Symbol.AS),), length=5)
    with pytest.raises(ValueError, match="error kind"):
        TimedTrace(events=(), length=5, label="neg", errors=((1, "late"),))


def test_densify_examples():
    t = TimedTrace(events=((2, Symbol.AS),), length=4)
    assert densify(t, 4) == [Symbol.NONE, Symbol.NONE, Symbol.AS, Symbol.NONE]
    assert densify(TimedTrace(events=(), length=3), 3) == [Symbol.NONE] * 3
    with pytest.raises(IndexError):
        densify(t, 2)


def test_write_empty_and_schema():
    buf = io.StringIO()
    assert write_traces([], buf) == 0
    assert buf.getvalue() == ""
    t = TimedTrace(events=((0, Symbol.AS), (3, Symbol.VP), (7, Symbol.VS)), length=10, mode="pvc",
                   label="neg", errors=((3, "extraneous"),))
    buf = io.StringIO()
    assert write_traces([t], buf) == 1
    lines = buf.getvalue().splitlines()
    assert len(lines) == 1
    obj = json.loads(lines[0])
    assert list(obj)[:4] == ["mode", "label", "events", "errors"]
    assert len(obj["events"]) == 3
    assert obj["events"][1] == {"t": 3, "sym": "VP"}


def test_read_reports_line_number(tmp_path):
    good = trace_to_json(TimedTrace(events=(), length=2))
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n{not json\n")
    with pytest.raises(ValueError, match="line 2"):
        read_traces(path)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(OSError, match="nope.jsonl"):
        read_traces(tmp_path / "nope.jsonl")


symbols = st.sampled_from(ALPHABET)


@st.composite
def traces(draw):
    dense = draw(st.lists(symbols, min_size=0, max_size=40))
    label = draw(st.sampled_from(["pos", "neg", "unlabeled"]))
    errors = ()
    if label != "pos":
        errors = tuple(draw(st.lists(
            st.tuples(st.integers(0, 50), st.sampled_from(["omission", "extraneous"])), max_size=3)))
    mode = draw(st.sampled_from(["healthy", "pvc", "mobitz-ii"]))
    return sparsify(dense, mode=mode, label=label, errors=errors)


@settings(max_examples=1000, deadline=None)
@given(traces())
def test_jsonl_round_trip(trace):
    buf = io.StringIO()
    write_traces([trace], buf)
    buf.seek(0)
    assert read_traces(buf) == [trace]
    assert trace_from_json(trace_to_json(trace)) == trace


@settings(max_examples=300, deadline=None)
@given(st.lists(symbols, max_size=60))
def test_densify_sparsify_round_trip(dense):
    trace = sparsify(dense)
    assert densify(trace, len(dense)) == dense
    assert sparsify(trace.dense()) == trace
