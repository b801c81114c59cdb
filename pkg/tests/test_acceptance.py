"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The scaled reward machine of criterion 2 is trained once per session and
shared with criteria 4, 5 and 6. Expect the whole file to take on the
order of an hour or two on one CPU core.
"""

import hashlib
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import pacelearn.nn_core as nn
from pacelearn import rl_agent as rl
from pacelearn.cli import main as cli_main
from pacelearn.dataset_gen import DatasetSpec, build_dataset, check_window_labels, extract_windows, split_folds
from pacelearn.ddc_verifier import (
    And, Chop, Len, Not, PAnd, PFalse, PNot, Point, PTrue, Range, Sum, Var, check_pacing_requirements,
    eval_ddc, verify_all_modes,
)
from pacelearn.dfa_extract import equivalence, extract
from pacelearn.heart_model import ALL_MODES, HeartParams
from pacelearn.loop import simulate_symbols
from pacelearn.rm_trainer import RewardMachine, TrainSpec, evaluate, train
from pacelearn.seq_classifiers import (
    LstmCellParams, ModelConfig, build_model, encode_windows, lstm_cell_step,
)
from pacelearn.trace_model import ALPHABET, Symbol, TimingConfig

from ddc_oracle import OPS, oracle

SMOKE = Path(__file__).resolve().parent.parent / "configs" / "smoke.toml"

pytestmark = pytest.mark.acceptance

CFG = TimingConfig()
RM_CONFIGS = (0, 1, 2, 3)  # 4 of the 20 fold configurations
RM_SPEC = TrainSpec(arch="lstm", window=20, epochs=500, learning_rate=1e-3, hidden=64, seed=0)
ORDERING_SEEDS = (0, 1, 2)
AGENT_SEEDS = (0, 1, 2)
# E, R, L and the heart mode are fixed by the criterion; everything else is the library default
AGENT = rl.AgentTrainConfig(episodes=5000, replay_size=32, log_len=20, mode="stochastic")


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    with threadpool_limits(1):
        yield


@pytest.fixture(scope="session")
def corpus():
    """200 traces per class: 1,000 positive and 1,200 negative traces, windows 20 and 100."""
    traces, table = build_dataset(DatasetSpec(per_class_count=200, window_sizes=(20, 100), seed=0))
    return traces, {w: extract_windows(traces, w, 0) for w in (20, 100)}


@pytest.fixture(scope="session")
def rm_runs(corpus, tmp_path_factory):
    _, windows = corpus
    wins = windows[20]
    splits = split_folds(wins, 0)
    out = tmp_path_factory.mktemp("rm")
    runs = []
    for cid in RM_CONFIGS:
        res = train(RM_SPEC, splits[cid], wins, out / f"rm_c{cid}.json")
        test_f1 = evaluate(res.model, [wins[i] for i in splits[cid].test]).f1
        runs.append((cid, res, test_f1))
    return runs


@pytest.fixture(scope="session")
def reward_machine(rm_runs):
    """The criterion-2 model with the best validation F1 (lowest configuration id on ties)."""
    cid, res, _ = max(rm_runs, key=lambda r: (r[1].best_val_f1, -r[0]))
    return RewardMachine(res.model)


@pytest.fixture(scope="session")
def agents(reward_machine):
    out = []
    for seed in AGENT_SEEDS:
        cfg = rl.AgentTrainConfig(**{**AGENT.__dict__, "seed": seed})
        res = rl.fit(cfg, reward_machine)
        reports = verify_all_modes(res.policy.controller(), 5000, 1)
        out.append((seed, res, reports))
    return out


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(criterion):
    errors = {}
    # (a) a single LSTM cell step feeding a weighted read-out of h and c
    rng = np.random.default_rng(0)
    store = nn.ParamStore(np.float64)
    cell = LstmCellParams.register(store, "cell", 5, 4, rng)
    x = rng.normal(size=(3, 5))
    h0, c0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    wh, wc = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    def cell_loss():
        h, c = lstm_cell_step(cell, nn.Tensor(h0), nn.Tensor(c0), x)
        return nn.add(nn.total(nn.mul(h, wh)), nn.total(nn.mul(c, wc)))
    errors["lstm cell"] = nn.grad_check(cell_loss, store, max_entries=None).max_rel_error

    # (b) 2-layer BiLSTM classifier and (c) 2-layer single-head transformer, window 5
    ctx = [[ALPHABET[k] for k in rng.integers(0, 5, size=6)] for _ in range(4)]
    X, y = encode_windows(ctx), [0, 1, 1, 0]
    for name, mc in (("bilstm", ModelConfig("lstm", window=5, hidden=4, layers=2, seed=1)),
                     ("transformer", ModelConfig("transformer", window=5, d_k=4, layers=2, seed=2))):
        model = build_model(mc)
        assert model.store.dtype == np.float64
        errors[name] = nn.grad_check(lambda: nn.softmax_cross_entropy(model.logits(X), y), model.store,
                                     max_entries=None).max_rel_error
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errors.items()) + " (bound 1e-4)"
    assert criterion(1, worst <= 1e-4, detail)


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_2_reward_machine_learnability(criterion, rm_runs):
    f1s = [f1 for _, _, f1 in rm_runs]
    mean = float(np.mean(f1s))
    detail = (f"mean test F1 {mean:.4f} over configurations {list(RM_CONFIGS)} "
              f"({', '.join(f'{f:.3f}' for f in f1s)}; epochs run {[len(r.curves) for _, r, _ in rm_runs]})"
              " (target >= 0.85)")
    assert criterion(2, mean >= 0.85, detail)


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_3_architecture_ordering(criterion, corpus):
    _, windows = corpus
    f1 = {}
    for seed in ORDERING_SEEDS:
        for w in (20, 100):
            wins = windows[w]
            split = split_folds(wins, seed)[seed]
            for arch in ("lstm", "transformer"):
                spec = TrainSpec(arch=arch, window=w, epochs=500, learning_rate=1e-3, hidden=64, patience=20,
                                 seed=seed)
                res = train(spec, split, wins)
                f1[(seed, arch, w)] = evaluate(res.model, [wins[i] for i in split.test]).f1
    votes = Counter()
    for seed in ORDERING_SEEDS:
        for w in (20, 100):
            votes[f"lstm>=transformer@{w}"] += f1[(seed, "lstm", w)] >= f1[(seed, "transformer", w)]
        votes["transformer20>=transformer100-0.02"] += (
            f1[(seed, "transformer", 20)] >= f1[(seed, "transformer", 100)] - 0.02)
    majority = len(ORDERING_SEEDS) // 2 + 1
    ok = all(votes[k] >= majority for k in ("lstm>=transformer@20", "lstm>=transformer@100",
                                             "transformer20>=transformer100-0.02"))
    table = "; ".join(f"s{s} {a[0]}{w}={f1[(s, a, w)]:.3f}" for s in ORDERING_SEEDS
                      for w in (20, 100) for a in ("lstm", "transformer"))
    detail = f"votes {dict(votes)} of {len(ORDERING_SEEDS)} seeds | {table}"
    assert criterion(3, ok, detail)


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_4_reward_machine_discrimination(criterion, reward_machine):
    held_out, _ = build_dataset(DatasetSpec(per_class_count=120, window_sizes=(20,), seed=777))
    wins = extract_windows(held_out, 20, 777)
    assert check_window_labels(held_out, wins, CFG) == []
    correct = [w for w in wins if w.label == 1][:500]
    errors = [w for w in wins if w.label == 0][:500]
    assert len(correct) == len(errors) == 500
    g_ok = reward_machine.grade_many([(*w.context, w.next) for w in correct])
    g_bad = reward_machine.grade_many([(*w.context, w.next) for w in errors])
    hi, lo = float(np.mean(g_ok > 0.5)), float(np.mean(g_bad < 0.5))
    detail = f"correct logs graded > 0.5: {hi:.3f}; single-error logs graded < 0.5: {lo:.3f} (targets >= 0.90)"
    assert criterion(4, hi >= 0.9 and lo >= 0.9, detail)


# -- 5 ------------------------------------------------------------------------------------

def best_agent(agents):
    return min(agents, key=lambda a: (sum(r.incorrect_count for r in a[2]), a[0]))


def test_criterion_5_rl_synthesis(criterion, agents):
    per_seed = {seed: sum(r.incorrect_count for r in reports) for seed, _, reports in agents}
    seed, res, reports = best_agent(agents)
    curve = [r["mean_reward"] for r in res.curve]
    first, last = float(np.mean(curve[:100])), float(np.mean(curve[-100:]))
    modes = ", ".join(f"{r.mode} {r.incorrect_count}/{r.ap_count}AP/{r.vp_count}VP" for r in reports)
    detail = (f"incorrect per seed {per_seed}; best seed {seed}: {modes}; "
              f"reward first/last 100 episodes {first:.3f}/{last:.3f} (target 0 incorrect)")
    assert criterion(5, per_seed[seed] == 0, detail)


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_6_controller_extraction(criterion, agents):
    _, res, _ = best_agent(agents)
    learned = extract(res.policy.controller())
    reference = extract()
    rep = equivalence(learned, reference)
    key = {(0b11000000, "AP"), (0b00100000, "VP")}
    has_key = [{(s, lab) for s, lab, _ in g.edges} >= key for g in (learned, reference)]
    ok = rep.equivalent and all(has_key)
    diff = rep.diff_lines()
    detail = (f"learned {len(learned.states)} states/{len(learned.edges)} edges, reference "
              f"{len(reference.states)}/{len(reference.edges)}; 11000000-AP and 00100000-VP present in "
              f"learned={has_key[0]} reference={has_key[1]}; {len(diff)} differences"
              + (f", first: {diff[0]}" if diff else ""))
    assert criterion(6, ok, detail)


# -- 7 ------------------------------------------------------------------------------------

def random_prop(rng, depth):
    if depth == 0 or rng.random() < 0.4:
        k = rng.integers(0, 7)
        return PTrue() if k == 5 else PFalse() if k == 6 else Var(ALPHABET[k])
    if rng.random() < 0.5:
        return PNot(random_prop(rng, depth - 1))
    return PAnd(random_prop(rng, depth - 1), random_prop(rng, depth - 1))


def random_formula(rng, depth):
    """Formula of depth at most ``depth``; atoms count as depth 0."""
    if depth == 0 or rng.random() < 0.25:
        kind = rng.integers(0, 4)
        op, c = list(OPS)[rng.integers(0, 5)], int(rng.integers(0, 9))
        if kind == 0:
            return Range(random_prop(rng, 1))
        if kind == 1:
            return Point(random_prop(rng, 1))
        if kind == 2:
            return Len(op, c)
        return Sum(random_prop(rng, 1), op, c)
    kind = rng.integers(0, 3)
    if kind == 0:
        return Not(random_formula(rng, depth - 1))
    make = And if kind == 1 else Chop
    return make(random_formula(rng, depth - 1), random_formula(rng, depth - 1))


def test_criterion_7_ddc_semantics(criterion):
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(1000):
        n = int(rng.integers(0, 9))
        trace = [ALPHABET[k] for k in rng.integers(0, 5, size=n)]
        b = int(rng.integers(0, n + 1))
        e = int(rng.integers(b, n + 1))
        f = random_formula(rng, 3)
        agree += eval_ddc(trace, b, e, f) == oracle(f, trace, b, e)
    violations = Counter()
    for mode in ALL_MODES:
        for seed in range(10):
            syms = simulate_symbols(mode, CFG, HeartParams(), 10_000, seed)
            for v in check_pacing_requirements(syms, CFG):
                violations[v.requirement] += 1
    rate_violations = violations["lri"] + violations["url"]
    detail = (f"oracle agreement {agree}/1000; reference traces 10,000 ticks x 6 modes x 10 seeds: "
              f"LRI {violations['lri']}, URL {violations['url']} violations (vri {violations['vri']})")
    assert criterion(7, agree == 1000 and rate_violations == 0, detail)


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_8_dataset_fidelity(criterion):
    spec = DatasetSpec(per_class_count=1000, seed=0)
    traces, table = build_dataset(spec)
    counts = (table["total"]["pos"], table["total"]["neg"], table["complete-av-block"]["pos"])
    mismatched = {}
    n_windows = 0
    for w in spec.window_sizes:
        wins = extract_windows(traces, w, 0)
        n_windows += len(wins)
        mismatched[w] = len(check_window_labels(traces, wins, CFG))
    ok = counts == (5000, 6000, 0) and not any(mismatched.values())
    detail = (f"positive {counts[0]}, negative {counts[1]}, AV-block positive {counts[2]}; "
              f"label mismatches per window {mismatched} over {n_windows} windows")
    assert criterion(8, ok, detail)


# -- 9 ------------------------------------------------------------------------------------

def artifact_hashes(out):
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {a["path"]: a["sha256"] for s in manifest["stages"].values() for a in s["artifacts"]}
    on_disk = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())
               if p.name != "manifest.json"}
    return manifest, listed, on_disk


def test_criterion_9_determinism(criterion, tmp_path):
    runs = []
    for k in (1, 2):
        out = tmp_path / f"run{k}"
        code = cli_main(["pipeline", "--config", str(SMOKE), "--out-dir", str(out), "--threads", "1",
                         "--quiet"])
        runs.append((code, *artifact_hashes(out)))
    (c1, m1, l1, d1), (c2, m2, l2, d2) = runs
    same = l1 == l2 and d1 == d2
    differing = sorted(k for k in d1 if d1.get(k) != d2.get(k))
    detail = (f"exit codes {c1}/{c2}; {len(m1['stages'])} stages; {len(d1)} artifacts, "
              f"{len(differing)} differ" + (f" ({', '.join(differing[:5])})" if differing else ""))
    assert criterion(9, c1 == c2 == 0 and same and len(m1["stages"]) == 7 and l1 == {
        k: v for k, v in d1.items() if k in l1}, detail)
