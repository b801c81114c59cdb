"""Command-line entry point: ``pacelearn <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import dataset_gen as dg
from . import ddc_verifier as ddc
from . import dfa_extract as dfa
from . import plotting
from . import rl_agent as rl
from . import rm_trainer as rmt
from .config import RunConfig
from .heart_model import ALL_MODES, HeartMode
from .loop import reference_controller
from .seq_classifiers import load_model
from .trace_model import read_traces, write_traces

STAGES = ("generate", "windows", "train-rm", "eval-rm", "train-agent", "verify", "extract-dfa")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class Logger:
    """``key=value`` records on stderr (or one JSON object per line)."""

    def __init__(self, quiet: bool = False, json_lines: bool = False, stream=None):
        self.quiet = quiet
        self.json_lines = json_lines
        self.stream = stream or sys.stderr

    def __call__(self, event: str, **fields) -> None:
        if self.quiet and event not in ("error", "gate"):
            return
        if self.json_lines:
            line = json.dumps({"event": event, **fields}, sort_keys=True, default=str)
        else:
            parts = [f"event={event}"]
            for k, v in fields.items():
                if isinstance(v, float):
                    v = f"{v:.6g}"
                v = str(v)
                parts.append(f"{k}={json.dumps(v) if (' ' in v or not v) else v}")
            line = " ".join(parts)
        print(line, file=self.stream, flush=True)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory, config and the manifest of everything written."""

    def __init__(self, cfg: RunConfig, log: Logger):
        self.cfg = cfg
        self.log = log
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        else:
            self.manifest = {"seed": cfg.seed, "stages": {}}
        self.manifest["seed"] = cfg.seed
        self.manifest["config"] = json.loads(json.dumps(cfg.to_dict(), default=list))

    def path(self, name: str) -> Path:
        return self.out / name

    def record(self, stage: str, artifacts: Sequence[tuple[Path, int]], status: str = "ok", **extra) -> None:
        entry = {"status": status,
                 "artifacts": [{"path": p.name, "sha256": sha256_file(p), "seed": s}
                               for p, s in sorted(artifacts, key=lambda a: a[0].name)],
                 **extra}
        self.manifest["stages"][stage] = entry
        self.save_manifest()

    def fail(self, stage: str, message: str) -> None:
        self.manifest["stages"][stage] = {"status": "failed", "error": message, "artifacts": []}
        self.save_manifest()

    def save_manifest(self) -> None:
        order = {s: i for i, s in enumerate(STAGES)}
        self.manifest["stages"] = dict(sorted(self.manifest["stages"].items(), key=lambda kv: order.get(kv[0], 99)))
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=False) + "\n", encoding="utf-8")


# -- stages ---------------------------------------------------------------------------

def stage_generate(run: Run) -> None:
    cfg = run.cfg
    spec = dataclasses.replace(cfg.dataset, seed=cfg.sub_seed("dataset", cfg.dataset.seed))
    traces, table = dg.build_dataset(spec, cfg.timing, cfg.heart)
    tpath = run.path("traces.jsonl")
    write_traces(traces, tpath)
    cpath = run.path("class_table.csv")
    with open(cpath, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "positive", "negative", "total"])
        for mode, row in table.items():
            w.writerow([mode, row["pos"], row["neg"], row["pos"] + row["neg"]])
    run.log("stage", name="generate", traces=len(traces), positive=table["total"]["pos"],
            negative=table["total"]["neg"])
    run.record("generate", [(tpath, spec.seed), (cpath, spec.seed)])


def _load_traces(run: Run, stage: str):
    tpath = run.path("traces.jsonl")
    if not tpath.exists():
        raise StageError(stage, f"missing {tpath}; run 'generate' first")
    return read_traces(tpath)


def stage_windows(run: Run) -> None:
    cfg = run.cfg
    traces = _load_traces(run, "windows")
    arts = []
    for w in cfg.dataset.window_sizes:
        seed = cfg.sub_seed("windows", w)
        wins = dg.extract_windows(traces, w, seed)
        bad = dg.check_window_labels(traces, wins, cfg.timing)
        if bad:
            raise StageError("windows", f"{len(bad)} window labels disagree with the reference (window {w})")
        path = run.path(f"windows_w{w}.jsonl")
        dg.write_windows(wins, path)
        arts.append((path, seed))
        run.log("stage", name="windows", window=w, samples=len(wins))
    run.record("windows", arts)


def _windows_for(run: Run, w: int, stage: str) -> list[dg.LabeledWindow]:
    path = run.path(f"windows_w{w}.jsonl")
    if not path.exists():
        raise StageError(stage, f"missing {path}; run 'windows' first")
    return dg.read_windows(path)


def _splits(run: Run, wins):
    splits = dg.split_folds(wins, run.cfg.sub_seed("folds"))
    for s in splits:
        s.check_disjoint()
    return splits[:run.cfg.cv.n_configs]


def _train_job(args):
    spec, split, wins, ckpt = args
    with threadpool_limits(1):
        res = rmt.train(spec, split, wins, ckpt)
    return split.config_id, res.curves, res.best_epoch, res.best_val_f1


def stage_train_rm(run: Run) -> None:
    cfg = run.cfg
    arts = []
    selection = {}
    for w in cfg.cv.windows:
        wins = _windows_for(run, w, "train-rm")
        splits = _splits(run, wins)
        for arch in cfg.cv.archs:
            spec = rmt.TrainSpec(**{**cfg.train.__dict__, "arch": arch, "window": w,
                                    "seed": cfg.sub_seed(f"rm/{arch}", w)})
            jobs = [(spec, s, wins, run.path(f"rm_{arch}_w{w}_c{s.config_id}.json")) for s in splits]
            if cfg.threads > 1:
                with ProcessPoolExecutor(cfg.threads) as pool:
                    results = list(pool.map(_train_job, jobs))
            else:
                results = [_train_job(j) for j in jobs]
            curve_path = run.path(f"rm_curves_{arch}_w{w}.csv")
            with open(curve_path, "w", encoding="utf-8", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["config_id", "epoch", "train_loss", "val_loss", "val_f1"])
                for cid, curves, _, _ in results:
                    for c in curves:
                        wr.writerow([cid, c["epoch"], f"{c['train_loss']:.6f}", f"{c['val_loss']:.6f}",
                                     f"{c['val_f1']:.6f}"])
            arts.append((curve_path, spec.seed))
            for (_, split, _, ckpt), (cid, curves, best_epoch, best_f1) in zip(jobs, results):
                arts.append((ckpt, spec.seed))
                run.log("train", arch=arch, window=w, config_id=cid, epochs=len(curves),
                        best_epoch=best_epoch, val_f1=best_f1)
                if arch == cfg.cv.agent_arch and w == cfg.cv.agent_window:
                    if best_f1 > selection.get("val_f1", -1.0):
                        selection = {"val_f1": best_f1, "path": ckpt, "config_id": cid}
            fig = plotting.training_curves(results[0][1], run.path(f"rm_curve_{arch}_w{w}.png"),
                                           f"{arch}, window {w}, configuration {results[0][0]}")
            arts.append((fig, spec.seed))
    if not selection:
        raise StageError("train-rm", "no reward machine trained for the agent's architecture and window")
    agent_rm = run.path("rm_agent.json")
    shutil.copyfile(selection["path"], agent_rm)
    arts.append((agent_rm, cfg.sub_seed(f"rm/{cfg.cv.agent_arch}", cfg.cv.agent_window)))
    run.log("stage", name="train-rm", agent_rm_config=selection["config_id"], agent_rm_val_f1=selection["val_f1"])
    run.record("train-rm", arts, agent_rm_config=selection["config_id"])


def stage_eval_rm(run: Run) -> list[rmt.AggregateReport]:
    cfg = run.cfg
    reports, aggs = [], []
    for w in cfg.cv.windows:
        wins = _windows_for(run, w, "eval-rm")
        by_id = {x.sample_id: x for x in wins}
        splits = _splits(run, wins)
        for arch in cfg.cv.archs:
            block = []
            for s in splits:
                ckpt = run.path(f"rm_{arch}_w{w}_c{s.config_id}.json")
                if not ckpt.exists():
                    raise StageError("eval-rm", f"missing checkpoint {ckpt.name}; run 'train-rm' first")
                model = load_model(ckpt)
                m = rmt.evaluate(model, [by_id[i] for i in s.test])
                block.append(rmt.FoldReport(arch, w, s.config_id, m))
            reports.extend(block)
            agg = rmt.aggregate(block, expected=len(splits))
            aggs.append(agg)
            run.log("eval", arch=arch, window=w, f1_mean=agg.f1[0], f1_std=agg.f1[1])
    mpath, apath = run.path("rm_metrics.csv"), run.path("rm_table.csv")
    rmt.write_metrics_csv(reports, mpath)
    rmt.write_aggregate_csv(aggs, apath)
    fig = plotting.f1_boxplot(reports, run.path("rm_f1.png"))
    run.record("eval-rm", [(mpath, cfg.sub_seed("folds")), (apath, cfg.sub_seed("folds")),
                           (fig, cfg.sub_seed("folds"))])
    return aggs


def _agent_cfg(cfg: RunConfig) -> rl.AgentTrainConfig:
    return rl.AgentTrainConfig(**{**cfg.agent.__dict__, "seed": cfg.sub_seed("agent", cfg.agent.seed)})


def stage_train_agent(run: Run, rm_path: str | Path | None = None) -> None:
    cfg = run.cfg
    rm_path = Path(rm_path) if rm_path else run.path("rm_agent.json")
    if not rm_path.exists():
        raise StageError("train-agent", f"missing reward machine checkpoint {rm_path}")
    rm = rmt.RewardMachine(load_model(rm_path))
    acfg = _agent_cfg(cfg)
    t0 = time.perf_counter()

    def progress(row):
        if row["episode"] % 500 == 0:
            run.log("episode", **row)

    res = rl.fit(acfg, rm, config=cfg.timing, params=cfg.heart, progress=progress)
    ppath = run.path("policy.json")
    rl.save_policy(res.policy, ppath, {"seed": acfg.seed})
    cpath = run.path("agent_curve.csv")
    with open(cpath, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean_reward", "done_rate"])
        for r in res.curve:
            w.writerow([r["episode"], f"{r['mean_reward']:.6f}", f"{r['done_rate']:.6f}"])
    fig = plotting.reward_curve(res.curve, run.path("agent_curve.png"))
    run.log("stage", name="train-agent", episodes=acfg.episodes, seconds=round(time.perf_counter() - t0, 1))
    run.record("train-agent", [(ppath, acfg.seed), (cpath, acfg.seed), (fig, acfg.seed)])


def _controller(run: Run, agent: str | Path | None, stage: str, reference: bool = False):
    if reference:
        return reference_controller
    path = Path(agent) if agent else run.path("policy.json")
    if not path.exists():
        raise StageError(stage, f"missing policy checkpoint {path}")
    return rl.load_policy(path).controller()


def stage_verify(run: Run, agent=None, steps: int | None = None, mode: str = "all",
                 reference: bool = False) -> list[ddc.VerifyReport]:
    cfg = run.cfg
    controller = _controller(run, agent, "verify", reference)
    modes = ALL_MODES if mode == "all" else (HeartMode.parse(mode),)
    steps = steps or cfg.verify.steps
    seed = cfg.sub_seed("verify", cfg.verify.seed)
    reports = ddc.verify_all_modes(controller, steps, seed, cfg.timing, cfg.heart, modes)
    vpath = run.path("verify.csv")
    with open(vpath, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "steps", "ap", "vp", "incorrect", "requirement_violations"])
        for r in reports:
            w.writerow([r.mode, r.steps, r.ap_count, r.vp_count, r.incorrect_count, r.requirement_violations])
            run.log("verify", mode=r.mode, steps=r.steps, ap=r.ap_count, vp=r.vp_count,
                    incorrect=r.incorrect_count, violations=r.requirement_violations)
        w.writerow(["total", sum(r.steps for r in reports), sum(r.ap_count for r in reports),
                    sum(r.vp_count for r in reports), sum(r.incorrect_count for r in reports),
                    sum(r.requirement_violations for r in reports)])
    fig = plotting.verify_bars(reports, run.path("verify.png"))
    run.record("verify", [(vpath, seed), (fig, seed)])
    return reports


def stage_extract_dfa(run: Run, agent=None, out: str | None = None, reference: bool = False) -> dfa.EquivalenceReport:
    cfg = run.cfg
    controller = _controller(run, agent, "extract-dfa", reference)
    seeds = tuple(cfg.sub_seed("dfa", s) for s in cfg.verify.dfa_seeds)
    learned = dfa.extract(controller, cfg.verify.dfa_horizon, seeds, cfg.timing, cfg.heart)
    ref = dfa.extract(reference_controller, cfg.verify.dfa_horizon, seeds, cfg.timing, cfg.heart)
    dot_path = Path(out) if out else run.path("dfa.dot")
    json_path = dot_path.with_suffix(".json")
    dfa.write_dfa(learned, dot_path, json_path)
    ref_dot = run.path("dfa_reference.dot")
    dfa.write_dfa(ref, ref_dot, ref_dot.with_suffix(".json"))
    report = dfa.equivalence(learned, ref)
    diff_path = run.path("dfa_diff.txt")
    lines = report.diff_lines()
    conflicts = learned.conflicts()
    lines += [f"nondeterministic state {format(s, '08b')}: {c}" for s, c in conflicts.items()]
    diff_path.write_text(("equivalent\n" if report.equivalent else "") + "".join(l + "\n" for l in lines),
                         encoding="utf-8")
    run.log("dfa", states=len(learned.states), edges=len(learned.edges), equivalent=report.equivalent,
            coverage=dfa.coverage(learned, ref), conflicts=len(conflicts))
    arts = [(p, seeds[0]) for p in (dot_path, json_path, ref_dot, ref_dot.with_suffix(".json"), diff_path)
            if p.parent.resolve() == run.out.resolve()]
    run.record("extract-dfa", arts, equivalent=report.equivalent)
    return report


def run_pipeline(run: Run) -> int:
    cfg = run.cfg
    gates = cfg.gates
    failed = []
    aggs = reports = eq = None
    steps: list[tuple[str, Callable[[], object]]] = [
        ("generate", lambda: stage_generate(run)),
        ("windows", lambda: stage_windows(run)),
        ("train-rm", lambda: stage_train_rm(run)),
        ("eval-rm", lambda: stage_eval_rm(run)),
        ("train-agent", lambda: stage_train_agent(run)),
        ("verify", lambda: stage_verify(run)),
        ("extract-dfa", lambda: stage_extract_dfa(run)),
    ]
    results = {}
    for name, fn in steps:
        try:
            results[name] = fn()
        except Exception as exc:  # keep partial artifacts, mark the stage
            run.fail(name, str(exc))
            run.log("error", stage=name, message=str(exc))
            return 1
    aggs, reports, eq = results["eval-rm"], results["verify"], results["extract-dfa"]
    agent_agg = [a for a in aggs if a.arch == cfg.cv.agent_arch and a.window == cfg.cv.agent_window]
    if agent_agg and agent_agg[0].f1[0] < gates.min_mean_f1:
        failed.append(f"mean F1 {agent_agg[0].f1[0]:.4f} < {gates.min_mean_f1}")
    incorrect = sum(r.incorrect_count for r in reports)
    if gates.max_incorrect is not None and incorrect > gates.max_incorrect:
        failed.append(f"{incorrect} incorrect actions > {gates.max_incorrect}")
    if gates.require_dfa_match and not eq.equivalent:
        failed.append("extracted controller differs from the reference")
    run.manifest["gates"] = {"passed": not failed, "failures": failed}
    run.save_manifest()
    run.log("gate", passed=not failed, failures="; ".join(failed) or "none")
    return 0 if not failed else 2


def ddc_check(trace_path: str, formula: str, cfg: RunConfig, log: Logger, out=None) -> int:
    """Evaluate a formula (or a named requirement) over every trace in a JSONL file."""
    traces = read_traces(trace_path)
    named = {"lri": "lri", "url": "url", "vri": "vri", "requirements": "requirements"}
    out = out or sys.stdout
    w = csv.writer(out, lineterminator="\n")
    bad = 0
    if formula in named:
        w.writerow(["trace", "mode", "label", "requirement", "begin", "end", "length"])
        for i, tr in enumerate(traces):
            for v in ddc.check_pacing_requirements(tr, cfg.timing):
                if formula in ("requirements", v.requirement):
                    w.writerow([i, tr.mode, tr.label, v.requirement, v.begin, v.end, v.length])
                    bad += 1
        log("ddc", traces=len(traces), violations=bad)
    else:
        f = ddc.parse_formula(formula)
        w.writerow(["trace", "mode", "label", "holds"])
        for i, tr in enumerate(traces):
            holds = ddc.eval_ddc(tr, 0, tr.length, f)
            bad += not holds
            w.writerow([i, tr.mode, tr.label, int(holds)])
        log("ddc", traces=len(traces), failing=bad)
    return 0


# -- argument parsing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", help="artifact directory (overrides the config)")
    common.add_argument("--threads", type=int, help="BLAS threads and fold-training workers; 1 is deterministic")
    common.add_argument("--quiet", action="store_true", help="only log errors and gate results")
    common.add_argument("--json-logs", action="store_true", help="log one JSON object per line")

    p = argparse.ArgumentParser(prog="pacelearn", description="Learned pacemaker controller pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate the labelled trace corpus")
    sub.add_parser("windows", parents=[common], help="extract labelled windows for every window size")
    sub.add_parser("train-rm", parents=[common], help="train reward machines over the fold configurations")
    sub.add_parser("eval-rm", parents=[common], help="test-fold metrics, aggregate table and F1 figure")
    ta = sub.add_parser("train-agent", parents=[common], help="train the pacing agent against a reward machine")
    ta.add_argument("--rm", help="reward machine checkpoint (default: <out-dir>/rm_agent.json)")
    ta.add_argument("--episodes", type=int)
    ta.add_argument("--replay", type=int)
    ta.add_argument("--log-len", type=int)
    ta.add_argument("--explore", type=float, help="initial exploration rate")
    ta.add_argument("--lambda", dest="discount", type=float, help="discount factor")
    ve = sub.add_parser("verify", parents=[common], help="lockstep verification against the reference")
    ve.add_argument("--agent", help="policy checkpoint (default: <out-dir>/policy.json)")
    ve.add_argument("--reference", action="store_true", help="verify the reference automaton itself")
    ve.add_argument("--steps", type=int)
    ve.add_argument("--mode", default="all")
    ex = sub.add_parser("extract-dfa", parents=[common], help="extract the controller graph and compare it")
    ex.add_argument("--agent")
    ex.add_argument("--reference", action="store_true", help="extract from the reference automaton")
    ex.add_argument("--out", help="DOT output path (a JSON edge list is written next to it)")
    dc = sub.add_parser("ddc-check", parents=[common], help="check traces against a formula")
    dc.add_argument("--trace", required=True, help="JSONL trace file")
    dc.add_argument("--formula", default="requirements",
                    help="lri, url, vri, requirements, or a prefix formula like '(chop (range (sym VP)) (len <= 40))'")
    sub.add_parser("pipeline", parents=[common], help="run every stage and check the configured gates")
    return p


def _apply_agent_flags(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    for flag, key in (("episodes", "episodes"), ("replay", "replay_size"), ("log_len", "log_len"),
                      ("explore", "explore_start"), ("discount", "discount")):
        v = getattr(args, flag, None)
        if v is not None:
            changes[key] = v
    if not changes:
        return cfg
    agent = dataclasses.replace(cfg.agent, **changes)
    cv = cfg.cv
    if "log_len" in changes:
        cv = dataclasses.replace(cv, agent_window=changes["log_len"])
    return dataclasses.replace(cfg, agent=agent, cv=cv)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = Logger(args.quiet, args.json_logs)
    try:
        cfg = config_mod.load_config(args.config)
        cfg = config_mod.override(cfg, seed=args.seed, out_dir=args.out_dir, threads=args.threads)
        cfg = _apply_agent_flags(cfg, args)
        cfg.validate()
    except (OSError, ValueError, TypeError) as exc:
        log("error", stage="config", message=str(exc))
        return 2
    with threadpool_limits(cfg.threads):
        if args.command == "ddc-check":
            try:
                return ddc_check(args.trace, args.formula, cfg, log)
            except (OSError, ValueError) as exc:
                log("error", stage="ddc-check", message=str(exc))
                return 1
        run = Run(cfg, log)
        if args.command == "pipeline":
            return run_pipeline(run)
        actions = {
            "generate": lambda: stage_generate(run),
            "windows": lambda: stage_windows(run),
            "train-rm": lambda: stage_train_rm(run),
            "eval-rm": lambda: stage_eval_rm(run),
            "train-agent": lambda: stage_train_agent(run, args.rm),
            "verify": lambda: stage_verify(run, args.agent, args.steps, args.mode, args.reference),
            "extract-dfa": lambda: stage_extract_dfa(run, args.agent, args.out, args.reference),
        }
        try:
            actions[args.command]()
        except Exception as exc:
            run.fail(args.command, str(exc))
            log("error", stage=args.command, message=str(exc))
            return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
