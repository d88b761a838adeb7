"""Experiment runner.

    treecredit run <config> [--resume] [--output-dir DIR]
    treecredit sweep <config> --axis {scheme,G,J,K} --values v1,v2,...
    treecredit report <dir>
    treecredit verify

Exit codes: 0 ok, 1 config error, 2 runtime failure, 3 verification failure.

Layout of one run (``<output_dir>/<name>/seed_<s>/``)::

    metrics.jsonl    header line, then one record per step (see below)
    timing.jsonl     wall-clock seconds per record; kept apart so that
                     metrics.jsonl is byte-identical across repeats
    ckpt/step_XXXXXXXX.tckpt

Metrics records are ``{"kind": "train" | "eval" | "abort", "step", "seed",
"scheme", ...}``.  Train records carry the step metrics of
:func:`treecredit.optim.train_step`; eval records carry ``eval_reward`` (greedy
(1, 1, 1) inference on a fixed task set that does not depend on the seed).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .env import ConfigError, Task, generate_task
from .optim import MomentumState, RewardScheme, train_step
from .policy import (
    Checkpoint,
    PolicyDivergence,
    PolicyParams,
    Role,
    load_checkpoint,
    prior_params,
    role_specs,
    save_checkpoint,
    zero_params,
)
from .rollout import infer

SCHEMA_NAME = "treecredit-metrics"
SCHEMA_VERSION = 1
THRESHOLD = 0.9
AXES = ("scheme", "G", "J", "K")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class RunAborted(RuntimeError):
    """Training hit a numeric failure; a checkpoint of the last good state was written."""


# --- seeds and tasks ------------------------------------------------------


def _seed_int(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0] >> np.uint64(2))


def train_task_seed(seed: int, step: int) -> int:
    """Task of training step ``step``; depends only on (seed, step), so every
    cell of a sweep sees the same task stream."""
    return _seed_int(seed, step, 1)


def step_seed(seed: int, step: int) -> int:
    return _seed_int(seed, step, 2)


def eval_tasks(cfg: ExperimentConfig) -> list[Task]:
    return [generate_task(cfg.run.eval_seed + m, cfg.task) for m in range(cfg.run.eval_tasks)]


def initial_policies(cfg: ExperimentConfig) -> dict[Role, PolicyParams]:
    specs = role_specs(cfg.task.n_slots, cfg.task.n_values)
    out = {}
    for role, spec in specs.items():
        if cfg.policy.init == "zero" or (cfg.policy.init == "prior_writers" and role is Role.RESPONDER):
            out[role] = zero_params(role, spec)
        else:
            out[role] = prior_params(role, spec, cfg.policy.prior_strength, cfg.policy.skip_margin)
    return out


def greedy_eval(policies, tasks: list[Task], cfg: ExperimentConfig) -> float:
    rewards = [infer(policies, t, responder_max_len=cfg.train.responder_max_len).reward for t in tasks]
    return float(np.mean(rewards))


# --- one seeded run -------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    run_dir: Path
    final_step: int
    final_eval: float
    steps_to_threshold: int | None


def run_dir_for(cfg: ExperimentConfig, seed: int, root: Path | None = None) -> Path:
    base = Path(root) if root is not None else Path(cfg.run.output_dir)
    return base / cfg.name / f"seed_{seed}"


def _ckpt_path(run_dir: Path, step: int) -> Path:
    return run_dir / "ckpt" / f"step_{step:08d}.tckpt"


def latest_checkpoint(run_dir: Path) -> Path | None:
    found = sorted((run_dir / "ckpt").glob("step_*.tckpt"))
    return found[-1] if found else None


def _header(cfg: ExperimentConfig, seed: int) -> dict:
    t = cfg.train
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "run": cfg.name,
        "seed": seed,
        "scheme": t.reward_scheme.value,
        "G": t.G,
        "J": t.J,
        "K": t.K,
        "config_hash": cfg.seed_hash(seed),
        "config": cfg.to_dict(),
    }


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _truncate_metrics(path: Path, last_step: int) -> list[str]:
    keep = []
    with open(path) as fh:
        for n, line in enumerate(fh):
            if n == 0 or json.loads(line)["step"] <= last_step:
                keep.append(line)
    return keep


def train_seed(
    cfg: ExperimentConfig,
    seed: int,
    root: Path | None = None,
    resume: bool = False,
    evals: list[Task] | None = None,
    log=None,
) -> SeedResult:
    """Train one seed, writing metrics, timings and checkpoints."""
    run_dir = run_dir_for(cfg, seed, root)
    metrics_path, timing_path = run_dir / "metrics.jsonl", run_dir / "timing.jsonl"
    evals = eval_tasks(cfg) if evals is None else evals
    scheme = cfg.train.reward_scheme.value
    specs = role_specs(cfg.task.n_slots, cfg.task.n_values)
    config_hash = cfg.seed_hash(seed)

    policies = initial_policies(cfg)
    momentum = MomentumState()
    start = 0
    last_eval, reached = None, None
    ckpt_file = latest_checkpoint(run_dir) if resume else None
    if ckpt_file is not None:
        ckpt = load_checkpoint(ckpt_file, specs)
        if ckpt.config_hash != config_hash:
            raise ConfigError(f"{ckpt_file}: checkpoint was written by a different config (hash {ckpt.config_hash})")
        policies, start = dict(ckpt.params), ckpt.step
        momentum.velocity = {r: v.copy() for r, v in ckpt.velocity.items()}
        kept = _truncate_metrics(metrics_path, start)
        for line in kept[1:]:
            rec = json.loads(line)
            if rec["kind"] == "eval":
                last_eval = rec["eval_reward"]
                if reached is None and last_eval >= THRESHOLD:
                    reached = rec["step"]
        metrics_fh = open(metrics_path, "w")
        metrics_fh.writelines(kept)
        timing_kept = _truncate_metrics(timing_path, start) if timing_path.exists() else []
        timing_fh = open(timing_path, "w")
        timing_fh.writelines(timing_kept)
    else:
        if run_dir.exists():
            for old in (run_dir / "ckpt").glob("*.tckpt"):
                old.unlink()
        (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(metrics_path, "w")
        timing_fh = open(timing_path, "w")
        metrics_fh.write(_dump(_header(cfg, seed)) + "\n")
        timing_fh.write(_dump({"schema": "treecredit-timing", "version": SCHEMA_VERSION, "seed": seed}) + "\n")

    t0 = time.perf_counter()

    def emit(rec):
        metrics_fh.write(_dump(rec) + "\n")
        timing_fh.write(_dump({"step": rec["step"], "kind": rec["kind"], "wall": time.perf_counter() - t0}) + "\n")

    def evaluate(step):
        nonlocal last_eval, reached
        last_eval = greedy_eval(policies, evals, cfg)
        if reached is None and last_eval >= THRESHOLD:
            reached = step
        emit({"kind": "eval", "step": step, "seed": seed, "scheme": scheme, "eval_reward": last_eval})
        if log:
            log(f"[{cfg.name} seed={seed}] step {step:5d} eval {last_eval:.3f}")

    def stop_now():
        return cfg.run.stop_at is not None and last_eval is not None and last_eval >= cfg.run.stop_at

    try:
        if start == 0:
            evaluate(0)
        step = start
        while step < cfg.run.steps and not stop_now():
            step += 1
            task = generate_task(train_task_seed(seed, step), cfg.task)
            try:
                new, m = train_step(policies, task, cfg.train, step_seed(seed, step), momentum)
            except PolicyDivergence as err:
                save_checkpoint(run_dir / "ckpt" / "diverged.tckpt", Checkpoint(step - 1, config_hash, policies, momentum.velocity))
                emit({"kind": "abort", "step": step, "seed": seed, "scheme": scheme, "reason": str(err)})
                raise RunAborted(f"[{cfg.name} seed={seed}] step {step}: {err}") from err
            policies = new
            emit({"kind": "train", "step": step, "seed": seed, "scheme": scheme, **m})
            if step % cfg.run.eval_cadence == 0 or step == cfg.run.steps:
                evaluate(step)
            if cfg.run.checkpoint_every and step % cfg.run.checkpoint_every == 0:
                metrics_fh.flush()
                save_checkpoint(_ckpt_path(run_dir, step), Checkpoint(step, config_hash, policies, momentum.velocity))
        if not cfg.run.checkpoint_every or step % cfg.run.checkpoint_every:
            save_checkpoint(_ckpt_path(run_dir, step), Checkpoint(step, config_hash, policies, momentum.velocity))
    finally:
        metrics_fh.close()
        timing_fh.close()
    return SeedResult(seed, run_dir, step, float(last_eval), reached)


def run_experiment(cfg: ExperimentConfig, root: Path | None = None, resume: bool = False, log=None) -> list[SeedResult]:
    evals = eval_tasks(cfg)
    return [train_seed(cfg, s, root, resume, evals, log) for s in cfg.train.seeds]


# --- sweeps ---------------------------------------------------------------


def parse_axis_values(axis: str, values: str) -> list:
    if axis not in AXES:
        raise ConfigError(f"--axis must be one of {AXES}, got {axis!r}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values is empty")
    if axis == "scheme":
        for v in items:
            try:
                RewardScheme(v)
            except ValueError:
                raise ConfigError(f"--values: unknown reward scheme {v!r}") from None
        return items
    try:
        return [int(v) for v in items]
    except ValueError:
        raise ConfigError(f"--values for axis {axis} must be integers, got {values!r}") from None


def cell_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    key = "reward_scheme" if axis == "scheme" else axis
    cell = cfg.with_overrides("train", **{key: value})
    cell = ExperimentConfig(f"{cfg.name}__{axis}={value}", cell.task, cell.train, cell.policy, cell.run, cfg.source, cfg.lines)
    cell.validate()
    return cell


def sweep(cfg: ExperimentConfig, axis: str, values: list, root: Path | None = None, log=None) -> Path:
    """One run per value per seed; writes ``sweep_<axis>.csv`` of final greedy eval."""
    cells = [cell_config(cfg, axis, v) for v in values]  # validate everything first
    base = Path(root) if root is not None else Path(cfg.run.output_dir)
    evals = eval_tasks(cfg)
    rows = []
    for value, cell in zip(values, cells):
        results = [train_seed(cell, s, base, False, evals, log) for s in cell.train.seeds]
        finals = np.array([r.final_eval for r in results])
        reached = [r.steps_to_threshold for r in results if r.steps_to_threshold is not None]
        rows.append(
            {
                "axis": axis,
                "value": value,
                "n_seeds": len(results),
                "final_eval_mean": float(finals.mean()),
                "final_eval_std": float(finals.std()),
                "seeds_reaching_0.9": len(reached),
                "finals": " ".join(f"{x:.4f}" for x in finals),
            }
        )
    out = base / f"{cfg.name}__sweep_{axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return out


# --- reports --------------------------------------------------------------


@dataclass
class RunSummary:
    path: Path
    run: str
    seed: int
    scheme: str
    G: int
    J: int
    K: int
    last_step: int
    final_eval: float
    best_eval: float
    steps_to_threshold: int | None
    final_train_reward: float | None
    curve: list[tuple[int, float, float | None]]


def read_metrics(path: Path) -> RunSummary:
    """Parse and check one metrics file; raises ValueError describing the problem."""
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValueError("empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise ValueError(f"line 1: bad JSON ({err.msg})") from None
    if header.get("schema") != SCHEMA_NAME or header.get("version") != SCHEMA_VERSION:
        raise ValueError("line 1: missing or unsupported schema header")
    last_step, train_reward, evals = -1, {}, []
    for n, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            kind, step = rec["kind"], int(rec["step"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise ValueError(f"line {n}: malformed record") from None
        if step < last_step:
            raise ValueError(f"line {n}: step {step} goes backwards")
        last_step = step
        if kind == "train":
            train_reward[step] = rec["mean_reward"]
        elif kind == "eval":
            r = rec.get("eval_reward")
            if not isinstance(r, (int, float)) or not 0.0 <= r <= 1.0:
                raise ValueError(f"line {n}: eval_reward {r!r} outside [0, 1]")
            evals.append((step, float(r)))
    if not evals:
        raise ValueError("no eval records")
    reached = next((s for s, r in evals if r >= THRESHOLD), None)
    curve = [(s, r, train_reward.get(s)) for s, r in evals]
    return RunSummary(
        path=path,
        run=header["run"],
        seed=header["seed"],
        scheme=header["scheme"],
        G=header["G"],
        J=header["J"],
        K=header["K"],
        last_step=last_step,
        final_eval=evals[-1][1],
        best_eval=max(r for _, r in evals),
        steps_to_threshold=reached,
        final_train_reward=train_reward.get(last_step),
        curve=curve,
    )


def _fmt_steps(s: int | None) -> str:
    return "not reached" if s is None else str(s)


def report(run_dir: Path) -> tuple[list[RunSummary], list[tuple[Path, str]]]:
    """Write ``report.md``, ``summary.csv`` and ``curves.csv`` under ``run_dir``."""
    run_dir = Path(run_dir)
    good, bad = [], []
    for path in sorted(run_dir.rglob("metrics.jsonl")):
        try:
            good.append(read_metrics(path))
        except (OSError, ValueError) as err:
            bad.append((path, str(err)))
    if not good:
        return good, bad

    with open(run_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "scheme", "G", "J", "K", "last_step", "final_eval", "best_eval", "steps_to_0.9"])
        for s in good:
            w.writerow([s.run, s.seed, s.scheme, s.G, s.J, s.K, s.last_step, s.final_eval, s.best_eval, _fmt_steps(s.steps_to_threshold)])
    with open(run_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "scheme", "step", "eval_reward", "train_reward"])
        for s in good:
            for step, r, tr in s.curve:
                w.writerow([s.run, s.seed, s.scheme, step, r, "" if tr is None else tr])

    md = io.StringIO()
    md.write(f"# Report for `{run_dir}`\n\n## Runs\n\n")
    md.write("| run | seed | scheme | G | J | K | steps | final eval | best eval | steps to 0.9 |\n")
    md.write("|---|---|---|---|---|---|---|---|---|---|\n")
    for s in good:
        md.write(
            f"| {s.run} | {s.seed} | {s.scheme} | {s.G} | {s.J} | {s.K} | {s.last_step} "
            f"| {s.final_eval:.3f} | {s.best_eval:.3f} | {_fmt_steps(s.steps_to_threshold)} |\n"
        )
    md.write("\n## By run and scheme\n\n")
    md.write("| run | scheme | seeds | mean final eval | std | reached 0.9 | mean steps to 0.9 |\n")
    md.write("|---|---|---|---|---|---|---|\n")
    groups: dict[tuple[str, str], list[RunSummary]] = {}
    for s in good:
        groups.setdefault((s.run, s.scheme), []).append(s)
    for (run, scheme), items in groups.items():
        finals = np.array([s.final_eval for s in items])
        hit = [s.steps_to_threshold for s in items if s.steps_to_threshold is not None]
        mean_hit = f"{np.mean(hit):.1f}" if hit else "not reached"
        md.write(f"| {run} | {scheme} | {len(items)} | {finals.mean():.3f} | {finals.std():.3f} | {len(hit)}/{len(items)} | {mean_hit} |\n")
    if bad:
        md.write("\n## Unreadable metrics files\n\n")
        for path, why in bad:
            md.write(f"- `{path}`: {why}\n")
    (run_dir / "report.md").write_text(md.getvalue())
    return good, bad


# --- entry point ----------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="no per-eval progress lines")
    p = argparse.ArgumentParser(prog="treecredit", description="Tree-structured credit assignment experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", parents=[common], help="train every seed listed in a config")
    r.add_argument("config")
    r.add_argument("--resume", action="store_true", help="continue from the latest checkpoint of each seed")
    r.add_argument("--output-dir", help="override run.output_dir")
    s = sub.add_parser("sweep", parents=[common], help="one run per axis value per seed")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma-separated list")
    s.add_argument("--output-dir", help="override run.output_dir")
    rep = sub.add_parser("report", parents=[common], help="summarize every metrics.jsonl below a directory")
    rep.add_argument("dir")
    sub.add_parser("verify", parents=[common], help="run the built-in oracle checks")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        if args.verb == "verify":
            from .oracles import run_all

            results = run_all()
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
            return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_VERIFY
        if args.verb == "report":
            root = Path(args.dir)
            if not root.is_dir():
                print(f"error: {root} is not a directory", file=sys.stderr)
                return EXIT_RUNTIME
            good, bad = report(root)
            for path, why in bad:
                print(f"bad metrics file {path}: {why}", file=sys.stderr)
            if not good:
                print(f"error: no readable metrics files under {root}", file=sys.stderr)
                return EXIT_RUNTIME
            print(f"wrote {root / 'report.md'}, {root / 'summary.csv'}, {root / 'curves.csv'}")
            return EXIT_RUNTIME if bad else EXIT_OK
        cfg = load_config(args.config)
        root = Path(args.output_dir) if args.output_dir else None
        if args.verb == "run":
            for res in run_experiment(cfg, root, args.resume, log):
                print(
                    f"seed {res.seed}: final eval {res.final_eval:.3f} at step {res.final_step}, "
                    f"steps to 0.9: {_fmt_steps(res.steps_to_threshold)}"
                )
            return EXIT_OK
        values = parse_axis_values(args.axis, args.values)
        out = sweep(cfg, args.axis, values, root, log)
        print(f"wrote {out}")
        return EXIT_OK
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunAborted, PolicyDivergence, OSError, ValueError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
