"""Command-line harness: data generation, collection, training, correction, evaluation, baselines, serving, sweeps."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, control, lambda_correct, serving, train
from .config import ExperimentConfig, load_config
from .core import NUM_PHASES, ConfigError, normalized_score
from .qnet import NonFiniteError, load_params, save_params
from .simenv import RequestSet, generate_dataset, rollout

log = logging.getLogger("cralloc")

WORKERS_ENV = "CRALLOC_WORKERS"
EXIT_CONFIG, EXIT_UNCONVERGED = 2, 3


class Workspace:
    """Fixed file layout under ``--out-dir``."""

    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg

    def path(self, name: str) -> Path:
        return self.root / name

    def requests(self, which: str) -> RequestSet:
        p = self.path(f"{which}_requests.jsonl")
        env = self.cfg.env if which == "train" else self.cfg.eval_env()
        if p.exists():
            return RequestSet.from_jsonl(p, env)
        log.info("%s not found, regenerating from config", p.name)
        return generate_dataset(env)

    def manifest(self, stage: str, **extra) -> None:
        rec = dict(stage=stage, config_hash=self.cfg.digest(), config=self.cfg.to_dict(), **extra)
        self.path(f"{stage}.manifest.json").write_text(json.dumps(rec, indent=2, default=float))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer")


# --- result rows -----------------------------------------------------------

ROW_FIELDS = ["method", "utilization_1", "utilization_2", "utilization_3", "cost", "return", "score", "config_hash"]


def result_row(method: str, costs, budgets, ret: float, anchors, digest: str) -> dict:
    util = np.asarray(costs) / np.asarray(budgets)
    score = float("nan")
    if anchors is not None and anchors[1] != anchors[0]:
        score = normalized_score(ret, *anchors)
    row = dict(method=method, cost=float(np.sum(util - 1.0)), config_hash=digest)
    row["return"] = ret
    row["score"] = score
    for t in range(NUM_PHASES):
        row[f"utilization_{t + 1}"] = float(util[t])
    return row


def append_rows(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def render(rows: list[dict]) -> str:
    head = f"{'method':<16}{'u1':>9}{'u2':>9}{'u3':>9}{'return':>14}{'score':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['method']:<16}{r['utilization_1']:>9.2%}{r['utilization_2']:>9.2%}{r['utilization_3']:>9.2%}"
                     f"{r['return']:>14.2f}{r['score']:>9.1f}")
    return "\n".join(lines)


def anchors(ws: Workspace, ev: RequestSet, expert: float | None):
    static_ret = rollout(ev, baselines.static_policy(ws.cfg.static)).total_return()
    if expert is None:
        p = ws.path("anchors.json")
        if p.exists():
            expert = json.loads(p.read_text()).get("expert")
    return None if expert is None else (static_ret, float(expert))


# --- subcommands -----------------------------------------------------------


def cmd_gen_data(args, ws: Workspace) -> int:
    tr = generate_dataset(ws.cfg.env)
    ev = generate_dataset(ws.cfg.eval_env())
    tr.to_jsonl(ws.path("train_requests.jsonl"))
    ev.to_jsonl(ws.path("eval_requests.jsonl"))
    ws.manifest("gen-data", train=len(tr), eval=len(ev))
    print(f"wrote {len(tr)} training and {len(ev)} evaluation requests to {ws.root}")
    return 0


def _superior(ws: Workspace, tr: RequestSet):
    cfg = ws.cfg
    if cfg.collect.superior_fraction <= 0:
        return None
    sub = tr.subset(np.arange(min(cfg.cem_subset, len(tr))))
    theta, res = baselines.cem_train(cfg.cem, sub, cfg.budgets)
    if theta is None:
        raise ConfigError("no feasible superior policy found for data collection")
    return baselines.linear_policy(theta)


def cmd_collect(args, ws: Workspace) -> int:
    cfg = ws.cfg
    tr = ws.requests("train")
    ds = train.collect_behavior_data(tr, _superior(ws, tr), cfg.collect.superior_fraction, cfg.collect.num_requests,
                                     noisy=cfg.collect.noisy, seed=cfg.seed)
    ds.to_jsonl(ws.path("transitions.jsonl"))
    ws.manifest("collect", transitions=len(ds))
    print(f"collected {len(ds)} transitions")
    return 0


def _dataset(ws: Workspace) -> train.TransitionSet:
    tr = ws.requests("train")
    p = ws.path("transitions.jsonl")
    if p.exists():
        return train.TransitionSet.from_jsonl(p, tr)
    return train.collect_behavior_data(tr, _superior(ws, tr), ws.cfg.collect.superior_fraction,
                                       ws.cfg.collect.num_requests, noisy=ws.cfg.collect.noisy, seed=ws.cfg.seed)


def cmd_train(args, ws: Workspace) -> int:
    cfg = ws.cfg
    ds = _dataset(ws)
    ev = ws.requests("eval")
    ckdir = ws.path("checkpoints")
    ckdir.mkdir(exist_ok=True)
    res = train.train(ds, cfg.train, cfg.budgets, ev, checkpoint_dir=str(ckdir))
    lam = res.lam.as_array()
    save_params(res.params, ws.path("model.npz"),
                {"lambda": lam.tolist(), "algo": cfg.train.algo, "config_hash": cfg.digest()})
    train.write_telemetry(ws.path("telemetry.csv"), res.telemetry)
    ws.manifest("train", wall_time=res.wall_time, lam=lam.tolist())
    print(f"trained {cfg.train.algo} for {cfg.train.iterations} steps in {res.wall_time:.1f}s; lambda={np.round(lam, 4)}")
    return 0


def _load_model(ws: Workspace, path=None):
    p = Path(path) if path else ws.path("model.npz")
    if not p.exists():
        raise ConfigError(f"checkpoint {p} not found; run `train` first")
    return load_params(p)


def cmd_correct(args, ws: Workspace) -> int:
    params, extra = _load_model(ws, args.checkpoint)
    cfg = ws.cfg
    ev = ws.requests("eval")
    thr = cfg.train.bcq_threshold if extra.get("algo", cfg.train.algo) == "bcq" else None
    res = lambda_correct.correct_all(params, cfg.budgets, ev, cfg.correct.per_slice, cfg.correct.tol,
                                     cfg.correct.max_probes, thr, np.asarray(extra.get("lambda", [0, 0, 0])))
    lambda_correct.write_lambda_table(ws.path("lambda_table.csv"), res)
    ws.manifest("correct", converged=res.all_converged, utilization=res.overall_utilization().tolist(),
                total_return=res.total_return())
    print("overall utilization", np.round(res.overall_utilization(), 4), "return", round(res.total_return(), 2))
    if not res.all_converged:
        bad = np.argwhere(~res.converged)
        print(f"correction did not converge for (slice, phase) {[(int(s), int(t) + 1) for s, t in bad]}",
              file=sys.stderr)
        return EXIT_UNCONVERGED
    return 0


def cmd_eval(args, ws: Workspace) -> int:
    params, extra = _load_model(ws, args.checkpoint)
    cfg = ws.cfg
    ev = ws.requests("eval")
    table = lambda_correct.read_lambda_table(args.lambda_table or ws.path("lambda_table.csv"))
    thr = cfg.train.bcq_threshold if extra.get("algo", cfg.train.algo) == "bcq" else None
    traj = serving.serve_batch(params, table, ev, None, None, thr)
    budgets = _eval_budgets(cfg, ev)
    ret = traj.total_return()
    if args.as_expert:
        ws.path("anchors.json").write_text(json.dumps({"expert": ret}))
    row = result_row(args.name or extra.get("algo", "model"), traj.phase_costs(), budgets, ret,
                     anchors(ws, ev, args.expert_return), cfg.digest())
    append_rows(ws.path("results.csv"), [row])
    print(render([row]))
    return 0


def _eval_budgets(cfg: ExperimentConfig, ev: RequestSet) -> np.ndarray:
    return cfg.budgets.budgets(len(ev))


def cmd_baseline(args, ws: Workspace) -> int:
    cfg = ws.cfg
    ev = ws.requests("eval")
    if args.kind == "static":
        policy = baselines.static_policy(cfg.static)
    elif args.kind == "dcaf":
        policy = baselines.dcaf_policy(ev, cfg.budgets.rates[1], cfg.static, cfg.correct.tol)
    else:
        tr = ws.requests("train")
        sub = tr.subset(np.arange(min(cfg.cem_subset, len(tr))))
        theta, res = baselines.cem_train(cfg.cem, sub, cfg.budgets)
        baselines.write_cem_log(ws.path("cem_log.csv"), res.log)
        if theta is None:
            print("CEM found no budget-feasible policy", file=sys.stderr)
            return EXIT_UNCONVERGED
        np.save(ws.path("cem_theta.npy"), theta.theta)
        policy = baselines.linear_policy(theta)
    traj = rollout(ev, policy)
    row = result_row(args.kind, traj.phase_costs(), _eval_budgets(cfg, ev), traj.total_return(),
                     anchors(ws, ev, args.expert_return), cfg.digest())
    append_rows(ws.path("results.csv"), [row])
    print(render([row]))
    return 0


def cmd_serve(args, ws: Workspace) -> int:
    params, extra = _load_model(ws, args.checkpoint)
    cfg = ws.cfg
    ev = ws.requests("eval")
    table = lambda_correct.read_lambda_table(args.lambda_table or ws.path("lambda_table.csv"))
    ctl = control.Controller(cfg.pid, cfg.clamp, cfg.smoothing)
    thr = cfg.train.bcq_threshold if extra.get("algo", cfg.train.algo) == "bcq" else None
    rep = serving.run_stream(params, table, ev, cfg.budgets, cfg.stream, ctl, thr)
    serving.write_serving_report(ws.path("serving_report.csv"), rep)
    control.write_control_log(ws.path("control.csv"), ctl.history)
    ws.manifest("serve", ticks=len(rep.ticks))
    util = np.array([r["utilization"] for r in rep.slices])
    print(f"served {sum(r['requests'] for r in rep.slices)} requests over {len(rep.slices)} slices; "
          f"mean utilization {np.round(util.mean(axis=0), 4)}")
    return 0


def _sweep_job(job):
    cfg, alpha, rounds, ds, ev = job
    tcfg = dataclasses.replace(cfg.train, lambda_lr=alpha, lambda_updates=rounds, adaptive_lambda=True)
    res = train.train(ds, tcfg, cfg.budgets)
    ev_res = lambda_correct.evaluate_policy(res.params, res.lam.as_array(), ev, cfg.budgets, tcfg.mask_threshold)
    return alpha, rounds, ev_res.utilization, ev_res.total_return, res.wall_time


def cmd_sweep(args, ws: Workspace) -> int:
    cfg = ws.cfg
    ds = _dataset(ws)
    ev = ws.requests("eval")
    grid = [(a, k) for a in cfg.sweep.alphas for k in cfg.sweep.rounds]
    if 1 not in cfg.sweep.rounds:
        grid += [(a, 1) for a in cfg.sweep.alphas[:1]]
    jobs = [(cfg, a, k, ds, ev) for a, k in grid]
    n = worker_count()
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            out = list(pool.map(_sweep_job, jobs))
    else:
        out = [_sweep_job(j) for j in jobs]
    base = {a: t for a, k, _, _, t in out if k == 1}
    with open(ws.path("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "K", "utilization_1", "utilization_2", "utilization_3", "return", "wall_time",
                    "relative_time", "config_hash"])
        for a, k, util, ret, t in out:
            rel = t / base.get(a, next(iter(base.values()))) if base else float("nan")
            w.writerow([a, k, *[repr(float(u)) for u in util], repr(ret), repr(t), repr(rel), cfg.digest()])
    ws.manifest("sweep", runs=len(out))
    print(f"wrote {len(out)} sweep rows to {ws.path('sweep.csv')}")
    return 0


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cralloc", description=__doc__)
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out-dir", default="runs/default")
    p.add_argument("--algo", choices=train.ALGOS)
    p.add_argument("--adaptive-lambda", choices=("on", "off"))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate training and evaluation requests")
    sub.add_parser("collect", help="log behaviour-policy transitions")
    sub.add_parser("train", help="offline training with adaptive multipliers")
    for name in ("correct", "eval", "serve"):
        sp = sub.add_parser(name)
        sp.add_argument("--checkpoint")
        if name != "correct":
            sp.add_argument("--lambda-table")
        if name == "eval":
            sp.add_argument("--name", help="method label in the results table")
            sp.add_argument("--expert-return", type=float)
            sp.add_argument("--as-expert", action="store_true", help="store this return as the 100-point anchor")
    bp = sub.add_parser("baseline")
    bp.add_argument("kind", choices=("static", "dcaf", "cem"))
    bp.add_argument("--expert-return", type=float)
    sub.add_parser("sweep", help="grid over the multiplier step size and update count")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "collect": cmd_collect,
    "train": cmd_train,
    "correct": cmd_correct,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "serve": cmd_serve,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {}
    if args.algo:
        overrides.setdefault("train", {})["algo"] = args.algo
    if args.adaptive_lambda:
        overrides.setdefault("train", {})["adaptive_lambda"] = args.adaptive_lambda == "on"
    try:
        cfg = load_config(args.config, args.seed, overrides)
        ws = Workspace(args.out_dir, cfg)
        started = time.perf_counter()
        code = COMMANDS[args.command](args, ws)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - started)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
