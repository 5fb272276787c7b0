"""Command line entry point: ``approxmpc <command> [--config FILE] [--seed N] [--out DIR]``.

Every command reads and writes inside ``--out`` by default, so a single run
directory carries the whole pipeline:

    generate-data -> dataset.csv
    train         -> models/, traces/, rmse_vs_nd.csv
    eval          -> eval_report.csv
    simulate      -> sim_<controller>.csv
    benchmark     -> timing.json
    compare       -> compare/
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, load_config, save_config
from .controller import MODEL_FILES, ApproxController, policy_error_report
from .data import Dataset, generate_dataset, train_output, write_trace_csv
from .gp import posterior_mean_fast
from .sim import TimingStats, benchmark_timing, compare_report, simulate, timing_controllers
from .track import builtin_profile, load_track

log = logging.getLogger("approxmpc")

OUTPUT_NAMES = ("vu", "delta")


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return None if isinstance(obj, float) and math.isnan(obj) else obj


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_nan_to_none(obj), fh, indent=2, sort_keys=True)


def _track(arg, cfg: Config):
    if arg is None:
        return cfg.track
    return load_track(arg) if Path(arg).exists() else builtin_profile(arg)


def cmd_generate_data(args, cfg: Config) -> int:
    p = cfg.pipeline
    t0 = time.perf_counter()
    ds = generate_dataset(cfg.ocp, cfg.domain(), p.n_rollouts, p.rollout_len, p.pool_size, p.test_size,
                          args.seed, p.n_jobs)
    ds.to_csv(args.out / "dataset.csv")
    with open(args.out / "provenance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "row", "rollout"])
        for src, ids in (("pool", ds.pool_rollouts), ("test", ds.test_rollouts)):
            w.writerows([src, i, int(r)] for i, r in enumerate(ids))
    save_config(cfg, args.out / "config.yaml")
    log.info("dataset: %d pool, %d test samples in %.1f s", len(ds.labels), len(ds.test_labels),
             time.perf_counter() - t0)
    return 0


def cmd_train(args, cfg: Config) -> int:
    ds = Dataset.from_csv(args.data or args.out / "dataset.csv")
    models = args.out / "models"
    traces = args.out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    budget = min(cfg.pipeline.budget, len(ds.labels))
    large = models / f"nd{budget}"
    large.mkdir(parents=True, exist_ok=True)
    summary, curves = {"budget": budget, "n_pool": len(ds.labels), "n_test": len(ds.test_labels)}, {}
    for j, name in enumerate(OUTPUT_NAMES):
        t0 = time.perf_counter()
        res = train_output(ds, j, cfg.gp.n_active, budget, args.seed, cfg.gp.schedule, cfg.gp.init_points)
        log.info("trained %s GP in %.1f s", name, time.perf_counter() - t0)
        res.model.save(models / MODEL_FILES[j])
        res.model_budget.save(large / MODEL_FILES[j])
        write_trace_csv(traces / f"trace_greedy_{name}.csv", res.greedy, j)
        write_trace_csv(traces / f"trace_random_{name}.csv", res.random, j)
        curves[f"greedy_{name}"] = res.greedy.rmse
        curves[f"random_{name}"] = res.random.rmse
        summary[f"final_rmse_greedy_{name}"] = res.greedy.rmse[-1]
        summary[f"final_rmse_random_{name}"] = res.random.rmse[-1]
        summary[f"hyper_{name}"] = {str(k): h.to_dict() for k, h in sorted(res.greedy.hypers.items())}
    with open(args.out / "rmse_vs_nd.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(curves)
        w.writerow(["n_d"] + cols)
        for n in range(budget + 1):
            w.writerow([n] + [repr(float(curves[c][n])) for c in cols])
    _write_json(args.out / "train_summary.json", summary)
    return 0


def _load_controller(args, cfg: Config) -> ApproxController:
    return ApproxController.load(Path(args.models) if args.models else args.out / "models", cfg.ocp)


def cmd_eval(args, cfg: Config) -> int:
    ds = Dataset.from_csv(args.data or args.out / "dataset.csv")
    ctrl = _load_controller(args, cfg)
    report = policy_error_report(ctrl, ds.test_features, ds.test_labels, args.out / "eval_report.csv")
    report["n_d"] = ctrl.n_data
    _write_json(args.out / "eval_summary.json", report)
    log.info("eval: %s", report)
    return 0


def _run_sim(args, cfg: Config, kind: str):
    track = _track(args.track, cfg)
    gp = _load_controller(args, cfg) if kind == "gp" else None
    return simulate(cfg.sim_config(kind, args.seed, track), cfg.ocp, gp)


def _sim_summary(res) -> dict:
    return {
        "controller": res.config.controller, "status": res.status, "J_cl": res.J_cl, "lap_count": res.lap_count,
        "n_calls": res.n_calls, "max_abs_n": res.max_abs_n(0), "max_abs_n_after_first_lap": res.max_abs_n(1),
    }


def cmd_simulate(args, cfg: Config) -> int:
    res = _run_sim(args, cfg, args.controller)
    stem = f"sim_{args.controller}"
    res.to_csv(args.out / f"{stem}.csv")
    _write_json(args.out / f"{stem}_summary.json", _sim_summary(res))
    _write_json(args.out / f"{stem}_timing.json", {
        "median": float(np.median(res.compute_time)) if res.compute_time.size else None,
        "mean": float(np.mean(res.compute_time)) if res.compute_time.size else None,
    })
    log.info("simulate: %s", _sim_summary(res))
    return 0 if res.status == "ok" else 1


def cmd_benchmark(args, cfg: Config) -> int:
    n_eval = max(1000, cfg.sim.timing_evaluations)
    track = _track(args.track, cfg)
    queries = [x for x in simulate(cfg.sim_config("mpc-rti", args.seed, track), cfg.ocp).curvilinear[:-1]]
    gps = {"gp": _load_controller(args, cfg)}
    models = Path(args.models) if args.models else args.out / "models"
    large = sorted(d for d in models.glob("nd*") if d.is_dir())
    if large:
        gps[f"gp-{large[-1].name}"] = ApproxController.load(large[-1], cfg.ocp)
    ctrls = timing_controllers(cfg.ocp, track, gps)
    for name, gp in gps.items():
        # single posterior mean, the quantity whose cost is linear in the data count
        ctrls[f"mean-{name}"] = lambda x, m=gp.gp_vu: posterior_mean_fast(m, np.array([x[1], x[2], x[3], 0.0]))
    reps = [benchmark_timing(ctrls, queries, n_eval) for _ in range(args.repeats)]
    out = {"repeats": [{k: v.to_dict() for k, v in r.items()} for r in reps]}
    med = {k: float(np.median([r[k].median for r in reps])) for k in ctrls}
    out["median_of_medians"] = med
    out["speedup_rti_over_gp"] = med["mpc-rti"] / med["gp"]
    if len(gps) > 1:
        big = next(k for k in gps if k != "gp")
        out["n_d"] = {"gp": gps["gp"].n_data, big: gps[big].n_data}
        out["scaling_ratio_mean"] = med[f"mean-{big}"] / med["mean-gp"]
    _write_json(args.out / "timing.json", out)
    log.info("benchmark: speedup %.2f", out["speedup_rti_over_gp"])
    return 0


def cmd_compare(args, cfg: Config) -> int:
    mpc = _run_sim(args, cfg, "mpc-full")
    gp = _run_sim(args, cfg, "gp")
    timing = {"mpc-full": TimingStats.from_samples(mpc.compute_time), "gp": TimingStats.from_samples(gp.compute_time)}
    summary = compare_report(mpc, gp, args.out / "compare", timing)
    log.info("compare: %s", summary)
    return 0 if mpc.status == gp.status == "ok" else 1


COMMANDS = {
    "generate-data": (cmd_generate_data, "sample reachable features and label them with the MPC"),
    "train": (cmd_train, "greedy and random selection, write GP models and RMSE curves"),
    "eval": (cmd_eval, "approximation error of the trained law on the test set"),
    "simulate": (cmd_simulate, "closed-loop simulation with one controller"),
    "benchmark": (cmd_benchmark, "per-call timing of MPC-RTI and the GP law"),
    "compare": (cmd_compare, "MPC-full vs GP closed loop on the same track"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML config (defaults if omitted)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="approxmpc", description="Gaussian-process approximation of a path-tracking MPC.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, parents=[common])
        if name in ("train", "eval"):
            sp.add_argument("--data", "--testset", type=Path, default=None, help="dataset CSV (default <out>/dataset.csv)")
        if name in ("eval", "simulate", "benchmark", "compare"):
            sp.add_argument("--models", "--model-dir", dest="models", default=None, help="model directory (default <out>/models)")
        if name in ("simulate", "benchmark", "compare"):
            sp.add_argument("--track", default=None, help="builtin name or track YAML (default: config track)")
        if name == "simulate":
            sp.add_argument("--controller", choices=("mpc-full", "mpc-rti", "gp"), default="mpc-full")
        if name == "benchmark":
            sp.add_argument("--repeats", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    return COMMANDS[args.command][0](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
