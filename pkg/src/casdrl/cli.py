"""Command-line entry point: ``casdrl <subcommand> [options]``.

Settings come from an optional JSON config (``--config``), then ``-O key=value``
overrides, then the subcommand's own flags, later sources winning. Every run
writes its artifacts under ``--out`` together with ``manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .container import FormatError, atomic_write, dump_json
from .dp_solver import QTABLE_VERSION, TablePolicy, load_tables, save_tables, solve_table
from .dqn_trainer import SampledEncounters, TrainingDivergedError, train, write_training_log
from .encounters import SET_VERSION, export_json, generate_stratified_set, read_set, write_set
from .evaluator import (BenchVariant, EvaluationError, ObjectiveWeights, evaluate, objective,
                        plot_bench, rescore_ledger, run_bench, timing_table, write_bench_csv,
                        write_metrics_json)
from .neural_net import (DESK_LAYERS, WIDE_LAYERS, WEIGHTS_VERSION, NaiveQNetworkPolicy,
                         QNetworkPolicy, init_weights, load_weights, save_weights)
from .policy_viz import Plane, policy_grid, write_plot
from .simulator import PolicyContractError, RewardParams
from .surrogate_tuner import (LEDGER_FORMAT, DqnPointEvaluator, LedgerMismatchError,
                              TuningLedger, append_points, evaluate_baseline, linear_sweep,
                              local_lhs, open_ledger, recommend, tune)

log = logging.getLogger("casdrl")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 2, 3, 4, 5, 6

FORMAT_VERSIONS = {
    "encounter-set": SET_VERSION,
    "weights": WEIGHTS_VERSION,
    "qtable": QTABLE_VERSION,
    "tuning-ledger": LEDGER_FORMAT,
    "manifest": 1,
}


class NonConvergenceError(RuntimeError):
    pass


def package_version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


# ----------------------------------------------------------------------------
# helpers

def load_config(args) -> RunConfig:
    if args.config:
        cfg = cfgmod.parse_config(Path(args.config).read_bytes())
    else:
        cfg = RunConfig()
    if args.override:
        cfg = cfgmod.apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, seeds: dict, artifacts,
                   inputs=(), deterministic: bool = True) -> None:
    arts = {}
    for p in sorted(Path(a) for a in artifacts):
        arts[p.relative_to(out).as_posix()] = sha256_file(p)
    doc = {"command": command, "config": cfgmod.to_dict(cfg), "config_hash": cfgmod.config_hash(cfg),
           "seeds": seeds, "package_version": package_version(), "formats": FORMAT_VERSIONS,
           "inputs": {Path(i).name: sha256_file(i) for i in inputs}, "artifacts": arts,
           "deterministic": deterministic}
    atomic_write(out / "manifest.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")


def eval_set_for(args, cfg: RunConfig):
    if getattr(args, "set", None):
        return read_set(args.set)
    s = cfg.eval_set
    return generate_stratified_set(s.size, s.nmac_fraction, cfg.encounters, s.seed)


def load_policy(args, cfg: RunConfig):
    if getattr(args, "weights", None):
        return QNetworkPolicy(load_weights(args.weights)), [args.weights]
    if getattr(args, "qtable", None):
        return TablePolicy(load_tables(args.qtable)), [args.qtable]
    raise ConfigError("a policy is required: pass --weights or --qtable")


def reward_from(args, cfg: RunConfig) -> RewardParams:
    if getattr(args, "reward", None):
        try:
            return RewardParams(*args.reward)
        except ValueError as exc:
            raise ConfigError(f"--reward: {exc}") from exc
    return cfg.reward


def point_evaluator(cfg: RunConfig, es, weights_dir=None) -> DqnPointEvaluator:
    return DqnPointEvaluator(cfg.dqn.build(cfg.master_seed, cfg.reward), es, cfg.simulator,
                             cfg.encounters, cfg.workers, weights_dir, cfg.evaluator.lookahead)


def ledger_header(cfg: RunConfig) -> dict:
    return {"run_config_hash": cfgmod.config_hash(replace(cfg, workers=1))}


# ----------------------------------------------------------------------------
# subcommands

def cmd_generate_encounters(args, cfg: RunConfig, out: Path) -> int:
    s = cfg.eval_set
    n = args.n if args.n is not None else s.size
    frac = args.nmac_fraction if args.nmac_fraction is not None else s.nmac_fraction
    seed = args.set_seed if args.set_seed is not None else s.seed
    es = generate_stratified_set(n, frac, cfg.encounters, seed)
    path = out / "encounters.enc"
    write_set(es, path)
    arts = [path]
    if args.json:
        export_json(es, out / "encounters.json")
        arts.append(out / "encounters.json")
    print(f"wrote {len(es)} encounters ({es.n_nominal_nmac} nominal NMAC) to {path}")
    write_manifest(out, "generate-encounters", cfg, {"set_seed": seed}, arts)
    return EXIT_OK


def cmd_solve_dp(args, cfg: RunConfig, out: Path) -> int:
    dp = cfg.dp
    reward = reward_from(args, cfg)
    modes = args.mode or list(dp.modes)
    tables, unconverged = [], []
    for mode in modes:
        qt, vt = solve_table(mode, reward, dp.bins if mode != "joint" else None,
                             dp.samples_per_cell, cfg.master_seed, dp.gamma, dp.tol,
                             dp.max_sweeps, cfg.simulator)
        print(f"{mode}: {qt.n_states} states, {vt.iteration_count} sweeps, "
              f"residual {vt.residual:.3g}{'' if vt.converged else ' (NOT converged)'}")
        tables.append(qt)
        if not vt.converged:
            unconverged.append(mode)
    path = out / "qtables.bin"
    save_tables(tables, path)
    write_manifest(out, "solve-dp", cfg, {"master_seed": cfg.master_seed},
                   [path, out / "qtables.bin.json"])
    if unconverged:
        raise NonConvergenceError(f"value iteration did not converge for {unconverged} "
                                  f"within {dp.max_sweeps} sweeps")
    return EXIT_OK


def cmd_train_dqn(args, cfg: RunConfig, out: Path) -> int:
    seed = args.train_seed if args.train_seed is not None else cfg.master_seed
    reward = reward_from(args, cfg)
    dcfg = cfg.dqn.build(seed, reward)
    src_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    res = train(dcfg, SampledEncounters(cfg.encounters, src_seed), cfg.simulator)
    wpath = out / "weights.bin"
    save_weights(res.weights, wpath, extra={"reward": list(reward.as_point()), "seed": seed})
    write_training_log(res, out / "training_log.csv")
    last = res.log[-1] if res.log else {}
    print(f"trained {dcfg.episodes} episodes ({res.steps} steps); final episode reward "
          f"{last.get('reward', float('nan')):.4f}")
    write_manifest(out, "train-dqn", cfg, {"train_seed": seed, "encounter_seed": src_seed},
                   [wpath, out / "training_log.csv"])
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> int:
    policy, inputs = load_policy(args, cfg)
    es = eval_set_for(args, cfg)
    reward = reward_from(args, cfg)
    m = evaluate(policy, es, reward, args.lookahead or cfg.evaluator.lookahead, cfg.simulator,
                 cfg.workers)
    rep = objective(m, cfg.evaluator.targets, cfg.evaluator.weights)
    path = out / "metrics.json"
    write_metrics_json(m, path, rep)
    print(f"P(NMAC)={m.p_nmac:.6g} P(Alert)={m.p_alert:.6g} P(Reversal)={m.p_reversal:.6g} "
          f"V={rep.total:.6g} over {m.encounter_count} encounters")
    if args.set:
        inputs.append(args.set)
    write_manifest(out, "evaluate", cfg, {"set_seed": None if args.set else cfg.eval_set.seed},
                   [path], inputs)
    return EXIT_OK


def cmd_tune(args, cfg: RunConfig, out: Path) -> int:
    es = eval_set_for(args, cfg)
    tcfg = cfg.tuner_config()
    wdir = out / "weights" if args.save_weights else None
    ev = point_evaluator(cfg, es, wdir)
    ledger_path = out / "ledger.jsonl"

    def report(it):
        v = "failed" if it.objective is None else f"V={it.objective:.6g}"
        print(f"iteration {it.iteration} [{it.provenance}] point={tuple(round(x, 6) for x in it.point)} "
              f"{v} stable={it.stable}", flush=True)

    done = len(open_ledger(tcfg, ledger_path, ledger_header(cfg)))
    counter = [done]

    def run(point, seeds):
        return ev(point, seeds, tag=f"iter{counter[0]:04d}")

    def on_iteration(it):
        counter[0] = it.iteration + 1
        report(it)

    ledger = tune(tcfg, run, ledger_path, ledger_header(cfg), on_iteration)
    arts = [ledger_path]
    summary = {"recommendation": recommend(ledger, tcfg)}
    if not args.no_baseline:
        bpath = out / "baseline.json"
        if bpath.exists() and json.loads(bpath.read_text()).get("run_config_hash") == ledger_header(cfg)["run_config_hash"]:
            base = json.loads(bpath.read_text())
        else:
            base = evaluate_baseline(lambda p, s: ev(p, s, tag="baseline"), tcfg)
            base.update(ledger_header(cfg))
            atomic_write(bpath, dump_json(base) + "\n")
        arts.append(bpath)
        summary["baseline"] = base
        best = ledger.best()
        if best is not None:
            summary["best_vs_baseline"] = {
                "objective_ratio": best.objective / base["objective"] if base["objective"] else None,
                "best_p_nmac": best.metrics["p_nmac"] if best.metrics else None,
                "baseline_p_nmac": base["metrics"]["p_nmac"] if base.get("metrics") else None}
    spath = out / "summary.json"
    atomic_write(spath, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    arts.append(spath)
    if wdir is not None and wdir.exists():
        arts += sorted(wdir.glob("*.bin"))
    best = ledger.best()
    if best is None:
        raise NonConvergenceError("every tuner iteration failed")
    print(f"best iteration {best.iteration}: point={best.point} V={best.objective:.6g}")
    if "baseline" in summary:
        print(f"untuned baseline V={summary['baseline']['objective']:.6g}")
    write_manifest(out, "tune", cfg, {"master_seed": cfg.master_seed}, arts,
                   [args.set] if args.set else [])
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, out: Path) -> int:
    src = TuningLedger.load(args.ledger)
    tcfg = cfg.tuner_config()
    expect = open_ledger(tcfg, None, ledger_header(cfg)).header
    if src.header != expect:
        raise LedgerMismatchError(f"{args.ledger} was written with a different configuration")
    ledger_path = out / "ledger.jsonl"
    if Path(args.ledger).resolve() != ledger_path.resolve():
        shutil.copyfile(args.ledger, ledger_path)
    ledger = TuningLedger.load(ledger_path)
    if args.local is not None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, len(ledger), 0x10C]))
        pts = local_lhs(args.local, args.radius, args.n, rng)
        prov = "LOCAL_LHS"
    else:
        if args.between is not None:
            a, b = (ledger.iterations[i].point for i in args.between)
        elif args.a is not None and args.b is not None:
            a, b = args.a, args.b
        else:
            raise ConfigError("sweep needs --between I J, --a/--b endpoints, or --local")
        pts = linear_sweep(a, b, args.n)
        prov = "LINEAR_SWEEP"
    for p in pts:
        print("planned", prov, tuple(round(float(x), 6) for x in p))
    if args.dry_run:
        atomic_write(out / "planned_points.json", dump_json([list(map(float, p)) for p in pts]) + "\n")
        write_manifest(out, "sweep", cfg, {"master_seed": cfg.master_seed},
                       [out / "planned_points.json"], [args.ledger])
        ledger_path.unlink()
        return EXIT_OK
    es = eval_set_for(args, cfg)
    ev = point_evaluator(cfg, es)
    append_points(ledger, pts, prov, ev, tcfg)
    for it in ledger.iterations[-len(pts):]:
        print(f"iteration {it.iteration} [{it.provenance}] V={it.objective}")
    write_manifest(out, "sweep", cfg, {"master_seed": cfg.master_seed}, [ledger_path], [args.ledger])
    return EXIT_OK


def cmd_rescore(args, cfg: RunConfig, out: Path) -> int:
    ledger = TuningLedger.load(args.ledger)
    weights = ObjectiveWeights(*args.weights) if args.weights else cfg.evaluator.weights
    rows = rescore_ledger(ledger.entries(), weights, cfg.evaluator.targets)
    path = out / "rescored.json"
    atomic_write(path, json.dumps(rows, sort_keys=True, indent=2) + "\n")
    for e in rows[:args.top]:
        v = e.get("objective")
        print(f"iteration {e['iteration']}: V={'n/a' if v is None else f'{v:.6g}'} point={e['point']}")
    write_manifest(out, "rescore", cfg, {}, [path], [args.ledger])
    return EXIT_OK


def cmd_plot_policy(args, cfg: RunConfig, out: Path) -> int:
    policy, inputs = load_policy(args, cfg)
    spec = cfg.plotting
    if args.plane:
        spec = replace(spec, plane=Plane(args.plane))
    if args.format:
        spec = replace(spec, fmt=args.format)
    grid = policy_grid(policy, spec)
    path = out / f"policy_{spec.plane.value}.{spec.fmt}"
    written = write_plot(grid, path, also_png=not args.no_png)
    counts = np.bincount(grid.actions.ravel(), minlength=9)
    print(f"wrote {path} ({spec.nx}x{spec.ny}); action counts {counts.tolist()}")
    write_manifest(out, "plot-policy", cfg, {}, written, inputs)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig, out: Path) -> int:
    inputs = []
    if args.timings:
        reps = json.loads(Path(args.timings).read_text())
        rows = timing_table(reps, baseline=args.baseline or next(iter(reps)))
        inputs.append(args.timings)
    else:
        if args.policy:
            w = load_weights(args.policy)
            inputs.append(args.policy)
        else:
            w = init_weights(WIDE_LAYERS if args.arch == "wide" else DESK_LAYERS, cfg.master_seed)
        es = eval_set_for(args, cfg)
        if args.set:
            inputs.append(args.set)
        variants = [BenchVariant("lookahead_naive", NaiveQNetworkPolicy(w), True),
                    BenchVariant("lookahead_removed", NaiveQNetworkPolicy(w), False),
                    BenchVariant("vectorized", QNetworkPolicy(w), False)]
        rows = run_bench(variants, es, args.n, args.reps, cfg.reward, cfg.simulator)
    csv_path, png_path, json_path = out / "bench.csv", out / "bench.png", out / "bench.json"
    write_bench_csv(rows, csv_path)
    plot_bench(rows, png_path)
    atomic_write(json_path, json.dumps(
        {"protocol": "T = (T_N - T_1) / (N - 1); one warm-up, then the repetitions are averaged",
         "n": args.n, "rows": [r.__dict__ for r in rows]}, sort_keys=True, indent=2) + "\n")
    for r in rows:
        sp = "" if r.speedup is None else f"  speedup {r.speedup:.4f}x"
        print(f"{r.name:>20}: T={r.average:.6g} s/encounter{sp}")
    write_manifest(out, "bench", cfg, {"master_seed": cfg.master_seed},
                   [csv_path, png_path, json_path], inputs, deterministic=bool(args.timings))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser

def _triple(name):
    return dict(nargs=3, type=float, metavar=("ALERT", "REVERSAL", "CEASE"), help=name)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("-O", "--override", action="append", default=[], metavar="KEY=VALUE",
                        help="config override such as dqn.episodes=500 (repeatable)")
    common.add_argument("--out", default="out", help="artifact directory (default: ./out)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="casdrl", description="Collision-avoidance RL toolkit.")
    p.add_argument("--version", action="store_true", help="print package and file-format versions")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("generate-encounters", parents=[common], help="write a frozen encounter set")
    s.add_argument("--n", type=int)
    s.add_argument("--nmac-fraction", type=float)
    s.add_argument("--set-seed", type=int)
    s.add_argument("--json", action="store_true", help="also export a JSON copy")
    s.set_defaults(func=cmd_generate_encounters)

    s = sub.add_parser("solve-dp", parents=[common], help="solve the discretized MDP tables")
    s.add_argument("--mode", action="append", choices=["horizontal", "vertical", "joint"])
    s.add_argument("--reward", **_triple("reward costs"))
    s.set_defaults(func=cmd_solve_dp)

    s = sub.add_parser("train-dqn", parents=[common], help="train one Q-network")
    s.add_argument("--reward", **_triple("reward costs"))
    s.add_argument("--train-seed", type=int)
    s.set_defaults(func=cmd_train_dqn)

    s = sub.add_parser("evaluate", parents=[common], help="score a policy on an encounter set")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--weights")
    g.add_argument("--qtable")
    s.add_argument("--set", help="encounter set file (default: build from config)")
    s.add_argument("--reward", **_triple("reward costs"))
    s.add_argument("--lookahead", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("tune", parents=[common], help="surrogate search over the reward costs")
    s.add_argument("--set")
    s.add_argument("--save-weights", action="store_true")
    s.add_argument("--no-baseline", action="store_true", help="skip the untuned reference point")
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("sweep", parents=[common], help="append manual points to a ledger copy")
    s.add_argument("--ledger", required=True)
    s.add_argument("--between", type=int, nargs=2, metavar=("I", "J"))
    s.add_argument("--a", **_triple("sweep start"))
    s.add_argument("--b", **_triple("sweep end"))
    s.add_argument("--local", **_triple("local design centre"))
    s.add_argument("--radius", type=float, nargs="+", default=[0.1])
    s.add_argument("--n", type=int, default=6)
    s.add_argument("--set")
    s.add_argument("--dry-run", action="store_true", help="only list the planned points")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("rescore", parents=[common], help="re-rank a ledger under new weights")
    s.add_argument("--ledger", required=True)
    s.add_argument("--weights", type=float, nargs=3, metavar=("W_NMAC", "W_ALERT", "W_REV"))
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(func=cmd_rescore)

    s = sub.add_parser("plot-policy", parents=[common], help="draw a policy plot")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--weights")
    g.add_argument("--qtable")
    s.add_argument("--plane", choices=[p.value for p in Plane])
    s.add_argument("--format", choices=["ppm", "svg", "csv", "png"])
    s.add_argument("--no-png", action="store_true", help="skip the PNG figure")
    s.set_defaults(func=cmd_plot_policy)

    s = sub.add_parser("bench", parents=[common], help="time simulation variants")
    s.add_argument("--policy", help="weights file (default: random net, see --arch)")
    s.add_argument("--arch", choices=["wide", "desk"], default="wide")
    s.add_argument("--set")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--timings", help="JSON {variant: [per-repetition T]} to tabulate instead")
    s.add_argument("--baseline", help="baseline variant name for --timings")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.version:
        print(f"casdrl {package_version()}")
        for k, v in FORMAT_VERSIONS.items():
            print(f"  {k}: {v}")
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg, out)
    except (ConfigError, LedgerMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonConvergenceError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (PolicyContractError, TrainingDivergedError, EvaluationError, ArithmeticError,
            np.linalg.LinAlgError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
