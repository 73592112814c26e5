"""Command-line entry point: ``rbstein <command> [--config FILE] [--seed N] [--out DIR] [--jobs N]``.

Commands
  simulate      policy comparison on a restart environment
  fit           pooled dynamics fit from a trajectory CSV
  ingest        daily records CSV -> trajectory CSV
  sensitivity   estimation-quality grid (``--metric kld`` or ``--metric mae``)
  split-eval    fit on the first half of a calendar, simulate the second half
  gen-data      synthetic daily records (or shared-calendar trajectories)
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .config import SimConfig, config_from_dict, load_mapping
from .harness import (
    POLICY_ORDER,
    REPLENISHING_3,
    SensitivityGrid,
    cre_matrices,
    fit_dynamics,
    gen_records,
    gen_split_trajectories,
    ingest,
    read_records_csv,
    run_comparison,
    sensitivity_kld,
    sensitivity_mae,
    split_half_eval,
    write_records_csv,
)
from .io import fmt, write_csv, write_jsonl, write_params
from .kstep import read_trajectories_csv, write_trajectories_csv
from .mdp import RngStream

log = logging.getLogger("rbstein")

# stream id used by gen-data so its draws never overlap a simulation's
GEN_STREAM = 11


def _sim_config(args) -> SimConfig:
    d = load_mapping(args.config) if args.config else {}
    cfg = config_from_dict(d)
    if args.seed is not None:
        cfg = cfg.with_(seeds=tuple(args.seed + s for s in cfg.seeds), env=replace(cfg.env, env_seed=args.seed))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_history_log(path, hists, policies, seeds) -> None:
    def records():
        for p in policies:
            for s in seeds:
                for r in hists[(p, s)].records():
                    yield {"policy": p, "seed": s, **r}

    write_jsonl(path, records())


def _write_env_params(path, cfg: SimConfig) -> None:
    if cfg.env.kind == "fitted":
        write_params(path, cfg.env.matrix, cfg.env.eta)
        return
    # synthetic arms differ between replications: one matrix per (seed, arm)
    from .engine import build_environment

    rows = []
    for s in cfg.seeds:
        P0 = build_environment(cfg, s).P0
        for a in range(cfg.n_arms):
            for i in range(cfg.n_states):
                for j in range(cfg.n_states):
                    rows.append((f"P[{s},{a}]", i, j, P0[a, i, j]))
    write_csv(path, ["param", "i", "j", "value"], rows)


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    policies = tuple(args.policies.split(",")) if args.policies else POLICY_ORDER
    table, curves, hists, resolved = run_comparison(cfg, policies, args.jobs)
    out = _out(args)
    write_csv(out / "summary.csv", table.header, table.csv_rows())
    write_csv(out / "curves.csv", ["t", "policy", "seed", "reward"], curves)
    if not args.no_runlog:
        _write_history_log(out / "runlog.jsonl", hists, policies, resolved.seeds)
    _write_env_params(out / "params.csv", resolved)
    for p in policies:
        m, se, n = table.lookup((p,), "avg_reward")
        print(f"{p:8s} avg_reward {fmt(m)} +- {fmt(se)} (n={n})")
    return 0


def cmd_fit(args) -> int:
    cfg = _sim_config(args)
    trajs = read_trajectories_csv(args.trajectories)
    fit = fit_dynamics(trajs, cfg.n_states, cfg.k_family, k_max=cfg.k_max)
    out = _out(args)
    write_params(out / "params.csv", fit.P, fit.eta)
    print(f"fit {fit.n_transitions} transitions, {fit.n_steps} steps, grad norm {fmt(fit.grad_norm)}, converged={fit.converged}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _sim_config(args)
    trajs = ingest(read_records_csv(args.records), cfg.n_states, cfg.k_max)
    out = _out(args)
    write_trajectories_csv(trajs, out / "trajectories.csv")
    print(f"{len(trajs)} trajectories")
    return 0


def _grid(args) -> SensitivityGrid:
    d = load_mapping(args.config) if args.config else {}
    known = {f.name for f in fields(SensitivityGrid)}
    bad = set(d) - known
    if bad:
        raise ValueError(f"unknown sensitivity keys: {sorted(bad)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    grid = SensitivityGrid(**d)
    if args.seed is not None:
        grid = replace(grid, seed=args.seed)
    if args.reps is not None:
        grid = replace(grid, reps=args.reps)
    return grid


def cmd_sensitivity(args) -> int:
    grid = _grid(args)
    table = (sensitivity_kld if args.metric == "kld" else sensitivity_mae)(grid, args.jobs)
    out = _out(args)
    write_csv(out / "summary.csv", table.header, table.csv_rows())
    for row in table.csv_rows():
        print(",".join(fmt(x) for x in row))
    return 0


def cmd_split_eval(args) -> int:
    cfg = _sim_config(args)
    if args.trajectories:
        trajs = read_trajectories_csv(args.trajectories)
    else:
        src = cfg.env
        rng = RngStream(src.env_seed, (GEN_STREAM,)).generator()
        trajs = gen_split_trajectories(REPLENISHING_3, src.n_entities, src.n_days, src.p_missing, rng)
    report, curves, hists = split_half_eval(cfg, trajs, args.jobs)
    out = _out(args)
    rows = list(report.table.csv_rows())
    rows.append(("data", "avg_reward", report.data_reward, "", 1))
    rows.append(("random-closed-form", "avg_reward", report.random_closed_form, "", 1))
    write_csv(out / "summary.csv", report.table.header, rows)
    write_csv(out / "curves.csv", ["t", "policy", "seed", "reward"], curves)
    write_params(out / "params.csv", report.fit.P, report.fit.eta)
    if not args.no_runlog:
        _write_history_log(out / "runlog.jsonl", hists, POLICY_ORDER, cfg.seeds)
    for p in POLICY_ORDER:
        m, se, _ = report.table.lookup((p,), "avg_reward")
        print(f"{p:8s} avg_reward {fmt(m)} +- {fmt(se)}")
    print(f"data (unlabeled credited max) {fmt(report.data_reward)}; random closed form {fmt(report.random_closed_form)}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _sim_config(args)
    src = cfg.env
    rng = RngStream(src.env_seed, (GEN_STREAM,)).generator()
    out = _out(args)
    if args.kind == "split":
        trajs = gen_split_trajectories(REPLENISHING_3, src.n_entities, src.n_days, src.p_missing, rng)
        write_trajectories_csv(trajs, out / "trajectories.csv")
        print(f"{len(trajs)} trajectories of {src.n_days} days")
        return 0
    S = cfg.n_states
    lo = src.p_low if src.p_low is not None else 1.0 / S + 0.05
    ps = rng.uniform(lo, src.p_high, size=src.n_entities)
    recs = gen_records(cre_matrices(ps, S), src.n_entities, src.n_days, src.p_missing, rng)
    write_records_csv(recs, out / "records.csv")
    write_csv(out / "entities.csv", ["entity_id", "p"], ((f"e{e:04d}", p) for e, p in enumerate(ps)))
    print(f"{len(recs)} records for {src.n_entities} entities")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--seed", type=int, help="base seed (offsets the configured seeds)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rbstein", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="compare policies")
    s.add_argument("--policies", help="comma-separated subset of random,myopic,ts-mcr")
    s.add_argument("--no-runlog", action="store_true", help="skip runlog.jsonl")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common], help="fit pooled dynamics")
    s.add_argument("--trajectories", required=True, help="CSV with entity_id,t,state[,action]")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("ingest", parents=[common], help="records to trajectories")
    s.add_argument("--records", required=True, help="CSV with entity_id,date,state")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("sensitivity", parents=[common], help="estimation-quality grid")
    s.add_argument("--metric", choices=("kld", "mae"), required=True)
    s.add_argument("--reps", type=int)
    s.set_defaults(func=cmd_sensitivity)

    s = sub.add_parser("split-eval", parents=[common], help="split-half evaluation")
    s.add_argument("--trajectories", help="shared-calendar trajectory CSV (generated if omitted)")
    s.add_argument("--no-runlog", action="store_true")
    s.set_defaults(func=cmd_split_eval)

    s = sub.add_parser("gen-data", parents=[common], help="synthetic data")
    s.add_argument("--kind", choices=("records", "split"), default="records")
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
