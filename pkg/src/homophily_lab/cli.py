"""Command-line front end.

Subcommands: ``calc``, ``randomize``, ``simulate``, ``estimate`` and
``experiment``. Exit codes: 0 success, 1 runtime failure, 2 invalid input
(config, parameters, roster or table schema).
"""
import argparse
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from ._version import __version__
from .config import ConfigValidationError, RunConfig
from .estimator import (
    COUNT_OUTCOMES,
    DYAD_FE,
    CollinearityWarning,
    DemeanedDesign,
    EstimationError,
    build_dyads,
    build_nodes,
    first_stage_regression,
    heterogeneity_regression,
    homophily_regression,
    proximity_regression,
)
from .model import (
    Distance,
    ModelInputError,
    ModelParams,
    closed_form,
    cost_of_distance,
    extended_dyad_link_prob,
    link_rates,
)
from .population import (
    allocate_population,
    expected_link_prob,
    frequency_oracle,
    generate_population,
    link_buckets,
    simulate_network,
)
from .randomization import allocate, format_cell, verify_alternation
from .tables import (
    COEFFICIENT_COLUMNS,
    SchemaError,
    average_replications,
    neighbourhood_sizes,
    read_dyads,
    read_nodes,
    read_roster,
    write_csv,
)

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _common(p, reps=True, mode=True):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=_u64, help="base seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    if reps:
        p.add_argument("--reps", type=_nonneg, help="replications per seed (overrides the config)")
    if mode:
        p.add_argument("--mode", choices=["learning", "preference", "mixed"], help="homophily channel")


def build_parser():
    parser = _Parser(prog="homophily-lab", description="Learning-driven friendship formation workbench.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calc", help="print the closed-form outputs for one dyad class")
    _common(p, reps=False)
    p.add_argument("--s", type=int, default=1, help="number of shared categories (default 1)")
    p.add_argument("--distance", default="far", help="near or far (default far)")
    for name in ("p0", "r", "c-near", "c-far"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--lambda-map", type=lambda s: [float(x) for x in s.split(",")])
    p.add_argument("--mu-map", type=lambda s: [float(x) for x in s.split(",")])

    p = sub.add_parser("randomize", help="build randomization lists and dorms")
    _common(p, reps=False, mode=False)
    p.add_argument("--roster", type=Path, help="roster CSV (student_id,cell,type); default: synthetic population")

    p = sub.add_parser("simulate", help="simulate baseline and endline networks")
    _common(p)

    p = sub.add_parser("estimate", help="run the regressions on simulated tables")
    _common(p, reps=False, mode=False)
    p.add_argument("--dyads", type=Path, help="dyad CSV (default OUT/dyads.csv)")
    p.add_argument("--nodes", type=Path, help="node CSV (default OUT/nodes.csv)")

    p = sub.add_parser("experiment", help="randomize, simulate, estimate and report over seeds")
    _common(p)
    p.add_argument("--n-seeds", type=_nonneg, help="number of consecutive seeds (overrides the config)")
    p.add_argument("--strict", action="store_true", help="exit 1 when a registered invariant fails")
    return parser


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {"seed": args.seed, "output_dir": str(args.out) if args.out else None,
               "replications": getattr(args, "reps", None), "mode": getattr(args, "mode", None),
               "n_seeds": getattr(args, "n_seeds", None)}
    return cfg.override(**changes)


def _out_dir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_calc(args):
    cfg = _load_config(args)
    model = dict(cfg.model)
    for key, attr in (("p0", "p0"), ("r", "r"), ("c_near", "c_near"), ("c_far", "c_far"),
                      ("lambda_map", "lambda_map"), ("mu_map", "mu_map")):
        v = getattr(args, attr)
        if v is not None:
            model[key] = v
    params = ModelParams.from_dict(model, allow_equal_costs=True)
    distance = Distance.parse(args.distance)
    if not 0 <= args.s <= params.K:
        raise ModelInputError(f"similarity count must be an integer in [0, {params.K}], got {args.s}")
    lam, mu = link_rates(params, cfg.mode, cfg.preference_lambda)
    out = closed_form(params, args.s, distance, lam=float(lam[args.s]))
    for line in out.lines(6):
        print(line)
    if cfg.homophily_mode.value != "learning":
        c = cost_of_distance(params, distance)
        ext = extended_dyad_link_prob(mu[args.s], params.p0, params.r, lam[args.s], c)
        print(f"extended_link_prob: {ext:.6f}")
    return EXIT_OK


def cmd_randomize(args):
    cfg = _load_config(args)
    if args.roster is not None:
        cells = read_roster(args.roster)
    else:
        cells = generate_population(cfg.sim_config(cfg.seed)).roster()
    cells = {k: cells[k] for k in sorted(cells, key=format_cell)}
    allocation = allocate(cells, cfg.seed, dorm_pattern=cfg.dorm_pattern)
    for cell, rl in allocation.lists.items():
        if not verify_alternation(rl):
            raise RuntimeError(f"list for cell {format_cell(cell)} fails the alternation check")
    out = _out_dir(cfg)
    table = allocation.table()
    write_csv(table[["cell", "position", "student_id", "combination", "student_type", "peer_type"]],
              out / "lists.csv")
    write_csv(table[["cell", "dorm_id", "bed", "student_id"]].sort_values(["cell", "dorm_id", "bed"],
                                                                          kind="mergesort"),
              out / "dorms.csv")
    print(f"randomized {len(table)} students in {len(cells)} cells -> {out}")
    return EXIT_OK


def _student_table(population, allocation):
    nodes = population.nodes.drop(columns=["latent_central"])
    alloc = allocation.table().set_index("student_id")
    for c in ("combination", "student_type", "peer_type", "dorm_id", "bed"):
        nodes[c] = alloc.loc[nodes["id"], c].to_numpy()
    return nodes


def cmd_simulate(args):
    cfg = _load_config(args)
    params = cfg.model_params()
    out = _out_dir(cfg)
    seed = cfg.seed
    sim = cfg.sim_config(seed)
    population = generate_population(sim)
    allocation = allocate_population(population, seed, cfg.dorm_pattern)
    write_csv(_student_table(population, allocation), out / "students.csv")
    pairs = population.dyad_pairs()
    proximity = allocation.indicators(*pairs, d_max=max(cfg.d_range))
    combos = np.array([allocation.assignments[k].combination for k in range(len(population))])

    def replicate(rep):
        outcomes = simulate_network(population, allocation, params, sim, cfg.mode, cfg.preference_lambda,
                                    replication=rep, pairs=pairs)
        dyads = build_dyads(population, proximity, outcomes, combos)
        dyads.insert(0, "replication", rep)
        for c in ("s", "near", "side_i", "side_j"):
            dyads[c] = outcomes[c].to_numpy().astype(np.int8) if c != "s" else outcomes[c].to_numpy()
        dyads["expected_link_prob"] = expected_link_prob(params, outcomes["s"], outcomes["near"],
                                                         outcomes["first"], cfg.mode, cfg.preference_lambda,
                                                         sim.first_year_near_multiplier)
        nodes = build_nodes(population, dyads, allocation.assignments)
        nodes.insert(0, "replication", rep)
        kept = outcomes if sim.persistence == 0 else outcomes[~outcomes["linked_baseline"]]
        return dyads, nodes, link_buckets(kept, sim.first_year_near_multiplier)

    reps = [replicate(rep) for rep in range(cfg.replications)]
    if reps:
        dyads, nodes, buckets = (pd.concat(parts, ignore_index=True) for parts in zip(*reps))
    else:
        # header-only tables with the same columns a real run writes
        dyads, nodes, buckets = (t.iloc[:0] for t in replicate(0))
    write_csv(dyads, out / "dyads.csv")
    write_csv(nodes, out / "nodes.csv")
    oracle = frequency_oracle(params, mode=cfg.mode, preference_lambda=cfg.preference_lambda, buckets=buckets)
    write_csv(oracle, out / "oracle_summary.csv")
    n_pass = int(oracle["pass"].sum()) if len(oracle) else 0
    print(f"simulated {cfg.replications} replication(s) of {len(pairs[0])} dyads; "
          f"oracle {n_pass}/{len(oracle)} buckets within 3 sigma -> {out}")
    return EXIT_OK


def _dropped_report(label, result):
    if result.dropped:
        print(f"{label}: dropped {', '.join(result.dropped)}", file=sys.stderr)


def cmd_estimate(args):
    cfg = _load_config(args)
    out = _out_dir(cfg)
    dyads = read_dyads(args.dyads or out / "dyads.csv")
    nodes = read_nodes(args.nodes or out / "nodes.csv")
    available = neighbourhood_sizes(dyads)
    d_range = [d for d in cfg.d_range if d in available]
    missing = [d for d in cfg.d_range if d not in available]
    if missing:
        raise SchemaError(f"dyad table: missing column 'l_{missing[0]}'")
    if dyads.empty:
        print("empty dyad table: nothing to estimate")
        return EXIT_OK
    dyads = average_replications(dyads, ["ego", "alter"], ["y"])
    nodes = average_replications(nodes, ["id"], [c for c in COUNT_OUTCOMES])
    n_written = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearityWarning)
        design = DemeanedDesign(dyads, DYAD_FE, "network")
        placebo = DemeanedDesign(dyads, DYAD_FE, "network", mask=dyads["baseline_available"].to_numpy(bool))
        for d in d_range:
            specs = {
                "proximity": proximity_regression(dyads, d, design=design),
                "heterogeneity": heterogeneity_regression(dyads, d, design=design),
                "first_stage": first_stage_regression(dyads, d, design=design),
            }
            if len(placebo) and pd.unique(placebo.clusters).size >= 2:
                specs["placebo"] = proximity_regression(dyads, d, outcome="baseline_link", design=placebo)
            for name, res in specs.items():
                _dropped_report(f"{name} d={d}", res)
                write_csv(res.to_frame(), out / f"coefficients_{name}_d{d}.csv", COEFFICIENT_COLUMNS)
                n_written += 1
        frames = []
        for outcome in COUNT_OUTCOMES:
            res = homophily_regression(nodes, outcome)
            _dropped_report(f"homophily {outcome}", res)
            frames.append(res.to_frame().assign(outcome=outcome))
        write_csv(pd.concat(frames, ignore_index=True), out / "coefficients_homophily.csv",
                  ("outcome", *COEFFICIENT_COLUMNS))
    print(f"wrote {n_written + 1} coefficient tables -> {out}")
    return EXIT_OK


def cmd_experiment(args):
    from .experiment import run_experiment

    cfg = _load_config(args)
    report = run_experiment(cfg)
    out = report.write(_out_dir(cfg))
    for check in report.invariants:
        print(f"[{'PASS' if check['passed'] else 'FAIL'}] {check['name']}: {check['detail']}")
    print(f"report -> {out / 'report.json'} (config {report.provenance['config_hash'][:12]})")
    if args.strict and not report.passed:
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "calc": cmd_calc,
    "randomize": cmd_randomize,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "experiment": cmd_experiment,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --version
        return exc.code
    try:
        return COMMANDS[args.command](args)
    except (ConfigValidationError, ModelInputError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EstimationError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
