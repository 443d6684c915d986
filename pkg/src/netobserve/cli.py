"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .estimation import write_estimation_report
from .gramians import (GramianConfig, GramianObjective, empirical_gramian, random_orthogonal_set,
                       write_eigenvalue_report, write_gramian_csv)
from .harness import ExperimentConfig, NUMERICAL_ERRORS
from .integrators import DiscreteModel, reference_simulate, simulate, write_trajectory_csv
from .models import ModelConfigError, load_model, read_toml
from .oid import build_oid, centralities, scc_decompose, write_centrality_csv, write_edge_list, write_tgf
from .selection import (InfeasibleConstraintsError, JacobianObjective, SelectionBudgetError, SensorMask,
                        random_selection, select_exhaustive, select_greedy, select_stochastic,
                        write_selection_report)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
GLOBAL_KEYS = ("model", "scheme", "h", "N", "seed", "out")

log = logging.getLogger("netobserve")


class ConfigError(Exception):
    pass


def _global_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """Global flags; the subcommand copy suppresses defaults so it cannot
    overwrite values given before the subcommand name."""
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    p.add_argument("--config", help="TOML file with defaults for any flag")
    p.add_argument("--model", help="model file or bundled model name")
    p.add_argument("--scheme", choices=("be", "ti", "irk"))
    p.add_argument("--h", type=float, help="step size (default: the model's recommended_h)")
    p.add_argument("--N", type=int, nargs="+", help="number of samples (list for sweeps)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true",
                   default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_parser(suppress=True)
    parser = argparse.ArgumentParser(prog="netobserve", parents=[_global_parser()],
                                     description="Sensor selection and initial-state estimation for networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a trajectory")
    p.add_argument("--x0", type=float, nargs="+", help="initial state (default: seeded draw)")
    p.add_argument("--reference", action="store_true", help="use the adaptive reference integrator")

    p = sub.add_parser("estimate", parents=[common], help="estimate x0 from synthetic measurements")
    p.add_argument("--sensors", nargs="+", help="sensor node names")
    p.add_argument("--f", type=float, help="sensor fraction for a random mask")
    p.add_argument("--same-model-data", action="store_true")
    p.add_argument("--max-iter", type=int, default=500)

    p = sub.add_parser("select", parents=[common], help="choose sensors")
    p.add_argument("--f", type=float, nargs="+", default=[0.5], help="sensor fraction(s)")
    p.add_argument("--solver", choices=("greedy", "stochastic", "exhaustive"), default="greedy")
    p.add_argument("--objective", choices=("jacobian", "gramian2", "gramian3"), default="jacobian")
    p.add_argument("--forced", nargs="*", default=[])
    p.add_argument("--excluded", nargs="*", default=[])
    p.add_argument("--oid-blind", action="store_true", help="do not require root-component cover")
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--realizations", type=int, default=1)

    p = sub.add_parser("gramian", parents=[common], help="empirical observability Gramian")
    p.add_argument("--definition", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--sensors", nargs="+", help="sensor node names (default: all)")
    p.add_argument("--v", type=int, default=1, help="number of random orthogonal matrices")
    p.add_argument("--x0", type=float, nargs="+", help="base state (default: seeded draw)")

    p = sub.add_parser("graph", parents=[common], help="observability inference diagram")
    p.add_argument("--threshold", type=float, default=0.0)

    for name, helptext in (("sweep", "estimation-error sweep"), ("compare", "compare Methods 1-4")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--f", type=float, nargs="+")
        p.add_argument("--realizations", type=int)
        p.add_argument("--solver", choices=harness.SOLVERS)
        p.add_argument("--workers", type=int)
        p.add_argument("--same-model-data", action="store_true", default=None)
        p.add_argument("--oid-blind", action="store_true", default=None)
    return parser


def _merge_config(args) -> dict:
    """Values from ``--config`` for keys not given on the command line."""
    doc = read_toml(args.config) if args.config else {}
    for key in GLOBAL_KEYS:
        if getattr(args, key, None) is None and key in doc:
            val = doc[key]
            if key == "N" and not isinstance(val, list):
                val = [val]
            if key == "model":
                p = Path(args.config).parent / str(val)
                val = str(p) if p.exists() else val
            setattr(args, key, val)
    args.scheme = args.scheme or "irk"
    args.seed = 0 if args.seed is None else args.seed
    args.out = args.out or "."
    if args.model is None:
        raise ConfigError("--model is required")
    return doc


def _setup(args):
    model = load_model(args.model)
    h = args.h if args.h is not None else model.meta.get("recommended_h")
    if h is None:
        raise ConfigError(f"model {model.name!r} has no recommended_h; pass --h")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    N = (args.N or [50])[0]
    return model, DiscreteModel(model, args.scheme, float(h)), N, out


def _nodes(model, names):
    try:
        return [model.index(nm) for nm in names]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"unknown node: {exc}") from None


def _truth(model, args, explicit=None):
    if explicit is not None:
        x = np.asarray(explicit, dtype=float)
        if x.shape != (model.n,):
            raise ConfigError(f"initial state needs {model.n} values")
        return x
    law = model.meta.get("init_law", "one_plus_uniform")
    return harness.generate_truth(model, law, harness.stream(args.seed, 0, 0))


def cmd_simulate(args) -> int:
    model, dm, N, out = _setup(args)
    x0 = _truth(model, args, args.x0)
    if args.reference:
        traj = reference_simulate(model, x0, np.arange(N) * dm.h)
    else:
        traj = simulate(dm, x0, N)
    write_trajectory_csv(traj, model.node_names, out / "trajectory.csv")
    print(f"wrote {out / 'trajectory.csv'} ({N} samples)")
    return EXIT_OK


def cmd_estimate(args) -> int:
    model, dm, N, out = _setup(args)
    law = model.meta.get("init_law", "one_plus_uniform")
    x_true = harness.generate_truth(model, law, harness.stream(args.seed, 0, 0))
    x_guess = harness.generate_truth(model, law, harness.stream(args.seed, 0, 1))
    if args.sensors:
        mask = SensorMask.from_nodes(_nodes(model, args.sensors), model.n)
    else:
        f = 1.0 if args.f is None else args.f
        cfg = ExperimentConfig(model=args.model)
        cons = harness.build_constraints(model, harness.sensor_count(f, model.n), cfg)
        mask = random_selection(cons, harness.stream(args.seed, 0, 2))
    states = harness.make_data(model, dm, x_true, N, args.same_model_data)
    res = harness.estimate_with_mask(model, dm, states, mask, x_true, x_guess, args.max_iter)
    write_estimation_report(res, model.node_names, out / "estimate.csv")
    print(f"sensors {[model.node_names[i] for i in mask.nodes]} eta {res.eta:.3e} "
          f"iterations {res.iterations} status {res.status}")
    return EXIT_OK if res.converged else EXIT_NUMERICAL


def cmd_select(args) -> int:
    model, dm, N, out = _setup(args)
    cfg = ExperimentConfig(model=args.model, forced=tuple(args.forced), excluded=tuple(args.excluded),
                           oid_blind=args.oid_blind, f=tuple(args.f))
    law = model.meta.get("init_law", "one_plus_uniform")
    results, by_f = [], {}
    for fi, f in enumerate(args.f):
        cons = harness.build_constraints(model, harness.sensor_count(f, model.n), cfg)
        for k in range(args.realizations):
            x_true = harness.generate_truth(model, law, harness.stream(args.seed, k, 0))
            if args.objective == "jacobian":
                obj = JacobianObjective(dm, x_true, N)
            else:
                T_set = ()
                if args.objective == "gramian3":
                    T_set = tuple(random_orthogonal_set(model.n, 2, harness.stream(args.seed, k, 4, fi)))
                gcfg = GramianConfig(tau=max(N - 1, 1) * dm.h, dt=dm.h, x0=x_true, T_set=T_set)
                obj = GramianObjective(model, gcfg, int(args.objective[-1]))
            if args.solver == "greedy":
                res = select_greedy(obj, cons)
            elif args.solver == "exhaustive":
                res = select_exhaustive(obj, cons)
            else:
                res = select_stochastic(obj, cons, args.budget,
                                        np.random.SeedSequence(args.seed, spawn_key=(k, 3, fi)))
            results.append(res)
            by_f.setdefault(f, []).append(res.mask)
            print(f"f={f:g} realization {k}: {[model.node_names[i] for i in res.mask.nodes]} "
                  f"objective {res.objective:.6g} evaluations {res.evaluations}")
    write_selection_report(results, out / "selection.csv", model.node_names)
    if len(by_f) > 1 or args.realizations > 1:
        probs = harness.selection_probabilities(by_f)
        harness.write_probabilities_csv(model.node_names, probs, out / "probabilities.csv")
    return EXIT_OK


def cmd_gramian(args) -> int:
    model, dm, N, out = _setup(args)
    C = np.eye(model.n)
    if args.sensors:
        C = C[_nodes(model, args.sensors)]
    base = _truth(model, args, args.x0) if model.meta.get("A") is None or args.x0 else None
    T_set = ()
    if args.definition in (1, 3) and args.v > 1:
        T_set = tuple(random_orthogonal_set(model.n, args.v, harness.stream(args.seed, 0, 4)))
    gcfg = GramianConfig(tau=args.tau, dt=args.dt, x0=base, T_set=T_set)
    G = empirical_gramian(model, C, gcfg, args.definition)
    write_gramian_csv(G, model.node_names, out / "gramian.csv")
    write_eigenvalue_report(G, out / "gramian_eigenvalues.csv")
    lam = G.eigenvalues()
    print(f"Gramian definition {args.definition}: {G.simulations} simulations, "
          f"eigenvalues in [{lam.min():.3e}, {lam.max():.3e}]")
    return EXIT_OK


def cmd_graph(args) -> int:
    model = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = build_oid(model, threshold=args.threshold)
    scc = scc_decompose(g)
    table = centralities(g)
    write_edge_list(g, out / "oid_edges.txt")
    write_tgf(g, out / "oid.tgf")
    write_centrality_csv(g, table, out / "centrality.csv", scc)
    for comp, root in zip(scc.components, scc.roots):
        print(("root " if root else "     ") + " ".join(model.node_names[i] for i in comp))
    return EXIT_OK


def _experiment_config(args, doc) -> ExperimentConfig:
    fields = {k: v for k, v in doc.items() if k in harness._CONFIG_FIELDS}
    overrides = {"model": args.model, "scheme": args.scheme, "h": args.h, "N": args.N, "seed": args.seed,
                 "out": args.out, "f": args.f, "realizations": args.realizations, "solver": args.solver,
                 "workers": args.workers, "same_model_data": args.same_model_data,
                 "oid_blind": args.oid_blind}
    unknown = set(doc) - harness._CONFIG_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    fields.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_sweep(args, doc) -> int:
    cfg = _experiment_config(args, doc)
    records = harness.run_sweep(cfg)
    failed = sum(1 for r in records if r.failure)
    print(f"wrote {Path(cfg.out) / 'sweep.csv'}: {len(records)} runs, {failed} flagged")
    return EXIT_OK


def cmd_compare(args, doc) -> int:
    cfg = _experiment_config(args, doc)
    rows = harness.compare_methods(cfg)
    print(f"wrote {Path(cfg.out) / 'compare.csv'}: {len(rows)} rows")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "select": cmd_select,
            "gramian": cmd_gramian, "graph": cmd_graph}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = _merge_config(args)
        if args.command in ("sweep", "compare"):
            return (cmd_sweep if args.command == "sweep" else cmd_compare)(args, doc)
        return COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ModelConfigError, InfeasibleConstraintsError, SelectionBudgetError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
