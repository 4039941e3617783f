"""Command line: ``coevo [global flags] <subcommand> [options]``.

Exit codes: 0 success, 2 validation error, 3 resource guard, 4 numerical failure.
Numerical modules are imported only after ``--threads`` has been applied,
because numba fixes its thread pool size on import.
"""

import argparse
import csv
import json
import os
import sys
import warnings

SUBCOMMANDS = ("simulate", "limit", "metric", "sample", "experiment", "fit")


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="TOML configuration file")
    p.add_argument("--seed", type=int, default=default, help="unsigned 64-bit seed (overrides [rng])")
    p.add_argument("--threads", type=int, default=default, help="numba worker threads")
    p.add_argument("--out", default=default, help="output directory (default: ./out)")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [],
                   metavar="SECTION.KEY=VALUE", help="override one config value (TOML literal)")


def build_parser():
    parser = argparse.ArgumentParser(prog="coevo", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate the N-agent system")
    _global_flags(p, suppress=True)
    p.add_argument("--init", help="start from a snapshot CSV instead of sampling the triplet")
    p.add_argument("--every", type=int, default=1, help="write states every k steps")

    p = sub.add_parser("limit", help="solve the discretized mean-field limit")
    _global_flags(p, suppress=True)
    p.add_argument("--every", type=int, default=1, help="write states every k steps")

    p = sub.add_parser("metric", help="norms and distances between snapshots or kernels")
    _global_flags(p, suppress=True)
    p.add_argument("kind", choices=("cut", "pm1", "w1", "delta", "gamma", "hom"))
    p.add_argument("first", help="snapshot CSV (or kernel CSV for cut/pm1/hom)")
    p.add_argument("second", nargs="?", help="second snapshot for two-argument metrics")
    p.add_argument("--exact", action="store_true", help="exact enumeration where available")
    p.add_argument("--edges", default="0-1", help="oriented edges of F for hom, e.g. 0-1,1-2")
    p.add_argument("--restarts", type=int, default=8, help="restarts for heuristic delta and gamma")

    p = sub.add_parser("sample", help="draw an N-agent sample from the configured triplet")
    _global_flags(p, suppress=True)

    p = sub.add_parser("experiment", help="run a configured experiment and emit its bundle")
    _global_flags(p, suppress=True)
    p.add_argument("--kind", help="override [experiment].kind")
    p.add_argument("--sweep", help="comma-separated N values")
    p.add_argument("--replicas", type=int)

    p = sub.add_parser("fit", help="power-law fit of error vs N from a CSV")
    _global_flags(p, suppress=True)
    p.add_argument("table", help="CSV with N, mean and stderr columns")
    p.add_argument("--x-col", default="N")
    p.add_argument("--mean-col", default="mean")
    p.add_argument("--se-col", default="stderr")
    return parser


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise SystemExit("--threads must be positive")
    os.environ["NUMBA_NUM_THREADS"] = str(n)
    if "numba" in sys.modules:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _peek_threads(path):
    """Thread count from a config file, read without touching numba."""
    if not path:
        return None
    try:
        from ._compat import toml_module

        with open(path, "rb") as fh:
            return toml_module().load(fh).get("experiment", {}).get("threads")
    except Exception:
        return None


def _overrides(items):
    from ._compat import toml_module
    from .errors import ValidationError

    toml = toml_module()
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2:
            raise ValidationError("--set", f"expected SECTION.KEY=VALUE, got {item!r}")
        try:
            val = toml.loads(f"v = {value}")["v"]
        except toml.TOMLDecodeError:
            val = value
        out.setdefault(parts[0], {})[parts[1]] = val
    return out


def _load(args):
    from .core import _merge, load_config, validate_config

    cfg = load_config(args.config) if args.config else validate_config({})
    cfg = _merge(cfg, _overrides(args.set))
    if args.seed is not None:
        cfg["rng"]["seed"] = args.seed
    return validate_config(cfg)


def _out(args):
    path = args.out or "out"
    os.makedirs(path, exist_ok=True)
    return path


def _write_meta(out, cfg, extra):
    from .core import config_hash
    from .harness.output import ResultBundle, emit_outputs

    bundle = ResultBundle(extra.pop("command"), int(cfg["rng"]["seed"]), config_hash(cfg),
                          metadata={"config": cfg, **extra})
    emit_outputs(bundle, out)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _trajectory_rows(history, dt, every, ids, extra_cols, seed, chash):
    T, n, d = history.shape
    for k in range(0, T, every):
        for i in range(n):
            yield [repr(float(k * dt)), int(ids[i]), *extra_cols[i],
                   *(repr(float(v)) for v in history[k, i]), seed, chash]


def cmd_simulate(args, cfg):
    from .core import RngSpec, TimeGrid, coefficients_from_config, config_hash
    from .harness.experiments import source_triplet
    from .meanfield import mixture_from_config, sample_mixture
    from .particles import DynamicsVariant, read_snapshot, simulate, write_snapshot

    out = _out(args)
    coeffs = coefficients_from_config(cfg)
    rng = RngSpec(int(cfg["rng"]["seed"]))
    grid = TimeGrid(cfg["time"]["t_end"], cfg["time"]["dt"])
    variant = DynamicsVariant.from_config(cfg["system"])
    if args.init:
        ens = read_snapshot(args.init)
        labels = [-1] * ens.n_agents
    else:
        triplet = source_triplet(cfg["system"], coeffs.domain, rng)
        labels, ens = sample_mixture(triplet, mixture_from_config(cfg["system"], triplet.masses), rng)
    traj = simulate(ens, coeffs, variant, grid, rng, record_states=True,
                    snapshots=grid.times()[:: max(1, grid.n_steps // 10)])
    seed, chash = int(cfg["rng"]["seed"]), config_hash(cfg)
    d = ens.dim
    _write_rows(os.path.join(out, "trajectory.csv"),
                ["t", "agent", "label"] + [f"x{j}" for j in range(d)] + ["seed", "config_hash"],
                _trajectory_rows(traj.state_history, grid.dt, args.every, range(ens.n_agents),
                                 [[int(l)] for l in labels], seed, chash))
    write_snapshot(os.path.join(out, "initial.csv"), ens)
    write_snapshot(os.path.join(out, "final.csv"), traj.final)
    _write_meta(out, cfg, {"command": "simulate", "weight_bound_ok": traj.bound_holds(10 * grid.dt),
                           "variant": variant.kind})
    return 0


def cmd_limit(args, cfg):
    from .core import RngSpec, TimeGrid, coefficients_from_config, config_hash
    from .harness.experiments import source_triplet
    from .meanfield import solve_limit
    from .particles import DynamicsVariant, ParticleEnsemble, write_snapshot

    out = _out(args)
    coeffs = coefficients_from_config(cfg)
    rng = RngSpec(int(cfg["rng"]["seed"]))
    grid = TimeGrid(cfg["time"]["t_end"], cfg["time"]["dt"])
    variant = DynamicsVariant.from_config(cfg["system"])
    K = cfg["system"]["paths"]
    triplet = source_triplet(cfg["system"], coeffs.domain, rng)
    traj = solve_limit(triplet, coeffs, grid, K, rng, variant=variant, record_states=True,
                       snapshots=grid.times()[:: max(1, grid.n_steps // 10)])
    seed, chash = int(cfg["rng"]["seed"]), config_hash(cfg)
    E = traj.final.n_entities
    lab = traj.final.labels
    _write_rows(os.path.join(out, "limit_trajectory.csv"),
                ["t", "entity", "label", "prob"] + [f"x{j}" for j in range(triplet.dim)]
                + ["seed", "config_hash"],
                _trajectory_rows(traj.state_history, grid.dt, args.every, range(E),
                                 [[int(lab[e]), repr(float(traj.probs[e]))] for e in range(E)],
                                 seed, chash))
    fin = traj.final
    write_snapshot(os.path.join(out, "limit_final.csv"), ParticleEnsemble(fin.states, fin.weights, fin.t))
    _write_meta(out, cfg, {"command": "limit", "entities": E, "paths": K,
                           "weight_bound_ok": traj.bound_holds(10 * grid.dt)})
    return 0


def _read_any(path):
    """Snapshot CSV as a uniform triplet, or kernel CSV (masses row + values) as a triplet."""
    import numpy as np

    from .graphon import read_kernel
    from .meanfield import StepTriplet
    from .particles import read_snapshot

    with open(path) as fh:
        first = fh.readline().strip()
    if first == "N,d,t":
        ens = read_snapshot(path)
        return StepTriplet.uniform(ens.states, ens.weights)
    k = read_kernel(path)
    return StepTriplet(k.masses, np.zeros((k.n, 1)), k.values)


def cmd_metric(args, cfg):
    from .core import RngSpec, coefficients_from_config
    from .graphon import (StepKernel, cut_norm_exact, cut_norm_heuristic, hom_density,
                          infinity_to_one_norm)
    from .metrics import (delta_exact_small, delta_heuristic, gamma_heuristic, gamma_terms,
                          wasserstein1)
    from .errors import ValidationError

    rng = RngSpec(int(cfg["rng"]["seed"]))
    domain = coefficients_from_config(cfg).domain
    t1 = _read_any(args.first)
    two = args.kind in ("w1", "delta", "gamma")
    if two and not args.second:
        raise ValidationError("metric", f"{args.kind} needs two inputs")
    t2 = _read_any(args.second) if args.second else None
    if t2 is not None and t1.dim != domain.dim:
        domain = type(domain)(domain.kind, t1.dim)
    result = {"metric": args.kind, "inputs": [p for p in (args.first, args.second) if p]}
    if args.kind in ("cut", "pm1", "hom"):
        values = t1.kernel if t2 is None else t1.kernel - t2.kernel
        if t2 is not None and (t1.n_labels != t2.n_labels or abs(t1.masses - t2.masses).max() > 0):
            raise ValidationError("metric", "labeled difference needs equal label sets")
        k = StepKernel(t1.masses, values)
        if args.kind == "cut":
            value, wit = cut_norm_exact(k) if args.exact else cut_norm_heuristic(k, rng=rng)
            result.update(value=value, S=sorted(int(i) for i in wit.S), T=sorted(int(i) for i in wit.T),
                          method="exact" if args.exact else "heuristic")
        elif args.kind == "pm1":
            result.update(value=infinity_to_one_norm(k), method="exact")
        else:
            edges = [tuple(int(v) for v in e.split("-")) for e in args.edges.split(",") if e]
            result.update(value=hom_density(edges, k), edges=edges)
    elif args.kind == "w1":
        res = wasserstein1(t1.states, t2.states, t1.masses, t2.masses, domain)
        result.update(value=res.value, exact=res.exact)
        report = (res.value, res.exact, res.value, 0.0, 0)
    elif args.kind == "delta":
        res = (delta_exact_small(t1, t2, domain) if args.exact
               else delta_heuristic(t1, t2, restarts=args.restarts, rng=rng, domain=domain))
        result.update(value=res.value, state_part=res.state_part, cut_part=res.cut_part,
                      certified=res.certified, notes=list(res.notes))
        report = (res.value, res.certified, res.state_part, res.cut_part,
                  0 if args.exact else args.restarts)
    else:
        value, coup, lower = gamma_heuristic(t1, t2, restarts=args.restarts, rng=rng, domain=domain)
        state, fwd, bwd, _, _ = gamma_terms(t1, t2, coup, domain, rng)
        result.update(value=value, lower_bound=lower)
        report = (value, False, state, fwd + bwd, args.restarts)
    out = _out(args)
    if two:
        value, certified, state_part, cut_part, restarts = report
        pair = f"{os.path.basename(args.first)}:{os.path.basename(args.second)}"
        _write_rows(os.path.join(out, "metric.csv"),
                    ["pair_id", "metric", "value", "certified", "state_part", "cut_part", "restarts", "seed"],
                    [[pair, args.kind, repr(float(value)), "true" if certified else "false",
                      repr(float(state_part)), repr(float(cut_part)), restarts, int(cfg["rng"]["seed"])]])
    with open(os.path.join(out, "metric.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_sample(args, cfg):
    from .core import RngSpec, coefficients_from_config, config_hash
    from .harness.experiments import source_triplet
    from .meanfield import mixture_from_config, sample_mixture
    from .particles import write_snapshot

    out = _out(args)
    coeffs = coefficients_from_config(cfg)
    rng = RngSpec(int(cfg["rng"]["seed"]))
    triplet = source_triplet(cfg["system"], coeffs.domain, rng)
    labels, ens = sample_mixture(triplet, mixture_from_config(cfg["system"], triplet.masses), rng)
    write_snapshot(os.path.join(out, "sample.csv"), ens)
    seed, chash = int(cfg["rng"]["seed"]), config_hash(cfg)
    _write_rows(os.path.join(out, "labels.csv"), ["agent", "label", "seed", "config_hash"],
                ([i, int(l), seed, chash] for i, l in enumerate(labels)))
    _write_meta(out, cfg, {"command": "sample"})
    return 0


def cmd_experiment(args, cfg):
    from .harness import ExperimentSpec, emit_outputs, run_experiment

    exp = cfg["experiment"]
    if args.kind:
        exp["kind"] = args.kind
    if args.sweep:
        exp["sweep"] = [int(v) for v in args.sweep.split(",") if v]
    if args.replicas is not None:
        exp["replicas"] = args.replicas
    spec = ExperimentSpec.from_config(cfg, out_dir=_out(args))
    bundle = run_experiment(spec)
    for path in emit_outputs(bundle, spec.out_dir):
        print(path)
    return 0


def cmd_fit(args, cfg):
    from .errors import ValidationError
    from .harness import fit_rate

    try:
        with open(args.table, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ValidationError("fit", f"cannot read {args.table}: {exc}") from None
    try:
        pts = [(float(r[args.x_col]), float(r[args.mean_col]), float(r[args.se_col])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise ValidationError("fit", f"{args.table}: bad or missing column ({exc})") from None
    fit = fit_rate(pts)
    result = fit.as_dict()
    result["points"] = fit.points
    out = _out(args)
    with open(os.path.join(out, "fit.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(result, sort_keys=True))
    return 0


_COMMANDS = {"simulate": cmd_simulate, "limit": cmd_limit, "metric": cmd_metric,
             "sample": cmd_sample, "experiment": cmd_experiment, "fit": cmd_fit}


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else _peek_threads(args.config)
    _apply_threads(threads)
    warnings.filterwarnings("ignore", message="The TBB threading layer")

    from .errors import CoevoError

    try:
        cfg = _load(args)
        return _COMMANDS[args.command](args, cfg)
    except CoevoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 4
    except MemoryError as exc:
        print(f"error: out of memory: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
