"""Command-line entry point: check, abstract, synthesize, simulate, verify-bisim, pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .abstraction import ExplicitDisturbances, build_abstraction, load_abstraction, sampled_system, save_abstraction
from .lyapunov import AbstractionParams, InfeasibleError
from .metric import FiniteMetricSystem, Relation, VectorMetric, check_disturbance_bisimulation
from .network import ConfigError, Network, config_hash, load_config
from .ode import Box
from .runtime import NotWinning, RelationViolation, sample_initial_states, simulate_network
from .synthesis import Controller

log = logging.getLogger("dbsynth")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_EMPTY = 3
EXIT_RELATION = 4


class EmptyWinningSet(RuntimeError):
    pass


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def network_from_args(args) -> Network:
    cfg = load_config(args.config)
    return Network(cfg, norm=getattr(args, "norm", None), spec_margin=getattr(args, "spec_margin", None))


def run_check(net: Network) -> dict:
    rep = net.check()
    if not rep["feasible"]:
        bad = [i for i, r in rep["subsystems"].items() if r["eta_max"] is None]
        msg = f"infeasible parameters (small-gain lambda_max={rep['small_gain']['lambda_max']:.4f}"
        msg += f", subsystems without admissible eta: {bad})" if bad else ")"
        raise InfeasibleError(msg)
    return rep


def _abs_path(out: Path, template: str) -> Path:
    return out / f"abstraction_{template}.bin"


def _ctrl_path(out: Path, template: str) -> Path:
    return out / f"controller_{template}.txt"


def run_abstract(net: Network, out: Path, templates=None, mode: str = "box", threads: int = 1,
                 report=None) -> dict:
    """Build (and persist) one abstraction per template; identical templates share one build."""
    report = report or run_check(net)
    out.mkdir(parents=True, exist_ok=True)
    built, by_digest = {}, {}
    for tn in templates or list(net.templates):
        key = (net.templates[tn].digest(), report["templates"][tn]["eta"])
        if key in by_digest:
            built[tn] = by_digest[key]
        else:
            built[tn] = by_digest[key] = net.build_abstraction(tn, mode, report, threads)
        if mode == "box":
            spec = net.abstract_spec(tn, built[tn].state_grid)
            save_abstraction(_abs_path(out, tn), built[tn], {"target": spec.target, "safe": spec.safe})
    return built


def run_synthesize(net: Network, abstractions: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ctrls = {}
    for tn, abs_ in abstractions.items():
        ctrl, spec = net.synthesize(tn, abs_)
        if not ctrl.winning.any():
            raise EmptyWinningSet(f"template {tn!r}: empty winning set")
        ctrl.save(_ctrl_path(out, tn))
        ctrls[tn] = ctrl
    return ctrls


def load_template_abstraction(net: Network, directory: Path, template: str):
    abs_, _ = load_abstraction(_abs_path(directory, template))
    if abs_.meta.get("template_digest") != net.templates[template].digest():
        raise ConfigError(f"{_abs_path(directory, template)} was built for a different {template!r} template")
    return abs_


def load_artifacts(net: Network, directory: Path):
    abstractions, ctrls = {}, {}
    for tn in net.templates:
        abs_ = load_template_abstraction(net, directory, tn)
        ctrl = Controller.load(_ctrl_path(directory, tn))
        if ctrl.meta.get("grid") != abs_.state_grid.digest():
            raise ConfigError(f"{_ctrl_path(directory, tn)} does not match its abstraction grid")
        abstractions[tn], ctrls[tn] = abs_, ctrl
    return abstractions, ctrls


def run_simulate(net: Network, abstractions: dict, ctrls: dict, out: Path, seed=None, steps=None):
    sim = net.cfg.get("simulation", {})
    seed = sim.get("seed", 0) if seed is None else seed
    steps = steps or sim.get("max_steps", 500)
    subs = net.sim_subsystems(abstractions, ctrls)
    x0 = sample_initial_states(subs, seed)
    x0.update({k: np.asarray(v, dtype=float) for k, v in sim.get("initial_states", {}).items()})
    t0 = time.perf_counter()
    traj = simulate_network(subs, x0, steps, net.tau, net.tau / net.substeps,
                            stop_when_reached=sim.get("stop_when_reached", True), seed=seed)
    elapsed = time.perf_counter() - t0
    traj.meta.update({"config_hash": config_hash(net.cfg), "norm": net.norm, "spec_margin": net.spec_margin,
                      "initial_states": {k: np.asarray(v).tolist() for k, v in x0.items()},
                      "controllers": {tn: c.meta.get("grid") for tn, c in ctrls.items()}})
    out.mkdir(parents=True, exist_ok=True)
    traj.save(out / "trajectory.csv", out / "trajectory_meta.json")
    return traj, elapsed


def verify_bisimulation(net: Network, template: str, scale: int = 1, report=None) -> dict:
    """Exhaustive disturbance-bisimulation check on a window of the grid.

    The sampled-time system starts from the window's grid points and uses
    inputs and disturbances both on and between the quantisation lattices;
    the abstraction is built in exact mode on the same window.
    """
    report = report or run_check(net)
    t = net.templates[template]
    params = net.params(template, report)
    grid = net.grid(template, report)
    grids = {tn: net.grid(tn, report) for tn in net.templates}
    shape = np.array(grid.shape)
    keep = np.maximum(1, np.ceil(shape / scale).astype(int))
    start = (shape - keep) // 2
    lo = (grid.kmin + start) * grid.step
    hi = (grid.kmin + start + keep - 1) * grid.step
    window = Box(lo, hi)
    ustep = max(1, int(scale))
    wide = ExplicitDisturbances(net._explicit_disturbances(template, grids).points()[::ustep])
    # compatible off-lattice disturbances: half-way between lattice values
    w2 = wide.points()
    eps_slot = np.zeros(t.field.dim_w)
    for e in net.edges:
        if net.instances.get(e.target) == template:
            for s in e.slots:
                eps_slot[s] = net.templates[net.instances[e.source]].eps
    shift = np.zeros(t.field.dim_w)
    for s in range(t.field.dim_w):
        col = np.unique(w2[:, s])
        if len(col) > 1:
            shift[s] = 0.5 * np.min(np.diff(col))
    w1 = np.unique(np.vstack([w2, w2 + shift]), axis=0)
    abs_ = build_abstraction(t.field, AbstractionParams(params.tau, params.eta, params.omega, params.eps,
                                                        params.eps_tilde, params.convention, params.psi,
                                                        params.eta_bound),
                             window, t.input_domain, wide, "exact", h=net.tau / net.substeps)
    U2 = abs_.input_grid.points()[::ustep]
    keep_u = np.arange(0, abs_.n_inputs, ustep)
    rows = abs_.rows[np.isin(abs_.rows[:, 1], keep_u)]
    rows[:, 1] = np.searchsorted(keep_u, rows[:, 1])
    S2 = FiniteMetricSystem(abs_.state_grid.points(), U2, w2, rows, net.tau, blocks=[1] * t.field.dim_w)
    ustep1 = np.min(np.diff(np.unique(U2[:, 0]))) / 2 if len(U2) > 1 else 0.0
    U1 = np.unique(np.vstack([U2, U2 + ustep1]), axis=0)
    U1 = U1[np.all((U1 >= t.input_domain.lower) & (U1 <= t.input_domain.upper), axis=1)]
    S1 = sampled_system(t.field, abs_.state_grid.points(), U1, w1, net.tau, net.tau / net.substeps,
                        blocks=[1] * t.field.dim_w)
    rel = t.relation()
    M = np.asarray(rel.contains(S1.states[:, None, :], S2.states[None, :, :]))
    R = Relation.from_matrix(M)
    rep = check_disturbance_bisimulation(S1, S2, R, t.eps, eps_slot, VectorMetric([1] * t.field.dim_w))
    return {"template": template, "holds": rep.holds, "pairs_checked": rep.pairs_checked,
            "pairs_frontier": rep.pairs_unexpanded, "witnesses": rep.witnesses[:5], "warning": rep.warning,
            "states": [S1.n_states, S2.n_states], "inputs": [S1.n_inputs, S2.n_inputs],
            "disturbances": [S1.n_disturbances, S2.n_disturbances], "eta": params.eta.tolist(),
            "certified": bool(report["templates"][template]["certified"])}


def _print_check(rep: dict) -> None:
    sg = rep["small_gain"]
    print(f"network {rep['name']}: tau={rep['tau']} norm={rep['norm']} feasible={rep['feasible']}")
    print(f"small-gain ({sg['method']}): lambda_max={sg['lambda_max']:.4f} feasible={sg['feasible']}")
    if rep.get("small_gain_cross_check"):
        cc = rep["small_gain_cross_check"]
        print(f"small-gain ({cc['method']}): feasible={cc['feasible']}")
    for i, r in rep["subsystems"].items():
        def fmt(v):
            return "infeasible" if v is None else f"{v:.6f}"
        print(f"  {i}: eps_tilde={r['eps_tilde']} psi={r['psi']:.4f} eta_max[inf]={fmt(r['eta_max_inf'])} "
              f"eta_max[euclid]={fmt(r['eta_max_euclid'])} tau_max={fmt(r['tau_max'])}")
    for tn, r in rep["templates"].items():
        eta = "n/a" if r["eta"] is None else f"{r['eta']:.6f}"
        print(f"  template {tn}: eta={eta} chi={r['chi']:.4f} certified={r['certified']}")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbsynth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, help="YAML file or bundled config name")
        sp.add_argument("--norm", choices=["inf", "euclid"], help="norm applied to the neighbour precision vector")
        sp.add_argument("--spec-margin", dest="spec_margin", choices=["eps", "eps-plus-chi"])
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", type=Path, required=True, help="output directory")

    common(sub.add_parser("check", help="small-gain test and quantisation bounds"), out=False)
    sub.choices["check"].add_argument("--out", type=Path, help="write the report as JSON")
    sp = sub.add_parser("abstract", help="build abstraction files")
    common(sp)
    sp.add_argument("--template", action="append")
    sp.add_argument("--mode", choices=["box", "exact"], default="box")
    sp = sub.add_parser("synthesize", help="synthesise controllers from abstraction files")
    common(sp)
    sp.add_argument("--abstractions", type=Path, help="directory with abstraction files (default: --out)")
    sp = sub.add_parser("simulate", help="closed-loop simulation of the network")
    common(sp)
    sp.add_argument("--artifacts", type=Path, help="directory with abstraction and controller files (default: --out)")
    sp.add_argument("--steps", type=int)
    sp = sub.add_parser("verify-bisim", help="exhaustive bisimulation check at desk scale")
    common(sp, out=False)
    sp.add_argument("--template", action="append")
    sp.add_argument("--scale", type=int, default=1, help="keep 1/scale of the grid per dimension")
    sp.add_argument("--out", type=Path)
    sp = sub.add_parser("pipeline", help="check, abstract, synthesize and simulate")
    common(sp)
    sp.add_argument("--mode", choices=["box"], default="box")
    sp.add_argument("--steps", type=int)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        net = network_from_args(args)
        if args.command == "check":
            rep = net.check()
            _print_check(rep)
            if args.out:
                _dump(args.out, rep)
            return EXIT_OK if rep["feasible"] else EXIT_INFEASIBLE
        if args.command == "abstract":
            built = run_abstract(net, args.out, args.template, args.mode, args.threads)
            for tn, a in built.items():
                print(f"{tn}: {a.n_states} states x {a.n_inputs} inputs ({a.mode})")
            return EXIT_OK
        if args.command == "synthesize":
            src = args.abstractions or args.out
            abstractions = {tn: load_template_abstraction(net, src, tn) for tn in net.templates}
            ctrls = run_synthesize(net, abstractions, args.out)
            for tn, c in ctrls.items():
                print(f"{tn}: {int(c.winning.sum())} winning states")
            return EXIT_OK
        if args.command == "simulate":
            abstractions, ctrls = load_artifacts(net, args.artifacts or args.out)
            traj, elapsed = run_simulate(net, abstractions, ctrls, args.out, args.seed, args.steps)
            print(f"simulated {len(traj.ids)} subsystems for {traj.meta['steps']} steps in {elapsed:.2f}s; "
                  f"all reached={traj.meta['all_reached']} all safe={traj.meta['all_safe']}")
            return EXIT_OK
        if args.command == "verify-bisim":
            results = [verify_bisimulation(net, tn, args.scale) for tn in (args.template or list(net.templates))]
            for r in results:
                print(f"{r['template']}: holds={r['holds']} pairs={r['pairs_checked']} certified_eta={r['certified']}")
            if args.out:
                _dump(args.out, results)
            return EXIT_OK if all(r["holds"] for r in results) else EXIT_RELATION
        if args.command == "pipeline":
            report = run_check(net)
            args.out.mkdir(parents=True, exist_ok=True)
            _dump(args.out / "check.json", report)
            built = run_abstract(net, args.out, None, "box", args.threads, report)
            ctrls = run_synthesize(net, built, args.out)
            traj, elapsed = run_simulate(net, built, ctrls, args.out, args.seed, args.steps)
            print(f"pipeline done: {len(ctrls)} controllers, {len(traj.ids)} subsystems, "
                  f"all reached={traj.meta['all_reached']} all safe={traj.meta['all_safe']}")
            return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except EmptyWinningSet as exc:
        print(f"synthesis: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (RelationViolation, NotWinning) as exc:
        print(f"runtime: {exc}", file=sys.stderr)
        return EXIT_RELATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
