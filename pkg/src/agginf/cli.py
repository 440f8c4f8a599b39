"""Command-line driver.

    agginf solve    --config run.toml [--seed N] [--tol X] [--max-iters N] [--out DIR]
    agginf simulate --config run.toml [--seed N] [--out DIR]
    agginf compare  --config a.toml --config b.toml [--out DIR]
    agginf validate [--instances N] [--seed N] [--tol X]

Exit status is 0 on success (including runs that did not converge, which
are reported in ``summary.json``), 1 on usage or configuration errors and 2
when the observations are infeasible under the model.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .baselines import bethe_rda_solve, nlbp_solve, observation_model, prox_solve
from .bp import all_beliefs, bp_solve
from .hmm import collective_forward_backward, hmm_to_tree, load_hmm, load_observations
from .mot import InfeasibleError, dense_marginals
from .pgm import SizeError, StructureError, TreeGraph, load_model, random_potentials, random_tree
from .sbp import sbp_solve
from .simulation import build_bird_migration, build_loopy_instance, build_sparse_sensing

EXACT_SOLVERS = {"sbp", "cfb", "dense-sinkhorn"}
COUNT_SOLVERS = {"nlbp", "betherda", "prox"}
SOLVERS = EXACT_SOLVERS | COUNT_SOLVERS | {"bp"}
SCENARIOS = {"grid", "sparse", "hmm-file", "pgm-file", "loopy"}


class UsageError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "repetitions": 1,
    "workers": 1,
    "scenario": {"kind": "grid"},
    "solver": {"name": "sbp", "tol": 1e-9, "max_iters": 10000},
    "output": {"dir": "out"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    doc = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        base = Path(path).resolve().parent
        sc = doc.get("scenario", {})
        for key in ("model", "observations"):
            if key in sc and not Path(sc[key]).is_absolute():
                sc[key] = str(base / sc[key])
    cfg = _merge(DEFAULTS, doc)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k in ("tol", "max_iters"):
            cfg["solver"][k] = v
        elif k == "out":
            cfg["output"]["dir"] = v
        else:
            cfg[k] = v
    check_config(cfg)
    return cfg


def scenario_observation_model(sc: dict) -> str:
    if sc["kind"] == "grid" and sc.get("observation", "sensor") == "poisson":
        return "counts"
    return "exact"


def check_config(cfg: dict) -> None:
    sc, so = cfg["scenario"], cfg["solver"]
    if sc.get("kind") not in SCENARIOS:
        raise UsageError(f"unknown scenario kind {sc.get('kind')!r}; choose from {sorted(SCENARIOS)}")
    if so.get("name") not in SOLVERS:
        raise UsageError(f"unknown solver {so.get('name')!r}; choose from {sorted(SOLVERS)}")
    kind = scenario_observation_model(sc)
    if so["name"] in EXACT_SOLVERS and kind == "counts":
        raise UsageError(f"solver {so['name']} needs exact aggregate marginals, not Poisson counts")
    if so["name"] in COUNT_SOLVERS and kind == "exact":
        raise UsageError(f"solver {so['name']} needs noisy counts (scenario observation = 'poisson')")
    if so["name"] == "cfb" and sc["kind"] not in ("grid", "sparse", "hmm-file"):
        raise UsageError("solver cfb needs an HMM scenario (grid, sparse or hmm-file)")
    if sc["kind"] in ("hmm-file", "pgm-file") and "model" not in sc:
        raise UsageError(f"scenario {sc['kind']} needs a 'model' path")
    if int(cfg["repetitions"]) < 1:
        raise UsageError("repetitions must be at least 1")
    if float(so["tol"]) <= 0 or int(so["max_iters"]) < 1:
        raise UsageError("tol must be positive and max_iters at least 1")


def config_hash(cfg: dict) -> str:
    """Hash of everything that can change the numbers (output paths excluded)."""
    relevant = {k: v for k, v in cfg.items() if k not in ("output", "workers")}
    blob = json.dumps(relevant, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Problem:
    kind: str
    graph: TreeGraph | None = None
    potentials: object = None
    observations: dict = field(default_factory=dict)
    hmm: object = None
    hmm_observations: list | None = None
    M: float = 1.0
    poisson: dict | None = None
    beta: float = 1.0
    truth: np.ndarray | None = None
    extra_tables: dict = field(default_factory=dict)


def build_problem(sc: dict, seed: int) -> Problem:
    kind = sc["kind"]
    w = tuple(sc.get("w", (3.0, 5.0, 5.0, 10.0)))
    if kind == "grid":
        bm = build_bird_migration(
            L=int(sc.get("L", 10)),
            T=int(sc.get("T", 10)),
            M=int(sc.get("M", 1000)),
            seed=seed,
            w=w,
            sigma=float(sc.get("sigma", 2.0)),
            beta=float(sc.get("beta", 1.0)),
            radius=int(sc.get("radius", 2)),
        )
        p = Problem(kind, hmm=bm.model, hmm_observations=bm.sbp_observations, truth=bm.truth.marginals())
        p.graph, p.potentials = bm.chain, bm.chain_potentials
        p.M, p.poisson, p.beta = float(bm.truth.M), bm.poisson_observations, bm.beta
        p.extra_tables = {"truth_counts": bm.truth.counts, "sensor_counts": bm.sensor_counts, "poisson_counts": bm.poisson_counts}
        return p
    if kind == "sparse":
        ss = build_sparse_sensing(
            L=int(sc.get("L", 20)),
            n_sensors=int(sc.get("sensors", 16)),
            M=int(sc.get("M", 10000)),
            T=int(sc.get("T", 15)),
            seed=seed,
            w=w,
            decay=float(sc.get("decay", 2.0)),
            estimator_prior=sc.get("estimator_prior", "uniform"),
        )
        p = Problem(kind, hmm=ss.model, hmm_observations=ss.observations, truth=ss.truth.marginals())
        p.extra_tables = {"truth_counts": ss.truth.counts, "sensor_counts": ss.sensor_counts}
        return p
    if kind == "hmm-file":
        model = load_hmm(sc["model"])
        if "observations" not in sc:
            raise UsageError("scenario hmm-file needs an 'observations' CSV path")
        obs = load_observations(sc["observations"], model.obs_dim)
        if len(obs) != model.T:
            raise UsageError(f"observation file has {len(obs)} rows, model has T={model.T}")
        return Problem(kind, hmm=model, hmm_observations=obs)
    if kind == "pgm-file":
        graph, pots, obs = load_model(sc["model"])
        missing = sorted(set(graph.observed) - set(obs))
        if missing:
            raise UsageError(f"observed nodes without an observation: {missing}")
        return Problem(kind, graph=graph, potentials=pots, observations={v: obs[v] / obs[v].sum() for v in graph.observed})
    graph, pots, obs = build_loopy_instance(
        seed, d=int(sc.get("d", 5)), rows=int(sc.get("rows", 2)), cols=int(sc.get("cols", 4))
    )
    return Problem(kind, graph=graph, potentials=pots, observations=obs)


@dataclass
class RunResult:
    marginals: list
    trace: list
    wall_ns: list
    iterations: int
    status: str
    runtime_s: float
    touched: int | None = None
    node_residuals: list | None = None


def _hmm_observed_map(p: Problem) -> dict:
    T = p.hmm.T
    return {T + t: np.asarray(r) / np.sum(r) for t, r in enumerate(p.hmm_observations) if r is not None and not np.all(np.isnan(r))}


def run_solver(p: Problem, so: dict) -> RunResult:
    name = so["name"]
    tol, max_iters = float(so["tol"]), int(so["max_iters"])
    start = time.perf_counter()
    if name == "cfb":
        msgs, n = collective_forward_backward(p.hmm, p.hmm_observations, tol=tol, max_iters=max_iters)
        res = RunResult(list(n), msgs.trace, msgs.wall_ns, msgs.sweeps, "converged" if msgs.converged else "max_iters", 0.0)
    elif name == "sbp":
        if p.hmm is not None:
            obs = _hmm_observed_map(p)
            graph, pots = hmm_to_tree(p.hmm, [v - p.hmm.T for v in obs])
            keep = p.hmm.T
        else:
            graph, pots, obs, keep = p.graph, p.potentials, p.observations, None
        r = sbp_solve(graph, pots, obs, tol=tol, max_iters=max_iters)
        marg = r.marginals[:keep] if keep else r.marginals
        res = RunResult(
            marg, r.state.sweep_residuals, r.state.wall_ns, r.state.sweeps,
            "converged" if r.converged else "max_iters", 0.0, r.state.store.updates, r.state.residuals,
        )
    elif name == "dense-sinkhorn":
        if p.hmm is not None:
            obs = _hmm_observed_map(p)
            graph, pots = hmm_to_tree(p.hmm, [v - p.hmm.T for v in obs])
            keep = p.hmm.T
        else:
            graph, pots, obs, keep = p.graph, p.potentials, p.observations, None
        marg, sk = dense_marginals(graph, pots, obs, tol=tol, max_iters=max_iters)
        res = RunResult(marg[:keep] if keep else marg, sk.trace, [], sk.sweeps, "converged" if sk.converged else "max_iters", 0.0)
    elif name == "bp":
        if p.hmm is not None:
            res = RunResult(list(p.hmm.prior_marginals()), [], [], 1, "converged", 0.0)
        else:
            store = bp_solve(p.graph, p.potentials, tol=tol, max_iters=max_iters)
            res = RunResult(all_beliefs(store), store.trace, [], store.iterations, "converged" if store.converged else "max_iters", 0.0)
    else:
        obs_model = observation_model("poisson", beta=p.beta)
        args = (p.graph, p.potentials, obs_model, p.poisson, p.M)
        if name == "nlbp":
            r = nlbp_solve(*args, damping=float(so.get("damping", 0.5)), max_iters=max_iters, tol=tol)
        elif name == "betherda":
            r = bethe_rda_solve(*args, learning_rate=float(so.get("learning_rate", 1.0)), max_iters=max_iters, tol=tol)
        else:
            r = prox_solve(*args, step_weight=float(so.get("step_weight", 0.1)), max_iters=max_iters, tol=tol)
        res = RunResult(r.marginals, [row[1] for row in r.trace], r.wall_ns, r.iterations, r.status, 0.0)
    res.runtime_s = time.perf_counter() - start
    return res


def _repetition(args):
    cfg, seed = args
    p = build_problem(cfg["scenario"], seed)
    return run_solver(p, cfg["solver"])


def derived_seeds(seed: int, n: int) -> list[int]:
    """First repetition uses ``seed`` itself; the rest are spawned from it."""
    children = np.random.SeedSequence(seed).spawn(max(n - 1, 0))
    return [seed] + [int(c.generate_state(1)[0]) for c in children]


def run_experiment(cfg: dict) -> dict:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = derived_seeds(int(cfg["seed"]), int(cfg["repetitions"]))
    jobs = [(cfg, s) for s in seeds]
    workers = int(cfg.get("workers", 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_repetition, jobs))
    else:
        results = [_repetition(j) for j in jobs]
    first = results[0]
    write_marginals(out / "marginals.csv", first.marginals)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "residual", "wall_ns"])
        for k, r in enumerate(first.trace, start=1):
            w.writerow([k, repr(float(r)), first.wall_ns[k - 1] if k - 1 < len(first.wall_ns) else ""])
    if first.node_residuals is not None:
        with open(out / "residuals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep", "node", "residual"])
            for s, row in enumerate(first.node_residuals, start=1):
                for node, r in sorted(row.items()):
                    w.writerow([s, node, repr(r)])
    times = np.array([r.runtime_s for r in results])
    summary = {
        "status": first.status,
        "converged": first.status == "converged",
        "iterations": first.iterations,
        "final_residual": float(first.trace[-1]) if first.trace else None,
        "touched_messages": first.touched,
        "solver": cfg["solver"]["name"],
        "scenario": cfg["scenario"]["kind"],
        "seed": int(cfg["seed"]),
        "repetition_seeds": seeds,
        "repetition_status": [r.status for r in results],
        "repetition_iterations": [r.iterations for r in results],
        "config_hash": config_hash(cfg),
        "timing": {
            "repetitions": len(results),
            "runtime_mean_s": float(times.mean()),
            "runtime_std_s": float(times.std()),
        },
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def write_marginals(path: Path, marginals) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "state", "prob"])
        for v, m in enumerate(marginals):
            for s, q in enumerate(np.asarray(m)):
                w.writerow([v, s, repr(float(q))])


def write_table(path: Path, table: np.ndarray, names: tuple[str, str, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names))
        for t, row in enumerate(table):
            for k in np.flatnonzero(row):
                w.writerow([t, int(k), repr(float(row[k]))])


def cmd_solve(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "tol": args.tol, "max_iters": args.max_iters, "out": args.out})
    summary = run_experiment(cfg)
    print(
        f"{summary['solver']} on {summary['scenario']}: {summary['status']} after {summary['iterations']} "
        f"iterations ({summary['timing']['runtime_mean_s']:.3f}s) -> {cfg['output']['dir']}"
    )
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
    sc = cfg["scenario"]
    if sc["kind"] not in ("grid", "sparse", "loopy"):
        raise UsageError("simulate needs a generated scenario (grid, sparse or loopy)")
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    p = build_problem(sc, int(cfg["seed"]))
    if sc["kind"] == "loopy":
        from .pgm import model_to_dict

        with open(out / "model.json", "w") as fh:
            json.dump(model_to_dict(p.graph, p.potentials, p.observations), fh)
        print(f"wrote {out / 'model.json'}")
        return 0
    from .hmm import hmm_to_dict

    write_table(out / "truth.csv", p.extra_tables["truth_counts"], ("t", "cell", "count"))
    write_table(out / "sensors.csv", p.extra_tables["sensor_counts"], ("t", "sensor", "count"))
    if "poisson_counts" in p.extra_tables:
        write_table(out / "poisson.csv", p.extra_tables["poisson_counts"], ("t", "cell", "count"))
    with open(out / "hmm.json", "w") as fh:
        json.dump(hmm_to_dict(p.hmm), fh)
    np.savetxt(out / "observations.csv", p.extra_tables["sensor_counts"], delimiter=",", fmt="%.17g")
    print(f"wrote scenario files to {out}")
    return 0


def cmd_compare(args) -> int:
    if not args.config:
        raise UsageError("compare needs at least one --config")
    cfgs = []
    for path in args.config:
        cfg = load_config(path, {"seed": args.seed, "tol": args.tol, "max_iters": args.max_iters})
        extra = cfg.get("compare", {}).get("solvers")
        if extra:
            for name in extra:
                c = copy.deepcopy(cfg)
                c["solver"]["name"] = name
                check_config(c)
                cfgs.append(c)
        else:
            cfgs.append(cfg)
    ref = cfgs[0]
    for c in cfgs[1:]:
        if c["scenario"] != ref["scenario"] or c["seed"] != ref["seed"]:
            raise UsageError("compared runs must share scenario and seed")
    out = Path(args.out or ref["output"]["dir"])
    rows = []
    for c in cfgs:
        c = copy.deepcopy(c)
        c["output"]["dir"] = str(out / c["solver"]["name"])
        s = run_experiment(c)
        rows.append(
            {
                "solver": s["solver"],
                "status": s["status"],
                "iterations": s["iterations"],
                "runtime_mean_s": s["timing"]["runtime_mean_s"],
                "runtime_std_s": s["timing"]["runtime_std_s"],
                "touched_messages": s["touched_messages"],
            }
        )
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{'solver':<16}{'status':<12}{'iters':>8}{'mean s':>12}{'std s':>12}")
    for r in rows:
        print(f"{r['solver']:<16}{r['status']:<12}{r['iterations']:>8}{r['runtime_mean_s']:>12.4f}{r['runtime_std_s']:>12.4f}")
    return 0


def validate(instances: int = 20, seed: int = 0, tol: float = 1e-10, bound: float = 1e-8) -> tuple[bool, float]:
    """SBP against dense Sinkhorn on small random trees; returns (ok, worst 1-norm gap)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        J = int(rng.integers(2, 6))
        dims = tuple(int(d) for d in rng.integers(2, 5, size=J))
        base = TreeGraph(dims, random_tree(rng, J), frozenset())
        leaves = [v for v in range(J) if base.degree(v) == 1]
        k = int(rng.integers(1, min(3, len(leaves)) + 1))
        observed = [int(v) for v in rng.choice(leaves, size=k, replace=False)]
        graph = base.with_observed(observed)
        pots = random_potentials(rng, graph)
        obs = {v: rng.dirichlet(np.ones(dims[v])) for v in observed}
        r = sbp_solve(graph, pots, obs, tol=tol)
        dense, _ = dense_marginals(graph, pots, obs, tol=tol)
        for v in range(J):
            if v not in obs:
                worst = max(worst, float(np.abs(r.marginals[v] - dense[v]).sum()))
    return worst <= bound, worst


def cmd_validate(args) -> int:
    ok, worst = validate(args.instances, args.seed or 0, args.tol or 1e-10)
    print(f"{'PASS' if ok else 'FAIL'}: worst 1-norm gap between SBP and dense Sinkhorn = {worst:.3e}")
    return 0 if ok else 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agginf", description="Inference from aggregate observations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, multi=False):
        if multi:
            p.add_argument("--config", action="append", help="TOML experiment config (repeatable)")
        else:
            p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iters", type=int)
        p.add_argument("--out", help="output directory")

    common(sub.add_parser("solve", help="run one solver on one scenario"))
    common(sub.add_parser("simulate", help="write a generated scenario to disk"))
    common(sub.add_parser("compare", help="run several solvers on the same scenario"), multi=True)
    v = sub.add_parser("validate", help="check SBP against dense Sinkhorn on random trees")
    v.add_argument("--instances", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=1e-10)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"solve": cmd_solve, "simulate": cmd_simulate, "compare": cmd_compare, "validate": cmd_validate}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"agginf: error: {exc}", file=sys.stderr)
        return 1
    except (StructureError, SizeError, ValueError, KeyError, OSError) as exc:
        if isinstance(exc, InfeasibleError):
            print(f"agginf: infeasible: {exc}", file=sys.stderr)
            return 2
        print(f"agginf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
