"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row runs the same workload through both backends, checks that the
outputs agree and reports the best-of-``repeat`` wall time.
"""
import argparse
import time

import numpy as np

from agginf import kernels
from agginf.hmm import collective_forward_backward, random_hmm
from agginf.simulation import GridWorld, build_loglinear_transition, corner_initial


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_message(impl, repeat):
    rng = np.random.default_rng(0)
    psi = rng.uniform(0.1, 2.0, size=(8, 8))
    w = rng.uniform(size=8)
    out = np.empty(8)

    def run():
        for _ in range(20000):
            impl.message(psi, w, out)
        return out.copy()

    return best_of(run, repeat)


def bench_cfb(impl_name, repeat):
    rng = np.random.default_rng(1)
    model = random_hmm(rng, 200, 6, 6)
    obs = [rng.dirichlet(np.ones(6)) for _ in range(200)]
    return best_of(lambda: collective_forward_backward(model, obs, tol=1e-10, backend=impl_name)[1], repeat)


def bench_sampling(impl, repeat):
    world = GridWorld(20)
    cum = np.cumsum(build_loglinear_transition(world), axis=1)[None]
    cum[..., -1] = 1.0
    rng = np.random.default_rng(2)
    M, T = 20000, 15
    start = rng.choice(world.cells, size=M, p=corner_initial(world)).astype(np.int64)
    u = rng.random((M, T - 1))
    out = np.empty((M, T), dtype=np.int64)

    def run():
        impl.sample_paths(cum, start, u, out)
        return out.copy()

    return best_of(run, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        c = kernels.backend("cython")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    p = kernels.backend("python")
    rows = [
        ("message x20000 (8x8)", bench_message(p, args.repeat), bench_message(c, args.repeat)),
        ("collective FB (T=200, d=6)", bench_cfb("python", args.repeat), bench_cfb("cython", args.repeat)),
        ("sample 20000 paths (20x20 grid)", bench_sampling(p, args.repeat), bench_sampling(c, args.repeat)),
    ]
    print(f"{'workload':<34}{'python s':>12}{'cython s':>12}{'speedup':>10}  agree")
    for name, (tp, op), (tc, oc) in rows:
        agree = np.allclose(op, oc, rtol=0, atol=1e-12) if op.dtype.kind == "f" else np.array_equal(op, oc)
        print(f"{name:<34}{tp:>12.4f}{tc:>12.4f}{tp / tc:>10.1f}  {agree}")


if __name__ == "__main__":
    main()
