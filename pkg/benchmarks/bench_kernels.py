"""Compare the numba kernels with the pure-numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each mode runs in its own
process with ``SSMFLOW_NUMBA`` set, so the fallback never touches compiled
code. Times are per filter call and per MH iteration.
"""
import argparse
import json
import os
import subprocess
import sys
import time


def best_of(func, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        func()
        times.append(time.perf_counter() - start)
    return min(times)


def measure(n_steps, mh_iters, repeats):
    from ssmflow import models, oracle
    from ssmflow._accel import NUMBA_ENABLED

    spec = models.builtin_ou(n_steps=n_steps)
    _, obs = models.simulate(spec, [0.2, 5.0, 1.0], "exact-ou", seed=0)
    init = spec.to_unconstrained([0.2, 5.0, 1.0])

    def filt():
        oracle.ff_marginal_loglik([0.2, 5.0, 1.0], obs, spec.dt, spec.obs_var, spec.x0)

    def chain():
        oracle.rwmh_posterior(obs, spec, iters=mh_iters, burn_in=mh_iters // 2, seed=0, init=init)

    filt()
    chain()  # compile outside the timed region
    return {
        "numba": NUMBA_ENABLED,
        "filter": best_of(filt, repeats),
        "rwmh": best_of(chain, repeats) / mh_iters,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-steps", type=int, default=200)
    parser.add_argument("--mh-iters", type=int, default=2000)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)
    if args.child:
        print(json.dumps(measure(args.n_steps, args.mh_iters, args.repeats)))
        return

    results = {}
    for flag in ("1", "0"):
        out = subprocess.run(
            [sys.executable, __file__, "--child", "--n-steps", str(args.n_steps),
             "--mh-iters", str(args.mh_iters), "--repeats", str(args.repeats)],
            env={**os.environ, "SSMFLOW_NUMBA": flag}, capture_output=True, text=True, check=True,
        )
        results[flag] = json.loads(out.stdout.strip().splitlines()[-1])
    fast, slow = results["1"], results["0"]
    print(f"numba available: {fast['numba']}")
    print(f"{'kernel':<40}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for key, label in (("filter", f"forward filter, N={args.n_steps}"), ("rwmh", "RWMH, per iteration")):
        print(f"{label:<40}{fast[key] * 1e6:>10.2f}us{slow[key] * 1e6:>10.2f}us"
              f"{slow[key] / fast[key]:>9.1f}x")


if __name__ == "__main__":
    main()
