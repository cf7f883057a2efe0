"""Time the Gaussian backward-kernel apply: compiled extension vs numpy fallback.

    python benchmarks/bench_backward_kernel.py [--sizes 500,2000,5000] [--repeat 5]
"""

import argparse
import time

import numpy as np

from fwdsmooth import _backend


def bench(backend, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        _backend.gauss_backward_apply(*args, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="500,2000,5000")
    p.add_argument("--features", type=int, default=5, help="columns: 3 statistics + x + x^2")
    p.add_argument("--repeat", type=int, default=5)
    opts = p.parse_args()
    rng = np.random.default_rng(0)
    backends = ["python"] + (["compiled"] if _backend._compiled is not None else [])
    print(f"{'N':>6} {'backend':>9} {'ms':>9} {'ns/pair':>8} {'speedup':>8}")
    for n in (int(s) for s in opts.sizes.split(",")):
        args = (
            np.log(rng.dirichlet(np.ones(n))),
            0.8 * rng.normal(0, 0.2, n),
            rng.normal(0, 0.2, n),
            0.1,
            rng.normal(size=(opts.features, n)),
        )
        times = {b: bench(b, args, opts.repeat) for b in backends}
        for b, t in times.items():
            print(f"{n:>6} {b:>9} {t * 1e3:>9.2f} {t / n / n * 1e9:>8.2f} {times['python'] / t:>8.1f}")


if __name__ == "__main__":
    main()
