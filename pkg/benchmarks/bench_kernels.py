#!/usr/bin/env python3
"""Time each hot kernel's pure-numpy twin against its numba build.

Every kernel in ``flowcast.kernels.IMPLEMENTATIONS`` is checked for
agreement on the benchmark inputs, then timed (best of ``--repeats``
batches).  Run with ``--help`` for options.  The numba twins are

warmed up once before timing so JIT compilation is not counted.
"""

import argparse
import time

import numpy as np

from flowcast.kernels import IMPLEMENTATIONS


def _inputs(name: str, size: str, rng: np.random.Generator):
    scale = {"small": 1, "medium": 8, "large": 64}[size]
    if name == "systematic_resample_indices":
        n = 500 * scale
        w = rng.dirichlet(np.ones(n))
        return (np.cumsum(w), 0.371), f"n={n}"
    if name == "forward_fill_array":
        t, n = 400 * scale, 16
        values = rng.standard_normal((t, n))
        missing = rng.uniform(size=(t, n)) < 0.1
        missing[0] = False
        return (values, missing), f"t={t}, n={n}"
    if name == "crps_batch":
        m, n = 60 * scale, 100
        return (rng.standard_normal((m, n)), rng.standard_normal(m)), f"rows={m}, samples={n}"
    if name == "diag_gauss_loglik":
        m, n = 250 * scale, 20
        means = rng.standard_normal((m, n))
        stds = np.exp(0.2 * rng.standard_normal((m, n)))
        return (means, stds, rng.standard_normal(n)), f"particles={m}, dims={n}"
    if name == "flow_apply":
        m, d = 250 * scale, 24
        particles = rng.standard_normal((m, d))
        a = rng.standard_normal((d, d)) / d
        return (particles, a, rng.standard_normal(d), 0.05), f"particles={m}, d={d}"
    raise ValueError(f"no benchmark inputs for kernel '{name}'")


def _best_time(fn, args, repeats: int, inner: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="small,medium,large", help="comma-separated size labels")
    parser.add_argument("--repeats", type=int, default=5, help="timing batches per cell (best is kept)")
    parser.add_argument("--inner", type=int, default=20, help="calls per timing batch")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    sizes = [s.strip() for s in args.sizes.split(",") if s.strip()]
    rng = np.random.default_rng(args.seed)

    have_numba = all(nb is not None for _, nb in IMPLEMENTATIONS.values())
    if not have_numba:
        print("numba is not importable: only the numpy twins exist, nothing to compare")
        return 0

    header = f"{'kernel':<28} {'size':<26} {'numpy':>10} {'numba':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, (np_fn, nb_fn) in IMPLEMENTATIONS.items():
        for size in sizes:
            call_args, label = _inputs(name, size, rng)
            want = np_fn(*call_args)
            got = nb_fn(*call_args)  # first call also compiles
            if not np.allclose(got, want, rtol=1e-10, atol=1e-10):
                raise SystemExit(f"twins disagree for {name} ({label})")
            t_np = _best_time(np_fn, call_args, args.repeats, args.inner)
            t_nb = _best_time(nb_fn, call_args, args.repeats, args.inner)
            print(f"{name:<28} {label:<26} {t_np * 1e3:>8.3f}ms {t_nb * 1e3:>8.3f}ms {t_np / t_nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
