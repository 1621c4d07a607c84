"""Time the compiled kernels against their pure-Python twins.

Both backends are fed identical inputs and uniforms, so the script also
reports the largest disagreement between their outputs.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mtdlnm import _pykernels

try:
    from mtdlnm import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _inputs(q: int, mc_size: int, seed: int = 0):
    g = np.random.default_rng(seed)
    A = g.standard_normal((q, q))
    cov = A @ A.T + q * np.eye(q)
    chol = np.linalg.cholesky(cov)
    prec = np.linalg.inv(cov)
    mean = g.standard_normal(q)
    unif = g.random((q, mc_size // 2))
    sweeps = g.random((10, q))
    return mean, chol, prec, unif, sweeps


def cases():
    for q in (2, 8, 24):
        mean, chol, prec, unif, sweeps = _inputs(q, 512)
        yield (f"GHK orthant q={q}, 512 paths",
               lambda k, m=mean, c=chol, u=unif: k.ghk_log_orthant(m, c, u))
        yield (f"TMVN Gibbs q={q}, 10 sweeps",
               lambda k, m=mean, p=prec, u=sweeps: k.tmvn_gibbs(m, p, np.maximum(m, 0.0), u))
    b = np.full(200, 3, dtype=np.int64)
    z = np.linspace(-2, 2, 200)
    yield ("exact PG(3, z), 200 draws",
           lambda k: k.pg_sum_draws(b, z, np.random.default_rng(1)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the Python backend is available")
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:34s} {t_py:10.3f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(np.asarray(fn(_pykernels)) - np.asarray(fn(_ckernels)))))
        print(f"{name:34s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x {diff:11.2e}")


if __name__ == "__main__":
    main()
