"""Time the numba and numpy paths of every kernel on pipeline-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths are checked for agreement before timing. The numba column excludes
compilation (one warm-up call per kernel).
"""

import argparse
import timeit

import numpy as np

from ilrec import _kernels as K


def cases(rng):
    n_rows, t, n_cat, n_items, d = 256, 100, 10, 100, 8
    cats = rng.integers(0, n_cat, (n_rows, t))
    lengths = rng.integers(1, t + 1, n_rows)
    hist = rng.integers(0, n_items, (n_rows, 10))
    hist_len = rng.integers(0, 11, n_rows)
    emb = rng.normal(size=(n_items, d))
    return {
        "window_counts": ((cats, lengths, 15, n_cat), {}),
        "diversity_hits": ((cats, lengths, 15, 4), {}),
        "discounted_returns": ((rng.uniform(1, 5, 5000), 0.9), {}),
        "ewma_encode": ((hist, hist_len, emb, 0.9), {}),
        "cosine_argmax": ((rng.normal(size=(n_rows, d)), emb), {}),
        "hash_uniform": ((12345, rng.integers(0, 1 << 20, 5000), rng.integers(0, 100, 5000)), {}),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, (a, kw) in cases(rng).items():
        f_np = getattr(K, f"np_{name}")
        f_nb = getattr(K, f"nb_{name}")
        a = tuple(np.ascontiguousarray(x) if isinstance(x, np.ndarray) else x for x in a)
        out_np, out_nb = f_np(*a, **kw), f_nb(*a, **kw)
        if not np.allclose(out_np, out_nb, rtol=1e-12, atol=1e-12):
            raise SystemExit(f"{name}: numpy and numba paths disagree")
        t_np = min(timeit.repeat(lambda: f_np(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
