"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py            # kernel table + one training iteration
    python3 benchmarks/bench_kernels.py --quick    # smaller shapes, fewer repeats

Shapes mimic one user batch of an ML-1M-sized run: 100 users, 3706 items,
about 165 ratings per user.
"""

import argparse
import time
import timeit

import numpy as np

from crossvae import _kernels as kernels
from crossvae import data
from crossvae._kernels import _pykernels
from crossvae.model import Hyperparams
from crossvae.train import init_state, run_outer_iteration


def ragged(rng, n_rows, n_counter, mean_len):
    counts = np.clip(rng.poisson(mean_len, size=n_rows), 1, n_counter)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.concatenate([np.sort(rng.choice(n_counter, size=c, replace=False)) for c in counts])
    return indptr, indices.astype(np.int64)


def kernel_cases(n_rows, n_counter, mean_len, k, width, seed=0):
    rng = np.random.default_rng(seed)
    indptr, indices = ragged(rng, n_rows, n_counter, mean_len)
    emb = rng.normal(size=(n_counter, k))
    phi0 = rng.normal(size=(n_counter * k, width))
    g_out = rng.normal(size=(n_rows, width))
    query = rng.normal(size=(n_rows, k))
    g_ctx = rng.normal(size=(n_rows, k))

    def cases(mod):
        fwd = mod.attention_forward(query, emb, indptr, indices, 1e-8, True)
        return {
            "latent_gather_forward": lambda: mod.latent_gather_forward(indptr, indices, emb, phi0),
            "latent_gather_backward": lambda: mod.latent_gather_backward(indptr, indices, emb, g_out),
            "attention_forward": lambda: mod.attention_forward(query, emb, indptr, indices, 1e-8, True),
            "attention_backward": lambda: mod.attention_backward(g_ctx, emb, indptr, indices, *fwd[1:], True),
        }

    return cases


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def time_iteration(split, hp, module):
    saved = {name: getattr(kernels, name) for name in
             ("latent_gather_forward", "latent_gather_backward", "attention_forward", "attention_backward")}
    try:
        for name in saved:
            setattr(kernels, name, getattr(module, name))
        state = init_state(split.train, hp)
        run_outer_iteration(state, split)  # warm-up
        start = time.perf_counter()
        run_outer_iteration(state, split)
        return time.perf_counter() - start
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="small shapes and few repeats")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    compiled = kernels.compiled()
    if compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    if args.quick:
        shape = dict(n_rows=50, n_counter=500, mean_len=40, k=5, width=50)
        repeat, number = 3, 5
    else:
        shape = dict(n_rows=100, n_counter=3706, mean_len=165, k=5, width=50)
        repeat, number = args.repeat, 10
    cases = kernel_cases(**shape)
    py_cases, c_cases = cases(_pykernels), cases(compiled)

    print(f"kernel shapes: {shape}")
    print(f"{'kernel':<24} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name in py_cases:
        t_py = best_of(py_cases[name], repeat, number)
        t_c = best_of(c_cases[name], repeat, number)
        print(f"{name:<24} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:7.1f}x")

    n_users, n_items = (100, 150) if args.quick else (200, 300)
    split = data.split(data.synthetic_low_rank(n_users, n_items, seed=0), 0)
    hp = Hyperparams()
    t_py = time_iteration(split, hp, _pykernels)
    t_c = time_iteration(split, hp, compiled)
    print(f"\none outer iteration on a {n_users}x{n_items} synthetic fixture:")
    print(f"{'numpy':<8} {t_py:8.3f} s\n{'cython':<8} {t_c:8.3f} s\n{'speedup':<8} {t_py / t_c:7.2f}x")


if __name__ == "__main__":
    main()
