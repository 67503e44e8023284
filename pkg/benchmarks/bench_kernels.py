"""Time each hot kernel on the jit backend and the pure-numpy fallback.

The dispatchers in margin_forge._kernels pick a backend per call from the
module flag, so one process can time both -- provided the jit twins were
actually compiled at import. When numba is absent or disabled via
MARGIN_FORGE_NO_NUMBA / NUMBA_DISABLE_JIT, only the numpy path is honest to
measure, and the script says so.

Usage: python3 benchmarks/bench_kernels.py [--batch N] [--repeat R]
"""

import argparse
import time

import numpy as np

from margin_forge import _kernels
from margin_forge.model import ArchSpec, flatten_params, init_params, layer_tables


def build_workload(batch, input_dim, hidden, feature_dim, class_count, seed=0):
    arch = ArchSpec(input_dim=input_dim, class_count=class_count,
                    hidden=hidden, feature_dim=feature_dim)
    params = init_params(arch, seed)
    flat = flatten_params(params)
    feat_tab, full_tab = layer_tables(params)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, input_dim))
    y = rng.integers(0, class_count, size=batch)
    z = rng.standard_normal((batch, feature_dim))
    dz = rng.standard_normal((batch, feature_dim))
    logits = rng.standard_normal((batch, class_count))
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return {
        "forward_batch": lambda: _kernels.forward_batch(flat, full_tab, x),
        "xent_loss_grad": lambda: _kernels.xent_loss_grad(flat, full_tab, x, y),
        "features_vjp": lambda: _kernels.features_vjp(flat, feat_tab, x, dz),
        "pairwise_loss_grad(squared)":
            lambda: _kernels.pairwise_loss_grad(z, True),
        "pairwise_loss_grad(plain)":
            lambda: _kernels.pairwise_loss_grad(z, False),
        "head_hessian": lambda: _kernels.head_hessian(z, probs),
    }


def best_of(fn, repeat):
    fn()  # warm caches (and jit, on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--input-dim", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--feature-dim", type=int, default=32)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    work = build_workload(args.batch, args.input_dim, (args.hidden,),
                          args.feature_dim, args.classes)
    jit_available = _kernels.USE_NUMBA
    print(f"workload: batch={args.batch} net={args.input_dim}->"
          f"{args.hidden}->{args.feature_dim}->{args.classes} "
          f"(best of {args.repeat})")

    timings = {}
    saved = _kernels.USE_NUMBA
    try:
        _kernels.USE_NUMBA = False
        timings["numpy"] = {name: best_of(fn, args.repeat)
                            for name, fn in work.items()}
        if jit_available:
            _kernels.USE_NUMBA = True
            _kernels.warmup()
            timings["numba"] = {name: best_of(fn, args.repeat)
                                for name, fn in work.items()}
    finally:
        _kernels.USE_NUMBA = saved

    if not jit_available:
        print("numba backend unavailable (not installed or disabled by "
              "MARGIN_FORGE_NO_NUMBA / NUMBA_DISABLE_JIT); timing numpy only")
        for name, dt in timings["numpy"].items():
            print(f"  {name:<30} {dt * 1e3:9.3f} ms")
        return

    print(f"  {'kernel':<30} {'numba ms':>10} {'numpy ms':>10} {'speedup':>9}")
    for name in work:
        nb = timings["numba"][name] * 1e3
        nq = timings["numpy"][name] * 1e3
        print(f"  {name:<30} {nb:10.3f} {nq:10.3f} {nq / nb:8.2f}x")


if __name__ == "__main__":
    main()
