"""Time the compiled routing kernels against their numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

Shapes mirror a realistic simulator call: half a million tokens routed
over 64 experts on 32 devices. Each kernel pair is timed with timeit
after a warmup call (the warmup also absorbs JIT compilation), and the
two paths are checked for bitwise agreement on the benchmark inputs
before any timing is trusted.
"""

from __future__ import annotations

import timeit

import numpy as np

from moelab import kernels

N_TOKENS = 524288
E = 64
EP = 32
TOP_K = 8
REPEAT = 5
NUMBER = 3


def bench(label: str, fast, slow, args: tuple) -> None:
    got_fast, got_slow = fast(*args), slow(*args)
    assert np.array_equal(got_fast, got_slow), f"{label}: paths disagree"
    t_fast = min(timeit.repeat(lambda: fast(*args), number=NUMBER,
                               repeat=REPEAT)) / NUMBER
    t_slow = min(timeit.repeat(lambda: slow(*args), number=NUMBER,
                               repeat=REPEAT)) / NUMBER
    speedup = t_slow / t_fast if t_fast > 0 else float("inf")
    print(f"{label:<22} numba {t_fast * 1e3:9.2f} ms   "
          f"numpy {t_slow * 1e3:9.2f} ms   speedup {speedup:5.1f}x")


def main() -> None:
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba unavailable (or disabled via "
                         "MOELAB_NO_NUMBA); nothing to compare")
    rng = np.random.default_rng(0)

    scores = rng.random((N_TOKENS, E))
    kernels.topk_desc_nb(scores[:64], TOP_K)  # compile before timing
    bench("topk_desc", kernels.topk_desc_nb, kernels.topk_desc_np,
          (scores, TOP_K))

    flat = rng.integers(0, E, N_TOKENS * TOP_K)
    capacity = int(1.2 * N_TOKENS * TOP_K / E)
    kernels.capacity_drop_mask_nb(flat[:64], E, capacity)
    bench("capacity_drop_mask", kernels.capacity_drop_mask_nb,
          kernels.capacity_drop_mask_np, (flat, E, capacity))

    src = rng.integers(0, EP, N_TOKENS * TOP_K)
    dst = rng.integers(0, EP, N_TOKENS * TOP_K)
    keep = rng.random(N_TOKENS * TOP_K) < 0.9
    kernels.pair_counts_nb(src[:64], dst[:64], keep[:64], EP)
    bench("pair_counts", kernels.pair_counts_nb, kernels.pair_counts_np,
          (src, dst, keep, EP))


if __name__ == "__main__":
    main()
