"""Compare the compiled kernels against the pure-Python fallback.

Times the two hot kernels in isolation and a full decode under each
backend, then prints a speedup table:

    python3 benchmarks/bench_backends.py
"""

import time

import numpy as np

from specache import EngineConfig, run_speculative
from specache.backend import compiled_available, set_backend
from specache.lm import ModelSpec, Vocabulary, make_kgram_model


def bench(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(mod):
    def kgram():
        for i in range(2000):
            mod.kgram_dist(12345, 999, 0.1, (i % 7, i % 11), 64, 15.0, 1.0)

    rows = np.random.default_rng(0).random((64, 64))
    rows /= rows.sum(axis=1, keepdims=True)

    def topk():
        for _ in range(2000):
            mod.rows_topk(rows, 3)

    return {"kgram_dist x2000": kgram, "rows_topk x2000": topk}


def engine_case():
    vocab = Vocabulary(32)
    target = make_kgram_model(
        202, vocab, order=2, sharpness=20.0,
        spec=ModelSpec(params_billions=70.0, forward_latency=7.0),
    )
    draft = make_kgram_model(
        202, vocab, order=2, sharpness=20.0,
        spec=ModelSpec(params_billions=7.0, forward_latency=1.0),
        mix_seed=1202, mix_weight=0.08,
    )
    config = EngineConfig(K=50, k=3, ratio=7, max_new_tokens=256)

    def run():
        run_speculative(draft, target, [3, 17], config)

    return run


def main():
    if not compiled_available():
        print("compiled kernels are not built; nothing to compare")
        return 1
    from specache import _kernels, _kernels_py

    print(f"{'case':<24} {'pure':>10} {'compiled':>10} {'speedup':>8}")
    for name, make in (
        ("kgram_dist x2000", None),
        ("rows_topk x2000", None),
    ):
        pure_fn = kernel_cases(_kernels_py)[name]
        comp_fn = kernel_cases(_kernels)[name]
        tp = bench(pure_fn)
        tc = bench(comp_fn)
        print(f"{name:<24} {tp * 1e3:>8.1f}ms {tc * 1e3:>8.1f}ms {tp / tc:>7.1f}x")

    # full decode: models are rebuilt per backend so memoized
    # distributions cannot leak across the comparison
    times = {}
    for backend in ("pure", "compiled"):
        set_backend(backend)
        times[backend] = bench(engine_case(), repeats=3)
    set_backend("compiled")
    tp, tc = times["pure"], times["compiled"]
    print(f"{'decode 256 tokens':<24} {tp * 1e3:>8.1f}ms {tc * 1e3:>8.1f}ms {tp / tc:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
