#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Times each hot kernel on shapes the captioner actually uses, then a full
training step in both backends. Run from the repository root:

    python benchmarks/bench_backends.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from semcap import _kernels as K


def timeit(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def kernel_cases(dtype):
    rng = np.random.default_rng(0)

    def arr(*shape):
        return np.ascontiguousarray(rng.standard_normal(shape), dtype=dtype)

    x_rows = arr(21, 64)      # caption-length rows at model width
    gy_rows = arr(21, 64)
    gain = arr(64)
    bias = arr(64)
    flat = arr(21 * 64)
    gflat = arr(21 * 64)
    p = arr(4096)
    g = arr(4096)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    a = arr(21, 64)
    b = arr(64, 64)

    def lnorm(impl):
        return impl.layer_norm_fwd(x_rows, gain, bias, 1e-5)

    return {
        "softmax_fwd (21x64)": lambda impl: impl.softmax_fwd(x_rows),
        "softmax_bwd (21x64)": lambda impl: impl.softmax_bwd(x_rows, gy_rows),
        "log_softmax_fwd (21x64)":
            lambda impl: impl.log_softmax_fwd(x_rows),
        "layer_norm_fwd (21x64)": lnorm,
        "gelu_fwd (1344)": lambda impl: impl.gelu_fwd(flat),
        "gelu_bwd (1344)": lambda impl: impl.gelu_bwd(flat, gflat),
        "sigmoid_fwd (1344)": lambda impl: impl.sigmoid_fwd(flat),
        "adam_step (4096)":
            lambda impl: impl.adam_step(p, g, m, v, 1e-3, 0.9, 0.98, 1e-9,
                                        0.1, 0.02),
        "matmul_exact (21x64x64)": lambda impl: impl.matmul_exact(a, b),
    }


def bench_kernels(repeats):
    backends = K.available_backends()
    print(f"backends available: {backends}")
    for dtype in (np.float32, np.float64):
        print(f"\nkernel timings, {np.dtype(dtype).name} "
              f"(microseconds per call, best of 5 x {repeats})")
        cases = kernel_cases(dtype)
        header = f"{'kernel':<28}" + "".join(f"{b:>12}" for b in backends)
        if len(backends) == 2:
            header += f"{'speedup':>10}"
        print(header)
        for name, fn in cases.items():
            times = {}
            for backend in backends:
                impl = K._BACKENDS[backend]
                times[backend] = timeit(lambda: fn(impl), repeats) * 1e6
            row = f"{name:<28}" + "".join(f"{times[b]:>12.2f}"
                                          for b in backends)
            if len(backends) == 2:
                row += f"{times['pure'] / times['fast']:>9.2f}x"
            print(row)


def bench_train_step(repeats):
    from semcap.config import RunConfig
    from semcap.corpus import CorpusRecord, build_word_vocab
    from semcap.model import Captioner, TrainSample
    from semcap.optim import WarmupAdam
    from semcap.retrieval import SemanticCueSet, SemanticVocabulary

    cfg = RunConfig(d_model=64, n_heads=4, n_vis_blocks=2, n_sem_blocks=1,
                    n_dec_blocks=2, n_slots=8, max_cues=8, grid_cells=16,
                    feature_dim=64, max_caption_len=10, seed=3).validate()
    rng = np.random.default_rng(1)
    caption = ["a", "red", "cat", "chases", "a", "blue", "dog"]
    records = [CorpusRecord(
        f"b{i}", rng.standard_normal((16, 64)).astype(np.float32),
        rng.standard_normal(64).astype(np.float32), [caption],
        {"cat", "dog"}) for i in range(8)]
    vocab = build_word_vocab(records)
    sem = SemanticVocabulary(["blue", "cat", "chases", "dog", "red"])
    samples = [TrainSample(r, vocab.encode(caption),
                           SemanticCueSet(["cat", "dog"], [0, 0]),
                           {"red", "cat", "blue", "dog"}) for r in records]

    print(f"\nfull training step, batch 8 (milliseconds, best of 5 x "
          f"{max(repeats // 20, 3)})")
    for backend in K.available_backends():
        K.use(backend)
        model = Captioner(cfg, vocab, sem)
        opt = WarmupAdam(model.named_parameters(), cfg.d_model)
        t = timeit(lambda: model.train_step(opt, samples),
                   max(repeats // 20, 3))
        print(f"{backend:>8}: {t * 1e3:.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()
    bench_kernels(args.repeats)
    bench_train_step(args.repeats)


if __name__ == "__main__":
    main()
