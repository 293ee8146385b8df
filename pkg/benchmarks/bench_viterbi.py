"""Time the compiled and NumPy Viterbi kernels on the same random instances.

    python3 benchmarks/bench_viterbi.py [--T 1000] [--M 8] [--classes 20] [--repeats 5]

Both kernels must return the same path and score; the script checks that
before reporting timings.
"""
import argparse
import time

import numpy as np

from hal import align


def instance(rng, T, M, U):
    logits = rng.normal(size=(T, U))
    post = np.exp(logits - logits.max(1, keepdims=True))
    post /= post.sum(1, keepdims=True)
    transcript = rng.choice(U, size=M, replace=True)
    for i in range(1, M):  # no adjacent repeats
        while transcript[i] == transcript[i - 1]:
            transcript[i] = rng.integers(U)
    return post, transcript


def best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=1000)
    ap.add_argument("--M", type=int, default=8)
    ap.add_argument("--classes", type=int, default=20)
    ap.add_argument("--min-len", type=int, default=2)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    post, transcript = instance(rng, args.T, args.M, args.classes)
    backends = ["python"] + (["cython"] if align.BACKEND == "cython" else [])
    results = {}
    for b in backends:
        results[b] = best_time(lambda: align.viterbi_align(post, transcript, args.min_len, backend=b),
                               args.repeats)
    if "cython" in results:
        a, c = results["python"][1], results["cython"][1]
        assert np.array_equal(a.labels, c.labels) and a.score == c.score, "backends disagree"
    else:
        print("compiled extension not built; timing the NumPy kernel only")
    print(f"T={args.T} M={args.M} classes={args.classes} min_len={args.min_len}")
    for b, (secs, _) in results.items():
        print(f"  {b:7s} {secs * 1e3:9.3f} ms")
    if "cython" in results:
        print(f"  speedup {results['python'][0] / results['cython'][0]:.1f}x")


if __name__ == "__main__":
    main()
