"""Time the numba kernels against the pure numpy fallback.

The backend is fixed at import time, so each backend runs in its own
interpreter with OCTUPLET_DISABLE_NUMBA set accordingly. Numba timings
exclude the first (compiling) call.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

CASES = [
    ("pairwise euclidean 64x64 d=128", "pairwise", 64, 64, 128, "euclidean"),
    ("pairwise cosine 64x64 d=128", "pairwise", 64, 64, 128, "cosine"),
    ("pairwise euclidean 512x512 d=128", "pairwise", 512, 512, 128, "euclidean"),
    ("pairwise euclidean 2000x2000 d=64", "pairwise", 2000, 2000, 64, "euclidean"),
    ("hardest negatives 64x64", "mining", 64, 64, 0, None),
    ("hardest negatives 2000x2000", "mining", 2000, 2000, 0, None),
    ("octuplet loss B=64 d=128", "octuplet", 64, 64, 128, "euclidean"),
]


def worker(repeat):
    import numpy as np

    from octuplet._accel import backend_name
    from octuplet.coremath import pairwise_distances
    from octuplet.mining import hardest_negatives_from_distances
    from octuplet.octuplet import PairedBatch, octuplet_loss

    rng = np.random.default_rng(0)
    results = {}
    for name, kind, n, m, d, metric in CASES:
        if kind == "pairwise":
            A, B = rng.normal(size=(n, d)), rng.normal(size=(m, d))
            fn = lambda: pairwise_distances(A, B, metric)  # noqa: E731
        elif kind == "mining":
            D = rng.random((n, m))
            la, lp = rng.integers(0, n // 2, n), rng.integers(0, n // 2, m)
            fn = lambda: hardest_negatives_from_distances(D, la, lp)  # noqa: E731
        else:
            labels = np.repeat(np.arange(n // 2), 2)
            batch = PairedBatch(rng.normal(size=(n, d)), rng.normal(size=(n, d)), labels)
            fn = lambda: octuplet_loss(batch, metric)  # noqa: E731
        fn()  # warm-up / compile
        timer = timeit.Timer(fn)
        number, _ = timer.autorange()
        best = min(timer.repeat(repeat=repeat, number=number)) / number
        results[name] = best
    return {"backend": backend_name(), "seconds": results}


def run_backend(disable, repeat):
    env = dict(os.environ)
    if disable:
        env["OCTUPLET_DISABLE_NUMBA"] = "1"
    else:
        env.pop("OCTUPLET_DISABLE_NUMBA", None)
    out = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="Also write the timings here.")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return

    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    width = max(len(c[0]) for c in CASES)
    print(f"{'case':<{width}}  {fast['backend']:>12}  {slow['backend']:>12}  speed-up")
    for name, *_ in CASES:
        a, b = fast["seconds"][name], slow["seconds"][name]
        print(f"{name:<{width}}  {a * 1e3:10.3f}ms  {b * 1e3:10.3f}ms  {b / a:7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"accelerated": fast, "fallback": slow}, fh, indent=2)


if __name__ == "__main__":
    main()
