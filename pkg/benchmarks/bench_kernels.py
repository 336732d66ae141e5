"""Time the compiled and pure-numpy kernel backends on representative sizes.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``; prints one JSON
record per (kernel, size, backend) and a speedup column when both exist.
"""
import argparse
import json
import timeit

import numpy as np

from csrae import _kernels as K


def cases(rng):
    for n, m, d in [(100, 1, 2), (100, 100, 10), (500, 10, 50)]:
        args = (rng.normal(size=(n, d)), rng.uniform(0.1, 2, (n, d)), rng.normal(size=(m, d)), rng.uniform(0.1, 2, (m, d)))
        yield f"overlap {n}x{m}x{d}", (lambda b, a=args: K.pairwise_log_overlap(*a, backend=b))
        g = rng.normal(size=(n, m))
        yield f"overlap_grad {n}x{m}x{d}", (lambda b, a=args, g=g: K.pairwise_log_overlap_grad(*a, g, backend=b))
    for n_train, n_query in [(1000, 200), (5000, 500)]:
        train, query = rng.normal(size=(n_train, 2)), rng.normal(size=(n_query, 2))
        labels = rng.integers(0, 5, n_train)
        yield f"knn k=5 {n_train}/{n_query}", (lambda b, t=train, l=labels, q=query: K.knn_predict(t, l, q, 5, backend=b))
    for n in (10, 40):
        a = rng.normal(size=(n, n))
        a = a @ a.T
        yield f"jacobi_eigh {n}", (lambda b, a=a: K.jacobi_eigh(a, backend=b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": K.python_backend}
    if K.compiled_backend is not None:
        backends["cython"] = K.compiled_backend
    for name, fn in cases(np.random.default_rng(0)):
        times = {}
        for label, backend in backends.items():
            timer = timeit.Timer(lambda: fn(backend))
            number, _ = timer.autorange()
            times[label] = min(timer.repeat(args.repeat, number)) / number
        rec = {"kernel": name, **{f"{k}_ms": round(v * 1e3, 4) for k, v in times.items()}}
        if len(times) == 2:
            rec["speedup"] = round(times["python"] / times["cython"], 2)
        print(json.dumps(rec))


if __name__ == "__main__":
    main()
