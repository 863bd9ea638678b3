#!/usr/bin/env python3
"""Scaling benchmarks for the clustering sweep: linear vs brute-force paths."""

import argparse

from fhgs import bench


def run(args):
    sizes = tuple(int(s) for s in args.sizes.split(","))
    lin, brute, worst = bench.bench_lcf(sizes=sizes, reps=args.reps, d=args.feature_dim,
                                        seed=args.seed)
    back, fwd = bench.bench_backward(sizes=sizes, reps=args.reps, d=args.feature_dim,
                                     seed=args.seed)
    naive = bench.bench_backward_naive(sizes=sizes[:3], reps=max(2, args.reps // 2),
                                       d=args.feature_dim, seed=args.seed)
    for res in (lin, brute, fwd, back, naive):
        pairs = ", ".join(f"N={n}: {ns/1e6:.3f} ms" for n, ns in zip(res.sizes, res.median_ns))
        print(f"{res.name:<22} exponent {res.exponent:5.2f}   {pairs}")
    print(f"cross-path agreement: max rel diff {worst:.2e}")
    bench.write_csv([lin, brute, fwd, back, naive], args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="64,256,1024,4096")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--feature-dim", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="bench.csv")
    run(ap.parse_args())
