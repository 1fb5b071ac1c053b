"""Run (or resume) the synthetic leave-one-out benchmark and print a summary.

    python scripts/run_benchmark.py --cache results/benchmark.json
"""
import argparse
import logging

import numpy as np

from mtmdseg.benchmark import BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default="results/benchmark.json")
    ap.add_argument("--schemes", nargs="+", default=list(BenchmarkConfig.schemes))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(BenchmarkConfig.seeds))
    ap.add_argument("--epochs", type=int, default=BenchmarkConfig.epochs)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = BenchmarkConfig(schemes=tuple(args.schemes), seeds=tuple(args.seeds), epochs=args.epochs)
    res = run_benchmark(cfg, args.cache)
    print(f"total training time {res.total_seconds / 60:.1f} min")
    for seed in cfg.seeds:
        for domain in ("ankle", "shoulder"):
            row = "  ".join(f"{s}={res.dice(s, seed, domain):.4f}" for s in cfg.schemes)
            print(f"seed {seed} {domain:9s} {row}")
        for s in cfg.schemes:
            if "embedding" in res.runs[f"{s}/{seed}"]:
                e = res.embedding(s, seed)
                print(f"seed {seed} {s:16s} gap={e['gap']:.4f} silhouette={e['silhouette']:.4f}")
    for domain in ("ankle", "shoulder"):
        for s in cfg.schemes:
            vals = [res.dice(s, seed, domain) for seed in cfg.seeds]
            print(f"{domain:9s} {s:16s} {np.mean(vals):.4f} +- {np.std(vals):.4f}")


if __name__ == "__main__":
    main()
