"""Train unimodal, trimodal and same-modality models on a synthetic cohort.

    python scripts/run_synthetic_benchmark.py --config configs/benchmark.json --out runs/bench
"""
import argparse
import json
import logging
from pathlib import Path

from pathfuse.benchmark import BenchmarkConfig, run_benchmark


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON with spec/folds/seed/models/run fields")
    parser.add_argument("--out", default="runs/benchmark")
    parser.add_argument("--folds", type=int)
    parser.add_argument("--seed", type=int)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.folds is not None:
        data["folds"] = args.folds
    if args.seed is not None:
        data["seed"] = args.seed
    summary = run_benchmark(BenchmarkConfig.from_dict(data), args.out)

    bayes = summary["bayes_c_index"]["mean"]
    print(f"{'model':<14}{'c-index':>9}{'sd':>8}{'to Bayes':>10}{'seconds':>9}")
    for name, row in summary["models"].items():
        print(f"{name:<14}{row['mean']:>9.4f}{row['sd']:>8.4f}{bayes - row['mean']:>10.4f}"
              f"{row['seconds']:>9.0f}")
    print(f"{'Bayes':<14}{bayes:>9.4f}")
    print(f"total {summary['seconds'] / 60:.1f} min; summary in {Path(args.out) / 'summary.json'}")


if __name__ == "__main__":
    main()
