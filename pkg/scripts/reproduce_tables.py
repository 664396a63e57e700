"""Run the benchmark grid and print bias, MSE, coverage and mean tau2 tables.

Usage: python scripts/reproduce_tables.py [--config FILE] [--out DIR] [--workers W]

CSV tables are written to ``--out`` exactly as ``metapool bench`` writes them;
markdown versions go to stdout.
"""
import argparse
import logging
import os
from pathlib import Path

from metapool.cli import bench_tables, parse_bench_config, resolve_seed
from metapool.harness import run_benchmark

HERE = Path(__file__).resolve().parent
LABELS = {"bias": "Bias", "mse": "MSE", "coverage": "Coverage", "tau2": "Mean tau2"}


def markdown(config, cells, attr):
    cols = [(m, meth) for m in config.m_values for meth in config.methods]
    head = "| setting | " + " | ".join(f"{meth.value} m={m}" for m, meth in cols) + " |"
    lines = [head, "|" + "---|" * (len(cols) + 1)]
    by_key = {(c.setting, c.m): c for c in cells}
    for s in config.settings:
        vals = []
        for m, meth in cols:
            summ = by_key[(s, m)].methods.get(meth)
            vals.append("NA" if summ is None else f"{getattr(summ, attr):.3f}")
        lines.append(f"| {s} | " + " | ".join(vals) + " |")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE / "benchmark.conf")
    ap.add_argument("--out", type=Path, default=Path("bench_out"))
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = parse_bench_config(args.config.read_text(), resolve_seed(None, None))
    cells = run_benchmark(config, args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, content in bench_tables(config, cells).items():
        (args.out / name).write_text(content)
    for attr, label in (("bias", "bias"), ("mse", "mse"), ("coverage", "coverage"), ("mean_tau2", "tau2")):
        print(f"\n## {LABELS[label]}\n")
        print(markdown(config, cells, attr))


if __name__ == "__main__":
    main()
