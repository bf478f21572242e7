#!/usr/bin/env python3
"""Plot CSVs written by `gymfleet bench` and `gymfleet planner contention`.

Each input is recognised by its header, so files can be passed in any order:

    python3 scripts/plot_sweeps.py throughput.csv latency.csv recovery.csv \
        contention.csv --out plots/
"""

import argparse
import csv
import pathlib
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return rows[0].keys() if rows else [], rows


def col(rows, key, cast=float):
    return [cast(r[key]) for r in rows]


def plot_sweep(rows, name, out, fmt):
    n = col(rows, "n", int)
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.errorbar(n, col(rows, "steps_per_sec_mean"), yerr=col(rows, "steps_per_sec_std"), marker="o", capsize=3)
    left.set_xlabel("replicas")
    left.set_ylabel("steps / s")
    left.set_title("throughput")
    right.errorbar(n, col(rows, "round_trip_ms_mean"), yerr=col(rows, "round_trip_ms_std"), marker="o", capsize=3)
    right.plot(n, col(rows, "manager_latency_ms_mean"), marker="x", linestyle="--", label="manager step")
    right.set_xlabel("replicas")
    right.set_ylabel("ms")
    right.set_title("step latency")
    right.legend()
    for ax in (left, right):
        ax.set_xscale("log", base=2)
        ax.grid(alpha=0.3)
    save(fig, out, name, fmt)


def plot_recovery(rows, name, out, fmt):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step([t / 1000 for t in col(rows, "t_ms")], col(rows, "healthy", int), where="post")
    ax.set_xlabel("seconds since launch")
    ax.set_ylabel("healthy replicas")
    ax.grid(alpha=0.3)
    save(fig, out, name, fmt)


def plot_contention(rows, name, out, fmt):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(col(rows, "K", int), col(rows, "overload_fraction"), marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("replicas per machine (K)")
    ax.set_ylabel("overload fraction")
    ax.grid(alpha=0.3)
    save(fig, out, name, fmt)


def save(fig, out, name, fmt):
    fig.tight_layout()
    path = out / f"{name}.{fmt}"
    fig.savefig(path)
    plt.close(fig)
    print(path)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("csv", nargs="+", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("."))
    ap.add_argument("--format", choices=["png", "svg"], default="png")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for path in args.csv:
        header, rows = read(path)
        if not rows:
            print(f"{path}: empty, skipped", file=sys.stderr)
            continue
        if "steps_per_sec_mean" in header:
            plot_sweep(rows, path.stem, args.out, args.format)
        elif "healthy" in header:
            plot_recovery(rows, path.stem, args.out, args.format)
        elif "overload_fraction" in header:
            plot_contention(rows, path.stem, args.out, args.format)
        else:
            print(f"{path}: unrecognised columns {list(header)}, skipped", file=sys.stderr)


if __name__ == "__main__":
    main()
