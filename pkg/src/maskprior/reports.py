"""Report writers: delimited outputs with rendered figures alongside.

Every experiment emits its numbers as CSV (and JSON where the structure is
nested); the same call renders a matplotlib figure next to the delimited
file so a report directory is self-contained.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .harness import BenchRow, CllCurve, GapReport  # noqa: E402


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def emit_cll_report(curve: CllCurve, prefix: str | Path) -> dict[str, Path]:
    """Write <prefix>.csv, <prefix>.json and <prefix>.png for a CLL curve."""
    prefix = Path(prefix)
    rows = curve.rows()
    csv_path = prefix.with_suffix(".csv")
    write_csv(
        csv_path,
        ["bin_lo", "bin_hi", "count", "baseline_cll", "coupled_cll"],
        [[r["bin_lo"], r["bin_hi"], r["count"],
          f"{r['baseline_cll']:.6f}", f"{r['coupled_cll']:.6f}"] for r in rows],
    )
    json_path = prefix.with_suffix(".json")
    write_json(json_path, {"bins": rows, "crossover_bin": curve.crossover_bin()})

    fig, ax = plt.subplots(figsize=(6, 4))
    mids = [(r["bin_lo"] + r["bin_hi"]) / 2 for r in rows]
    ax.plot(mids, [r["baseline_cll"] for r in rows], marker="o",
            label="factorized rows")
    ax.plot(mids, [r["coupled_cll"] for r in rows], marker="s",
            label="coupled with prior")
    ax.set_xlabel("mask ratio")
    ax.set_ylabel("mean conditional log-likelihood (nats)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    png_path = prefix.with_suffix(".png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "json": json_path, "png": png_path}


def emit_gap_report(report: GapReport, prefix: str | Path) -> dict[str, Path]:
    prefix = Path(prefix)
    csv_path = prefix.with_suffix(".csv")
    d = report.to_dict()
    write_csv(csv_path, list(d.keys()), [[d[k] for k in d]])
    json_path = prefix.with_suffix(".json")
    write_json(json_path, d)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.bar(["factorized", "coupled"],
            [report.kl_joint_vs_factorized, report.kl_joint_vs_coupled])
    ax1.set_ylabel("KL from data law (nats)")
    ax2.bar(["factorized", "coupled"],
            [report.incoherence_rate_factorized, report.incoherence_rate_coupled])
    ax2.set_ylabel("cross-mode sample rate")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    png_path = prefix.with_suffix(".png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "json": json_path, "png": png_path}


def emit_bench_report(rows: list[BenchRow], prefix: str | Path) -> dict[str, Path]:
    prefix = Path(prefix)
    csv_path = prefix.with_suffix(".csv")
    write_csv(
        csv_path,
        ["label", "baseline_mean_s", "baseline_std_s",
         "coupled_mean_s", "coupled_std_s", "overhead"],
        [[r.label, f"{r.baseline_mean_s:.6f}", f"{r.baseline_std_s:.6f}",
          f"{r.coupled_mean_s:.6f}", f"{r.coupled_std_s:.6f}",
          f"{r.overhead:.6f}"] for r in rows],
    )

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r.label for r in rows]
    x = range(len(rows))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [r.baseline_mean_s for r in rows],
           width, label="baseline")
    ax.bar([i + width / 2 for i in x], [r.coupled_mean_s for r in rows],
           width, label="coupled")
    ax.set_xticks(list(x), labels, rotation=20, ha="right")
    ax.set_ylabel("seconds / sample")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    png_path = prefix.with_suffix(".png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}
