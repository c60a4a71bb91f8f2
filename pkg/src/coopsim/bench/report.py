"""Benchmark reports as aligned text, CSV, JSON and a bar-chart PNG."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .benchmark import BenchmarkReport  # noqa: E402

PNG_META = {"Software": None}


def _pm(v) -> str:
    return f"{v[0]:5.1f} +- {v[1]:4.1f}"


def format_report(rep: BenchmarkReport) -> str:
    lines = [f"scenario {rep.scenario}   configs {rep.n_configs} x {rep.n_repeats} repeats   "
             f"density {rep.density}   manifest {rep.manifest_hash}"]
    head = f"{'model':<16}{'SR %':>15}{'SCT %':>15}{'CR %':>15}{'timeout %':>15}{'Mbps':>10}"
    lines += [head, "-" * len(head)]
    for c in rep.cells:
        lines.append(f"{c.model:<16}{_pm(c.sr):>15}{_pm(c.sct):>15}{_pm(c.cr):>15}{_pm(c.timeout):>15}"
                     f"{c.bandwidth_mbps:>10.2f}")
    return "\n".join(lines) + "\n"


def report_json(rep: BenchmarkReport) -> str:
    return json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"


def plot_report(rep: BenchmarkReport, path) -> None:
    names = [c.model for c in rep.cells]
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(names), 3.2), dpi=100)
    width = 0.25
    for j, (label, attr, color) in enumerate((("SR", "sr", "#3a7d44"), ("SCT", "sct", "#7fb069"),
                                              ("CR", "cr", "#c0392b"))):
        vals = [getattr(c, attr) for c in rep.cells]
        xs = [i + (j - 1) * width for i in range(len(names))]
        ax.bar(xs, [v[0] for v in vals], width, yerr=[v[1] for v in vals], label=label, color=color, capsize=2)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.set_title(f"{rep.scenario}: {rep.n_configs} configs x {rep.n_repeats} repeats")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


CSV_FIELDS = ("scenario", "model", "bandwidth_mbps", "sr", "sr_std", "sct", "sct_std", "cr", "cr_std",
              "timeout", "timeout_std", "n_configs", "n_repeats")


def report_csv(rep: BenchmarkReport) -> str:
    """One row per model, mean and std in separate columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c in rep.cells:
        w.writerow([rep.scenario, c.model, f"{c.bandwidth_mbps:.4f}", *(f"{x:.4f}" for m in (c.sr, c.sct, c.cr, c.timeout)
                                                                       for x in m), rep.n_configs, rep.n_repeats])
    return buf.getvalue()


def write_report(rep: BenchmarkReport, out_dir, stem: str = "report") -> list[Path]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / f"{stem}.txt", d / f"{stem}.csv", d / f"{stem}.json", d / f"{stem}.png"]
    paths[0].write_text(format_report(rep))
    paths[1].write_text(report_csv(rep))
    paths[2].write_text(report_json(rep))
    plot_report(rep, paths[3])
    return paths


def plot_density(rows: list[tuple[int, BenchmarkReport]], path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    if rows:
        for c in rows[0][1].cells:
            sr = [rep.cell(c.model).sr for _, rep in rows]
            ax.errorbar([d for d, _ in rows], [v[0] for v in sr], yerr=[v[1] for v in sr], marker="o",
                        capsize=2, label=c.model)
        ax.legend(fontsize=8)
    ax.set_xlabel("background vehicles")
    ax.set_ylabel("SR %")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
