"""Multi-seed report rendering: text and JSON summaries, delimited metrics,
and training-curve figures written alongside them."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


class ReportError(ValueError):
    """Metrics cannot be aggregated (e.g., mismatched schema versions)."""


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    variance = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(variance)


def format_pct(mean: float, std: float) -> str:
    return f"{mean * 100:.2f} ± {std * 100:.2f}"


def aggregate_metrics(per_seed: list[dict]) -> dict:
    """Mean and spread over seeds; refuses mixed schema hashes."""
    if not per_seed:
        raise ReportError("no per-seed metrics to aggregate")
    hashes = {m["schema_hash"] for m in per_seed}
    if len(hashes) != 1:
        raise ReportError(f"refusing to aggregate metrics across schema hashes: {sorted(hashes)}")
    config_hashes = {m["config_hash"] for m in per_seed}
    if len(config_hashes) != 1:
        raise ReportError(
            f"refusing to aggregate metrics across config hashes: {sorted(config_hashes)}"
        )

    summary: dict = {
        "seeds": [m["seed"] for m in per_seed],
        "schema_hash": per_seed[0]["schema_hash"],
        "config_hash": per_seed[0]["config_hash"],
        "dataset_tag": per_seed[0].get("dataset_tag", ""),
    }
    for arm in ("raw", "filtered"):
        for field in ("f1", "precision", "recall"):
            values = [m[arm][field] for m in per_seed]
            mean, std = mean_std(values)
            summary[f"{arm}_{field}_mean"] = mean
            summary[f"{arm}_{field}_std"] = std
            summary[f"{arm}_{field}_pct"] = format_pct(mean, std)
    deltas = [m["precision_delta"] for m in per_seed]
    mean, std = mean_std(deltas)
    summary["precision_delta_mean"] = mean
    summary["precision_delta_std"] = std
    return summary


def render_text(summary: dict, per_seed: list[dict]) -> str:
    lines = [
        "Minority-class results over seeds "
        + ",".join(str(s) for s in summary["seeds"]),
        f"dataset: {summary['dataset_tag'] or 'workdir store'}   "
        f"config {summary['config_hash']}   schema {summary['schema_hash'][:12]}",
        "",
        f"{'arm':<18}{'F1 (%)':<18}{'precision (%)':<18}{'recall (%)':<18}",
    ]
    for arm, label in (("raw", "model only"), ("filtered", "with risk filter")):
        lines.append(
            f"{label:<18}"
            f"{summary[f'{arm}_f1_pct']:<18}"
            f"{summary[f'{arm}_precision_pct']:<18}"
            f"{summary[f'{arm}_recall_pct']:<18}"
        )
    lines += [
        "",
        "risk filter precision delta: "
        f"{summary['precision_delta_mean'] * 100:+.2f} ± {summary['precision_delta_std'] * 100:.2f} pp",
        "",
        f"{'seed':<8}{'tau':<14}{'F1 raw':<10}{'F1 filtered':<12}",
    ]
    for m in per_seed:
        tau = m["tau"]
        tau_text = f"{tau:.4f}" if tau is not None and math.isfinite(tau) else "-inf"
        lines.append(
            f"{m['seed']:<8}{tau_text:<14}{m['raw']['f1']:<10.4f}{m['filtered']['f1']:<12.4f}"
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(per_seed: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["seed", "arm", "f1", "precision", "recall", "tp", "fp", "tn", "fn", "tau"]
        )
        for m in per_seed:
            for arm in ("raw", "filtered"):
                block = m[arm]
                writer.writerow(
                    [
                        m["seed"],
                        arm,
                        f"{block['f1']:.6f}",
                        f"{block['precision']:.6f}",
                        f"{block['recall']:.6f}",
                        block["confusion"]["tp"],
                        block["confusion"]["fp"],
                        block["confusion"]["tn"],
                        block["confusion"]["fn"],
                        m["tau"] if m["tau"] is not None else "-inf",
                    ]
                )


def plot_training_curves(histories: dict[int, list[dict]], metric: str, path: Path) -> None:
    """One line per seed: validation score against training epoch."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for seed in sorted(histories):
        entries = histories[seed]
        ax.plot(
            [e["epoch"] for e in entries],
            [e[metric] for e in entries],
            label=f"seed {seed}",
            linewidth=1.4,
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric.replace("val_", "validation "))
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(
    per_seed: list[dict],
    histories: dict[int, list[dict]],
    out_dir: Path,
) -> dict:
    """Render report.json, report.txt, metrics.csv, and curve figures."""
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = aggregate_metrics(per_seed)
    (out_dir / "report.json").write_text(
        json.dumps({"summary": summary, "per_seed": per_seed}, indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "report.txt").write_text(render_text(summary, per_seed))
    write_metrics_csv(per_seed, out_dir / "metrics.csv")
    if histories:
        plot_training_curves(histories, "val_f1", out_dir / "f1_curves.png")
        plot_training_curves(histories, "val_recall", out_dir / "recall_curves.png")
    return summary
