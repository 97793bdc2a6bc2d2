"""Recall tables, JSON-lines records and figures."""

from __future__ import annotations

import json
import os
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import RecallReport  # noqa: E402

DIRECTION_LABELS = {
    "localization": "phrase localization",
    "i2s": "image-to-sentence",
    "s2i": "sentence-to-image",
    "s2s": "sentence-to-sentence",
    "combined-i2s": "image-to-sentence (combined)",
    "combined-s2i": "sentence-to-image (combined)",
}


def recall_rows(task: str, results: Sequence[tuple[str, RecallReport]]) -> list[dict]:
    rows = []
    for direction, report in results:
        rows.extend(report.records(task, direction))
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """One row per (direction, K): ``task  direction  K  recall  queries  upper-bound``."""
    header = ("task", "direction", "K", "recall", "queries", "upper_bound")
    body = [(r["task"], r["direction"], str(r["k"]), f"{r['recall']:.4f}",
             str(r["query_count"]), f"{r['upper_bound']:.4f}") for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(line.rstrip() for line in lines)


def write_jsonl(path: str | os.PathLike, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(True, alpha=0.3, linewidth=0.6)


def plot_recall(results: Sequence[tuple[str, RecallReport]], path: str | os.PathLike,
                title: str | None = None) -> None:
    """Recall@K curves, one line per direction, with the upper bound dashed."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for direction, report in results:
        ks = sorted(report.recalls)
        line, = ax.plot(ks, [report.recalls[k] for k in ks], marker="o",
                        label=DIRECTION_LABELS.get(direction, direction))
        ax.axhline(report.upper_bound, color=line.get_color(), linestyle="--", linewidth=0.8)
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K")
    ax.set_ylim(0.0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_losses(records: Sequence[dict], path: str | os.PathLike, title: str | None = None) -> None:
    """Per-epoch total loss and its weighted terms (log scale)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    epochs = [r["epoch"] for r in records]
    ax.plot(epochs, [max(r["loss"], 1e-12) for r in records], marker="o", color="black", label="total")
    terms = sorted({t for r in records for t, v in r.get("terms", {}).items() if v > 0})
    for term in terms:
        ax.plot(epochs, [max(r["terms"].get(term, 0.0), 1e-12) for r in records],
                linewidth=1.0, label=term)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (sum over batch)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_comparison(values: dict[str, float], path: str | os.PathLike, ylabel: str,
                    title: str | None = None) -> None:
    """Bar chart of one metric across labelled runs."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    labels = list(values)
    ax.bar(range(len(labels)), [values[k] for k in labels], color="0.55", width=0.6)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0.0, 1.02)
    if title:
        ax.set_title(title)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(directory: str | os.PathLike, task: str, results: Sequence[tuple[str, RecallReport]],
                 train_records: Sequence[dict] | None = None) -> dict[str, str]:
    """Write ``recall.txt``, ``recall.jsonl`` and figures; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    rows = recall_rows(task, results)
    paths = {
        "table": os.path.join(directory, "recall.txt"),
        "records": os.path.join(directory, "recall.jsonl"),
        "recall_figure": os.path.join(directory, "recall.png"),
    }
    with open(paths["table"], "w") as fh:
        fh.write(format_table(rows) + "\n")
    write_jsonl(paths["records"], rows)
    plot_recall(results, paths["recall_figure"], title=task)
    if train_records:
        paths["loss_figure"] = os.path.join(directory, "loss.png")
        plot_losses(train_records, paths["loss_figure"], title=f"{task} training")
    return paths
