"""Report tables and figures.

CSV writers keep full float precision (repr round-trips), readers invert
them exactly. Figures render through the Agg backend so report runs are
headless and byte-reproducible.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_DPI = 100


def write_accuracy_csv(path, rows, comment=None):
    """Rows of (model, metric, cutoff, value)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("model,metric,cutoff,value\n")
        for model, metric, cutoff, value in rows:
            fh.write(f"{model},{metric},{cutoff},{float(value)!r}\n")


def read_accuracy_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("model,"):
                continue
            model, metric, cutoff, value = line.rstrip("\n").split(",")
            rows.append((model, metric, int(cutoff), float(value)))
    return rows


def write_stability_summary_csv(path, rows):
    """Rows of (model, kind, cutoff, overall, empty_pairs)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("model,kind,cutoff,overall,empty_pairs\n")
        for model, kind, cutoff, overall, empty_pairs in rows:
            fh.write(f"{model},{kind},{cutoff},{float(overall)!r},"
                     f"{int(empty_pairs)}\n")


def read_stability_summary_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            model, kind, cutoff, overall, empty = line.rstrip("\n").split(",")
            rows.append((model, kind, int(cutoff), float(overall),
                         int(empty)))
    return rows


def write_stability_bins_csv(path, rows):
    """Rows of (model, cutoff, bin, mean_jaccard) for item representations."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("model,cutoff,bin,mean_jaccard\n")
        for model, cutoff, b, mean in rows:
            fh.write(f"{model},{cutoff},{b},{float(mean)!r}\n")


def read_stability_bins_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            model, cutoff, b, mean = line.rstrip("\n").split(",")
            rows.append((model, int(cutoff), int(b), float(mean)))
    return rows


def render_convergence(histories, path):
    """Loss curves and validation metric curves, one line per model.

    histories is a list of (label, records) where records are EpochRecord
    rows (epoch, loss, val_metric-or-None).
    """
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(11, 4))
    for label, records in histories:
        epochs = [r.epoch for r in records]
        losses = [r.loss for r in records]
        ax_loss.plot(epochs, losses, label=label)
        val_pts = [(r.epoch, r.val_metric) for r in records
                   if r.val_metric is not None]
        if val_pts:
            ax_val.plot([p[0] for p in val_pts], [p[1] for p in val_pts],
                        marker="o", markersize=3, label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.legend(fontsize=7)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation metric")
    if ax_val.lines:
        ax_val.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def render_accuracy(rows, path):
    """Grouped bars: one group per model, one bar per (metric, cutoff)."""
    models = sorted({r[0] for r in rows})
    combos = sorted({(r[1], r[2]) for r in rows})
    table = {(m, metric, k): v for m, metric, k, v in rows}
    width = 0.8 / max(len(combos), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(models)), 4))
    xs = np.arange(len(models))
    for pos, (metric, k) in enumerate(combos):
        heights = [table.get((m, metric, k), 0.0) for m in models]
        ax.bar(xs + pos * width, heights, width, label=f"{metric}@{k}")
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(models, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("value")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def render_stability_overall(rows, path):
    """Grouped bars of overall stability per model and report kind."""
    models = sorted({r[0] for r in rows})
    combos = sorted({(r[1], r[2]) for r in rows})
    table = {(m, kind, k): v for m, kind, k, v, _ in rows}
    width = 0.8 / max(len(combos), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(models)), 4))
    xs = np.arange(len(models))
    for pos, (kind, k) in enumerate(combos):
        heights = [table.get((m, kind, k), 0.0) for m in models]
        ax.bar(xs + pos * width, heights, width, label=f"{kind}@{k}")
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(models, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("mean Jaccard")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def render_stability_bins(rows, path):
    """Per-popularity-bin item representation stability, one line per
    (model, cutoff)."""
    series = sorted({(r[0], r[1]) for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for model, cutoff in series:
        pts = sorted((b, mean) for m, k, b, mean in rows
                     if m == model and k == cutoff)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                markersize=3, label=f"{model}@{cutoff}")
    ax.set_xlabel("popularity bin (1 = most popular)")
    ax.set_ylabel("mean Jaccard")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
