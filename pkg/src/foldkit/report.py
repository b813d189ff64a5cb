"""Render sweep results into a markdown report with accompanying figures."""

from __future__ import annotations

import os
from collections import defaultdict

import numpy as np

from .errors import ValidationError
from .harness.sweep import parse_rows


def _aggregate(rows):
    """(method, sparsity) -> dict of mean/std over seeds."""
    grouped = defaultdict(list)
    for r in rows:
        grouped[(r["method"], r["sparsity"])].append(r)
    out = {}
    for key, rs in sorted(grouped.items()):
        accs = np.array([r["accuracy"] for r in rs])
        out[key] = {
            "seeds": len(rs),
            "accuracy_mean": float(accs.mean()),
            "accuracy_std": float(accs.std()),
            "var_ratio_last": float(np.mean([r["var_ratio_last"] for r in rs])),
            "var_ratio_mean_abs_dev": float(
                np.mean([r["var_ratio_mean_abs_dev"] for r in rs])),
            "total_J": float(np.mean([r["total_J"] for r in rs])),
        }
    return out


def _table(agg, methods, sparsities, field, fmt):
    head = "| sparsity | " + " | ".join(methods) + " |"
    rule = "|---" * (len(methods) + 1) + "|"
    lines = [head, rule]
    for s in sparsities:
        cells = []
        for m in methods:
            entry = agg.get((m, s))
            cells.append(fmt(entry) if entry else "-")
        lines.append(f"| {s:g} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_report(rows, out_path, figures=True):
    """Write a markdown summary of sweep rows; with `figures`, also render
    accuracy and variance-ratio curves as PNGs next to the report."""
    if not rows:
        raise ValidationError("no sweep rows to report")
    methods = sorted({r["method"] for r in rows})
    sparsities = sorted({r["sparsity"] for r in rows})
    agg = _aggregate(rows)
    parts = ["# Compression sweep", ""]
    parts.append(f"Methods: {', '.join(methods)}. Sparsities: "
                 f"{', '.join(f'{s:g}' for s in sparsities)}. "
                 f"Seeds per cell: {max(v['seeds'] for v in agg.values())}.")
    parts += ["", "## Top-1 accuracy (mean +/- std over seeds)", "",
              _table(agg, methods, sparsities, "accuracy_mean",
                     lambda e: f"{e['accuracy_mean']:.4f} +/- {e['accuracy_std']:.4f}"),
              "", "## Variance ratio at the deepest probe (1.0 = preserved)", "",
              _table(agg, methods, sparsities, "var_ratio_last",
                     lambda e: f"{e['var_ratio_last']:.4f}"),
              "", "## Mean clustering cost", "",
              _table(agg, methods, sparsities, "total_J",
                     lambda e: f"{e['total_J']:.4g}")]
    made = []
    if figures:
        made = _render_figures(agg, methods, sparsities, out_path)
        if made:
            parts += ["", "## Figures", ""]
            parts += [f"![{os.path.basename(p)}]({os.path.basename(p)})"
                      for p in made]
    parts.append("")
    text = "\n".join(parts)
    tmp = out_path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, out_path)
    return [out_path] + made


def _render_figures(agg, methods, sparsities, out_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stem = os.path.splitext(out_path)[0]
    made = []
    specs = [("accuracy_mean", "top-1 accuracy", "_accuracy.png"),
             ("var_ratio_last", "variance ratio (deepest probe)", "_variance.png")]
    for fieldname, label, suffix in specs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for m in methods:
            xs = [s for s in sparsities if (m, s) in agg]
            ys = [agg[(m, s)][fieldname] for s in xs]
            ax.plot(xs, ys, marker="o", label=m)
        ax.set_xlabel("sparsity")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = stem + suffix
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)
    return made


def report_from_csv(csv_path, out_path, figures=True):
    with open(csv_path) as fh:
        rows = parse_rows(fh.read())
    return render_report(rows, out_path, figures=figures)
