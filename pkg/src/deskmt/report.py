"""Summary tables, per-epoch curve files, and best-run selection.

Formatting mirrors the published style: losses to 4 decimals, perplexities
at or above 1000 in 2-significant-digit scientific notation, parameter
counts in millions to 2 decimals.
"""

from __future__ import annotations

import math
import os

from .errors import ConfigError, DataError
from .sweep import STATUS_COMPLETED, RunRecord, read_jsonl
from .training import EpochMetrics

TABLE_HEADER = ("model_size,num_heads,num_layers,dropout,time_min,"
                "train_loss,val_loss,val_perplexity,param_count_millions,status")

SCIENTIFIC_THRESHOLD = 1000.0


def format_perplexity(x: float) -> str:
    if x is None:
        return ""
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf"
    if x >= SCIENTIFIC_THRESHOLD:
        return f"{x:.1e}"
    return f"{x:.4f}"


def format_loss(x: float) -> str:
    if x is None:
        return ""
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf"
    return f"{x:.4f}"


def _row_cells(rec: RunRecord) -> list[str]:
    final = rec.final or {}
    return [
        str(rec.combo["d_model"]),
        str(rec.combo["n_heads"]),
        str(rec.combo["n_layers"]),
        str(rec.combo["dropout"]),
        "" if rec.elapsed_min is None else f"{rec.elapsed_min:.1f}",
        format_loss(final.get("train_loss")),
        format_loss(final.get("val_loss")),
        format_perplexity(final.get("val_perplexity")),
        f"{rec.param_count / 1e6:.2f}",
        rec.status,
    ]


def emit_table(records: list[RunRecord]) -> tuple[str, str]:
    """Render run records as (csv_text, aligned_text), one row per run in
    registry order."""
    rows = [_row_cells(r) for r in records]
    csv_lines = [TABLE_HEADER] + [",".join(cells) for cells in rows]
    csv_text = "\n".join(csv_lines) + "\n"

    headers = TABLE_HEADER.split(",")
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def align(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    text = "\n".join([align(headers)] + [align(r) for r in rows]) + "\n"
    return csv_text, text


def run_label(combo: dict) -> str:
    """Legend label for one configuration, e.g. d128_h4_l4_p0.1."""
    return (f"d{combo['d_model']}_h{combo['n_heads']}"
            f"_l{combo['n_layers']}_p{combo['dropout']}")


def load_metric_stream(path, run_id: str) -> list[EpochMetrics]:
    """Epoch-ordered metrics for one run from a line-delimited record stream."""
    records = [r for r in read_jsonl(path, what="metric stream")
               if r.get("run_id") == run_id]
    if not records:
        raise DataError(f"metric stream {path} has no records for run {run_id}")
    records.sort(key=lambda r: r["epoch"])
    expected = list(range(1, len(records) + 1))
    if [r["epoch"] for r in records] != expected:
        raise DataError(f"metric stream for run {run_id} has gaps or duplicates")
    return [EpochMetrics.from_record(r) for r in records]


def emit_curves(metrics_path, run_id: str, out_dir, combo: dict) -> dict[str, str]:
    """Write the three per-epoch curve files (accuracy, loss, perplexity),
    each CSV with header epoch,train,val. Returns metric -> file path."""
    history = load_metric_stream(metrics_path, run_id)
    os.makedirs(out_dir, exist_ok=True)
    label = run_label(combo)
    columns = {
        "accuracy": lambda m: (m.train_acc, m.val_acc),
        "loss": lambda m: (m.train_loss, m.val_loss),
        "perplexity": lambda m: (math.exp(m.train_loss) if math.isfinite(m.train_loss)
                                 else math.inf,
                                 m.val_perplexity),
    }
    paths = {}
    for metric, pick in columns.items():
        path = os.path.join(out_dir, f"{label}_{metric}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train,val\n")
            for m in history:
                tr, va = pick(m)
                fh.write(f"{m.epoch},{tr!r},{va!r}\n")
        paths[metric] = path
    return paths


def select_best(records: list[RunRecord]) -> RunRecord:
    """The completed run with minimum validation perplexity; ties break to
    fewer parameters, then registry order."""
    candidates = [
        (i, r) for i, r in enumerate(records)
        if r.status == STATUS_COMPLETED and r.final is not None
        and r.final.get("val_perplexity") is not None
        and math.isfinite(r.final["val_perplexity"])
    ]
    if not candidates:
        raise ConfigError("select_best: no completed runs in the registry")
    _, best = min(candidates,
                  key=lambda ir: (ir[1].final["val_perplexity"],
                                  ir[1].param_count, ir[0]))
    return best
