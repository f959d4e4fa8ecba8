"""Report writers: JSON, aligned text table, CSV, metric figures, PGM slices."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from semvox.evaluate import MeanMetrics, MetricsReport
from semvox.volgrid import BrainVolume

AXIS_NAMES = ("x", "y", "z")
_METRICS = ("auc", "dice", "iou")


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_json_obj(), sort_keys=True, indent=2)


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _fmt_pct(value: float | None) -> str:
    return "n/a" if value is None else f"{value:+.3f}%"


def report_table(report: MetricsReport) -> str:
    """Aligned-column text table, one row per retention fraction."""
    paired = any(r.chat is not None for r in report.rows)
    if paired:
        header = ["row"]
        for m in _METRICS:
            header += [f"{m}:non-chat", f"{m}:chat", f"{m}:over"]
    else:
        header = ["row"] + list(_METRICS)
    body = []
    for r in report.rows:
        cells = [r.label]
        for m in _METRICS:
            cells.append(_fmt(getattr(r.non_chat, m)))
            if paired:
                cells.append(_fmt(getattr(r.chat, m) if r.chat else None))
                cells.append(_fmt_pct(r.over_pct.get(m) if r.over_pct else None))
        body.append(cells)
    widths = [
        max(len(header[i]), *(len(row[i]) for row in body)) if body else len(header[i])
        for i in range(len(header))
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def report_csv(report: MetricsReport) -> str:
    cols = ["label", "retention", "n"]
    for m in _METRICS:
        cols += [f"{m}_non_chat", f"{m}_chat", f"{m}_over_pct"]
    lines = [",".join(cols)]

    def cell(v) -> str:
        return "" if v is None else repr(float(v))

    for r in report.rows:
        row = [r.label, repr(float(r.retention)), str(r.n)]
        for m in _METRICS:
            row.append(cell(getattr(r.non_chat, m)))
            row.append(cell(getattr(r.chat, m) if r.chat else None))
            row.append(cell(r.over_pct.get(m) if r.over_pct else None))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _series(report: MetricsReport, metric: str, which: str):
    xs, ys = [], []
    for r in report.rows:
        m: MeanMetrics | None = getattr(r, which)
        if m is None:
            continue
        v = getattr(m, metric)
        if v is None:
            continue
        xs.append(r.retention * 100.0)
        ys.append(v)
    return xs, ys


def save_report_figures(report: MetricsReport, out_dir) -> list[Path]:
    """One PNG per metric: mean value against retention percentage."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    paired = any(r.chat is not None for r in report.rows)
    for metric in _METRICS:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        xs, ys = _series(report, metric, "non_chat")
        ax.plot(xs, ys, marker="o", label="non-chat")
        if paired:
            xs_c, ys_c = _series(report, metric, "chat")
            ax.plot(xs_c, ys_c, marker="s", label="chat")
        ax.set_xlabel("retention (%)")
        ax.set_ylabel(f"mean {metric}")
        ax.set_title(f"{report.condition_base}: {metric} vs retention")
        ax.invert_xaxis()
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"fig_{metric}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


def save_report_files(report: MetricsReport, out_dir) -> dict[str, object]:
    """Write report.json, report.txt, report.csv, and the metric figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(report_json(report), encoding="utf-8")
    table_path = out_dir / "report.txt"
    table_path.write_text(report_table(report), encoding="utf-8")
    csv_path = out_dir / "report.csv"
    csv_path.write_text(report_csv(report), encoding="utf-8")
    figures = save_report_figures(report, out_dir)
    return {"json": json_path, "table": table_path, "csv": csv_path, "figures": figures}


# ---------------------------------------------------------------------------
# PGM slice rendering
# ---------------------------------------------------------------------------

def render_slices(volume: BrainVolume, axis: str, out_dir) -> list[Path]:
    """Write one binary (P5) PGM per slice along an axis.

    Intensities are min-max normalized over the whole volume; a constant
    volume renders all-black. File names are zero-padded slice indices.
    """
    if axis not in AXIS_NAMES:
        raise ValueError(f"axis must be one of {AXIS_NAMES}, got {axis!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    a = AXIS_NAMES.index(axis)
    data = volume.data.astype(np.float64)
    vmin = float(data.min())
    vmax = float(data.max())
    if vmax > vmin:
        scaled = np.floor((data - vmin) / (vmax - vmin) * 255.0 + 0.5)
        bytes3d = np.clip(scaled, 0, 255).astype(np.uint8)
    else:
        bytes3d = np.zeros(data.shape, dtype=np.uint8)

    other = [i for i in range(3) if i != a]  # ascending: u (width), v (height)
    width = volume.grid.dims[other[0]]
    height = volume.grid.dims[other[1]]
    paths = []
    for idx in range(volume.grid.dims[a]):
        plane = np.take(bytes3d, idx, axis=a)  # shape (width, height)
        rows = plane.T  # row j along v, column i along u
        header = f"P5\n{width} {height}\n255\n".encode("ascii")
        path = out_dir / f"{idx:03d}.pgm"
        path.write_bytes(header + np.ascontiguousarray(rows).tobytes())
        paths.append(path)
    return paths


def save_loss_curve(epoch_losses, path) -> None:
    """Loss-per-epoch figure for a training run."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(range(1, len(epoch_losses) + 1), epoch_losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean step MSE")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
