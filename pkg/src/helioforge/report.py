"""Report emission: ``results.csv``, ``summary.md`` and hand-written SVG 1.1 plots."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .metrics import EvaluationResult, ScaleDiagnostic, delta_rmse_pct

HEADER = ["strategy", "source", "target", "fraction_pct", "rmse", "rmse_sunny", "rmse_cloudy", "te_mean", "te_std"]
SCALE_HEADER = ["scale_factor", "rmse_scaled", "pearson_r"]


@dataclass
class ResultRow:
    strategy: str
    source: str
    target: str
    fraction_pct: float
    evaluation: EvaluationResult
    te_mean: float = float("nan")
    te_std: float = float("nan")
    scale: ScaleDiagnostic | None = None


def fmt(x) -> str:
    """Reals with six significant digits."""
    return "%.6g" % x


def _fraction(x) -> str:
    return str(int(x)) if float(x).is_integer() else fmt(x)


def results_table(rows: Sequence[ResultRow]) -> list[list[str]]:
    with_scale = any(r.scale is not None for r in rows)
    out = [HEADER + (SCALE_HEADER if with_scale else [])]
    for r in rows:
        e = r.evaluation
        line = [r.strategy, r.source, r.target, _fraction(r.fraction_pct),
                fmt(e.rmse_overall), fmt(e.rmse_sunny), fmt(e.rmse_cloudy), fmt(r.te_mean), fmt(r.te_std)]
        if with_scale:
            s = r.scale
            line += [fmt(s.best_factor), fmt(s.rmse_after), fmt(s.pearson_r)] if s else ["", "", ""]
        out.append(line)
    return out


def write_results_csv(rows: Sequence[ResultRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(results_table(rows))


def read_results_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def delta_table(rows: Sequence[ResultRow]) -> list[tuple[str, str, str, float, float]]:
    """(strategy, source, target, fraction, ΔRMSE%) of every transfer row
    against the local row of the same target and fraction."""
    base = {(r.target, float(r.fraction_pct)): r.evaluation.rmse_overall for r in rows if r.strategy == "local"}
    out = []
    for r in rows:
        key = (r.target, float(r.fraction_pct))
        if r.strategy in ("WS", "FConv") and key in base:
            out.append((r.strategy, r.source, r.target, float(r.fraction_pct),
                        delta_rmse_pct(r.evaluation.rmse_overall, base[key])))
    return out


def summary_markdown(rows: Sequence[ResultRow]) -> str:
    table = results_table(rows)
    lines = ["# Results", "", "| " + " | ".join(table[0]) + " |", "|" + "---|" * len(table[0])]
    lines += ["| " + " | ".join(c or "-" for c in row) + " |" for row in table[1:]]
    deltas = delta_table(rows)
    if deltas:
        lines += ["", "## Transfer vs local (ΔRMSE%, negative is better)", "",
                  "| strategy | source | target | fraction_pct | delta_rmse_pct |", "|---|---|---|---|---|"]
        lines += [f"| {s} | {src} | {t} | {_fraction(p)} | {fmt(d)} |" for s, src, t, p, d in deltas]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
W, H, PAD = 640, 360, 50


def _scale(values, lo_px, hi_px):
    v = np.asarray(values, dtype=float)
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    return lambda x: lo_px + (np.asarray(x, dtype=float) - lo) / (hi - lo) * (hi_px - lo_px), lo, hi


def line_chart_svg(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], title: str,
                   xlabel: str, ylabel: str, markers: bool = False) -> str:
    """Minimal SVG 1.1 line chart; ``series`` is (label, x, y) triples."""
    xs = np.concatenate([np.asarray(x, dtype=float) for _, x, _ in series])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, _, y in series] + [np.zeros(0)])
    sx, x0, x1 = _scale(xs, PAD, W - PAD)
    sy, y0, y1 = _scale(ys, H - PAD, PAD)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<text x="{PAD}" y="{H - PAD + 15}" font-size="10">{fmt(x0)}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 15}" text-anchor="end" font-size="10">{fmt(x1)}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="10">{fmt(y0)}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="10">{fmt(y1)}</text>',
    ]
    for k, (label, x, y) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        px, py = sx(x), sy(y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if markers:
            parts += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{color}"/>' for a, b in zip(px, py)]
        ly = PAD + 14 * k
        parts.append(f'<line x1="{W - PAD - 150}" y1="{ly}" x2="{W - PAD - 130}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - PAD - 125}" y="{ly + 4}" font-size="10">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def day_plot_svg(minutes, pred, truth, title: str, units: str = "") -> str:
    """Prediction vs ground truth over one day; x in minutes of day."""
    hours = np.asarray(minutes, dtype=float) / 60.0
    return line_chart_svg([("measured", hours, truth), ("forecast", hours, pred)], title, "hour of day (UTC)", units)


def fraction_curves_svg(rows: Sequence[ResultRow], title: str = "Transfer vs local") -> str:
    """ΔRMSE% against training-data fraction, one curve per strategy/source/target."""
    curves: dict[tuple[str, str, str], list[tuple[float, float]]] = {}
    for strategy, source, target, frac, delta in delta_table(rows):
        curves.setdefault((strategy, source, target), []).append((frac, delta))
    if not curves:
        raise ValueError("no transfer rows with matching local baselines")
    series = []
    for (strategy, source, target), pts in sorted(curves.items()):
        pts.sort()
        series.append((f"{strategy} {source}->{target}", [p for p, _ in pts], [d for _, d in pts]))
    return line_chart_svg(series, title, "training data fraction (%)", "delta RMSE (%)", markers=True)


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


def emit_report(rows: Sequence[ResultRow], path, day_plots: Sequence[tuple[str, object, object, object]] = (),
                units: str = "") -> list[Path]:
    """Write results.csv, summary.md, optional per-day plots (name, minutes,
    pred, truth) and, when transfer rows exist, the ΔRMSE% curves."""
    if not rows:
        raise ValueError("no results to report")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise ValueError(f"cannot write report to {out}: {exc}") from exc
    written = [out / "results.csv", out / "summary.md"]
    write_results_csv(rows, written[0])
    _write(written[1], summary_markdown(rows))
    for name, minutes, pred, truth in day_plots:
        p = out / f"day_{name}.svg"
        _write(p, day_plot_svg(minutes, pred, truth, name, units))
        written.append(p)
    if delta_table(rows):
        p = out / "delta_rmse_vs_fraction.svg"
        _write(p, fraction_curves_svg(rows))
        written.append(p)
    return written
