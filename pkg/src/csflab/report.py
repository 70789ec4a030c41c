"""Render a finished run directory: a text summary and SVG line plots, straight from the CSV files."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

W, H = 480, 300
MARGIN = 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


class ReportError(RuntimeError):
    pass


def read_csv(path: Path) -> dict[str, list[float]]:
    if not path.exists():
        raise ReportError(f"missing {path}")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ReportError(f"{path} has no rows")
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def svg_line_plot(x: list[float], series: dict[str, list[float]], title: str, ylabel: str) -> str:
    """A minimal self-contained SVG line chart; NaN points break the line."""
    xmin, xmax = min(x), max(x)
    ys = [v for s in series.values() for v in s if math.isfinite(v)]
    ymin, ymax = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    xspan = (xmax - xmin) or 1.0

    def px(v):
        return MARGIN + (v - xmin) / xspan * (W - 2 * MARGIN)

    def py(v):
        return H - MARGIN - (v - ymin) / (ymax - ymin) * (H - 2 * MARGIN)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'data-xmin="{xmin:g}" data-xmax="{xmax:g}">',
           f'<title>{escape(title)}</title>',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{MARGIN}" y1="{H - MARGIN}" x2="{W - MARGIN}" y2="{H - MARGIN}" stroke="black"/>',
           f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{H - MARGIN}" stroke="black"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="11">step</text>',
           f'<text x="12" y="{H / 2}" font-size="11" transform="rotate(-90 12 {H / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>',
           f'<text x="{MARGIN}" y="{H - MARGIN + 14}" font-size="10" text-anchor="middle">{_fmt(xmin)}</text>',
           f'<text x="{W - MARGIN}" y="{H - MARGIN + 14}" font-size="10" text-anchor="middle">{_fmt(xmax)}</text>',
           f'<text x="{MARGIN - 4}" y="{H - MARGIN}" font-size="10" text-anchor="end">{_fmt(ymin)}</text>',
           f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" font-size="10" text-anchor="end">{_fmt(ymax)}</text>']
    for i, (name, ys_) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        segs, cur = [], []
        for xv, yv in zip(x, ys_):
            if math.isfinite(yv):
                cur.append(f"{px(xv):.2f},{py(yv):.2f}")
            elif cur:
                segs.append(cur)
                cur = []
        if cur:
            segs.append(cur)
        for seg in segs:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(seg)}"/>')
        out.append(f'<text x="{W - MARGIN - 4}" y="{MARGIN + 14 * (i + 1)}" font-size="10" text-anchor="end" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(run_dir) -> Path:
    """Write summary.txt, loss.svg, r2.svg and coverage.svg into ``run_dir``; returns the summary path."""
    run_dir = Path(run_dir)
    metrics = read_csv(run_dir / "metrics.csv")
    steps = metrics["step"]
    (run_dir / "loss.svg").write_text(svg_line_plot(steps, {"loss": metrics["loss"]}, "Contrastive loss", "loss"))
    (run_dir / "r2.svg").write_text(svg_line_plot(
        steps, {"r2_state": metrics["r2_state"], "r2_diff": metrics["r2_diff"]}, "Held-out R^2", "R^2"))
    cov_path = run_dir / "coverage.csv"
    cov = read_csv(cov_path) if cov_path.exists() else None
    if cov is not None:
        (run_dir / "coverage.svg").write_text(svg_line_plot(
            cov["step"], {"cells": cov["coverage"]}, "Training-data coverage", "occupied cells"))

    lines = [f"run: {run_dir}", f"steps logged: {int(steps[0])}..{int(steps[-1])} ({len(steps)} rows)",
             f"final loss: {_fmt(metrics['loss'][-1])}", f"final accuracy: {_fmt(metrics['accuracy'][-1])}",
             f"final r2_state: {_fmt(metrics['r2_state'][-1])}", f"final r2_diff: {_fmt(metrics['r2_diff'][-1])}"]
    if cov is not None:
        lines.append(f"training coverage: {int(cov['coverage'][-1])} cells")
    rep_path = run_dir / "report.json"
    if rep_path.exists():
        rep = json.loads(rep_path.read_text())
        lines += [f"status: {rep['status']}" + (f" ({rep['reason']})" if rep.get("reason") else ""),
                  f"critic accuracy: {_fmt(rep['critic']['accuracy'])} (chance {_fmt(rep['critic']['chance'])})",
                  f"diversity: {rep['diversity']['score']}",
                  f"eval coverage: {rep['coverage']['occupied']} cells",
                  f"oracle return: {_fmt(rep['oracle']['oracle_return'])}",
                  f"mean |cos(phi(o), phi(o'))|: {_fmt(rep['geometry']['mean_abs_cos_phi'])}",
                  f"affine generator: {rep['conditioning']['affine_generator']}",
                  f"rejected steps: {rep['rejected_steps']}"]
    summary = run_dir / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    return summary


def seed_summary(values: list[float]) -> str:
    """mean +/- 2 sd (sample sd), labelled as such."""
    n = len(values)
    mean = sum(values) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
    return f"{mean:.4f} +/- {2 * sd:.4f} (mean +/- 2 sd, n={n})"
