"""SVG rendering of interpretation traces.

The grid has one column per hypothesis class and one row per tree depth.
Each column stops at its verdict depth, and its last cell is outlined green
(separated) or red (overlapping). Points are placed at the trace's PCA
coordinates, scaled per (column, factor) so that rows sharing a projection
stay comparable.
"""
from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .interpret import SEPARATED, InterpretationTrace

NS = "urn:cnninte:trace"


@dataclass(frozen=True)
class ReportSpec:
    cell_width: int = 150
    cell_height: int = 130
    margin_left: int = 120
    margin_top: int = 70
    gap: int = 10
    point_radius: float = 1.6
    true_color: str = "#d62728"
    hypothesis_color: str = "#1f77b4"
    separated_color: str = "#2ca02c"
    overlapping_color: str = "#d62728"
    neutral_color: str = "#bbbbbb"
    max_rows: int = 5


def _f(v: float) -> str:
    return f"{v:.6f}"


def _column_bounds(column):
    """(lo, hi) per factor across every step of the column."""
    bounds = {}
    for step in column.steps:
        pts = np.vstack([np.reshape(step.points_true, (-1, 2)), np.reshape(step.points_hypo, (-1, 2))])
        if not len(pts):
            continue
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        if step.factor_index in bounds:
            plo, phi = bounds[step.factor_index]
            lo, hi = np.minimum(lo, plo), np.maximum(hi, phi)
        bounds[step.factor_index] = (lo, hi)
    return bounds


def _scale(points, lo, hi, width, height, pad):
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    unit = (np.asarray(points) - lo) / span
    unit = np.where(hi - lo > 0, unit, 0.5)
    x = pad + unit[:, 0] * (width - 2 * pad)
    y = height - pad - unit[:, 1] * (height - 2 * pad)
    return x, y


def cell_origin(spec: ReportSpec, col: int, row: int):
    return (spec.margin_left + col * (spec.cell_width + spec.gap),
            spec.margin_top + row * (spec.cell_height + spec.gap))


def render_svg(trace: InterpretationTrace, spec: ReportSpec = ReportSpec()) -> bytes:
    n_cols = len(trace.columns)
    n_rows = min(spec.max_rows, max([len(c.steps) for c in trace.columns] + [1]))
    width = spec.margin_left + n_cols * (spec.cell_width + spec.gap)
    height = spec.margin_top + n_rows * (spec.cell_height + spec.gap) + 10
    status = "correct" if trace.correct else "misclassified"
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:ci="{NS}" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="10" y="22" font-family="sans-serif" font-size="16" class="title">instance {trace.instance_index}: '
        f'true {trace.true_class}, predicted {trace.predicted_class} ({status})</text>',
        f'<text x="10" y="42" font-family="sans-serif" font-size="11">meta features '
        f'{escape(" ".join(f"f{i}={v}" for i, v in enumerate(trace.features)))}</text>',
    ]
    # row labels: the path condition tested at each depth
    for r, (f, thr, left) in enumerate(trace.path[:n_rows]):
        _, y0 = cell_origin(spec, 0, r)
        op = "&lt;=" if left else "&gt;"
        out.append(f'<text x="8" y="{y0 + spec.cell_height // 2}" font-family="sans-serif" font-size="12" '
                   f'class="row-label">depth {r + 1}: f{f} {op} {thr:g}</text>')

    for c, column in enumerate(trace.columns):
        x0, _ = cell_origin(spec, c, 0)
        out.append(f'<text x="{x0 + 4}" y="{spec.margin_top - 8}" font-family="sans-serif" font-size="12" '
                   f'class="col-label">Hypothesis: {column.hypothesis}</text>')
        bounds = _column_bounds(column)
        last = len(column.steps) - 1
        for r, step in enumerate(column.steps[:n_rows]):
            cx, cy = cell_origin(spec, c, r)
            if r == last:
                border = spec.separated_color if column.verdict == SEPARATED else spec.overlapping_color
                stroke = 3
            else:
                border, stroke = spec.neutral_color, 1
            verdict_attr = f' ci:verdict="{column.verdict}"' if r == last else ""
            out.append(f'<svg class="cell" x="{cx}" y="{cy}" width="{spec.cell_width}" height="{spec.cell_height}" '
                       f'ci:hypothesis="{column.hypothesis}" ci:depth="{step.depth}"{verdict_attr}>')
            out.append(f'<rect class="border" x="0" y="0" width="{spec.cell_width}" height="{spec.cell_height}" '
                       f'fill="none" stroke="{border}" stroke-width="{stroke}"/>')
            lo, hi = bounds.get(step.factor_index, (np.zeros(2), np.ones(2)))
            for cls, pts, color in (("true", step.points_true, spec.true_color),
                                    ("hypo", step.points_hypo, spec.hypothesis_color)):
                if not len(pts):
                    continue
                xs, ys = _scale(pts, lo, hi, spec.cell_width, spec.cell_height, 8)
                out.append(f'<g class="{cls}" fill="{color}">')
                out.extend(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{spec.point_radius}"/>' for x, y in zip(xs, ys))
                out.append("</g>")
            out.append(f'<text x="4" y="{spec.cell_height - 4}" font-family="sans-serif" font-size="9">'
                       f'true {step.n_true} / hyp {step.n_hypo}</text>')
            out.append("</svg>")
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")


def svg_filename(trace: InterpretationTrace) -> str:
    return f"interp_{trace.instance_index}_{trace.true_class}_{trace.predicted_class}.svg"
