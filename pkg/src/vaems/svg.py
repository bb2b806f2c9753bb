"""Dependency-free SVG charts for the evaluation reports.

Output is deterministic except for one timestamp comment on the second
line, which reruns may differ by.
"""

from __future__ import annotations

from datetime import datetime, timezone

import numpy as np

__all__ = ["render_beeswarm", "render_selection_curves", "render_density"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _doc(width, height, body, title):
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f"<!-- generated: {stamp} -->\n"
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>\n'
    )
    return head + body + "</svg>\n"


def _text(x, y, s, size=10, anchor="middle", color="#333"):
    return (
        f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="{size}" '
        f'font-family="sans-serif" fill="{color}">{s}</text>\n'
    )


def _circle(x, y, r, color):
    return f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r}" fill="{color}" fill-opacity="0.75"/>\n'


def _polyline(points, color, dash=None):
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>\n'


def _line(x1, y1, x2, y2, color="#888"):
    return f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="{color}"/>\n'


def render_beeswarm(path, choices, true_k=None, title="Selected number of signatures"):
    """Stacked-dot plot of chosen k per method across splits.

    ``choices`` maps method name to the list of selected k values.
    """
    width, height = 120 * max(1, len(choices)) + 80, 300
    top, bottom, left = 40, height - 40, 60
    all_k = [k for v in choices.values() for k in v]
    if true_k is not None:
        all_k.append(true_k)
    k_lo, k_hi = min(all_k) - 1, max(all_k) + 1
    yscale = lambda k: bottom - (k - k_lo) / max(k_hi - k_lo, 1) * (bottom - top)

    body = _line(left, top, left, bottom)
    for k in range(k_lo, k_hi + 1):
        body += _text(left - 8, yscale(k) + 3, str(k), anchor="end")
        body += _line(left - 4, yscale(k), left, yscale(k))
    if true_k is not None:
        body += _line(left, yscale(true_k), width - 20, yscale(true_k), color="#d2b48c")
    for mi, (method, ks) in enumerate(sorted(choices.items())):
        cx = left + 60 + 120 * mi
        body += _text(cx, bottom + 20, method, size=12)
        counts = {}
        for k in ks:
            j = counts.get(k, 0)
            counts[k] = j + 1
            # stack duplicates symmetrically around the column center
            offset = (j + 1) // 2 * 12 * (1 if j % 2 else -1)
            body += _circle(cx + offset, yscale(k), 5, _COLORS[mi % len(_COLORS)])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_doc(width, height, body, title))


def _panel(x0, y0, w, h, xs, series, xlabel, ylabel):
    """One line-chart panel; series is a list of (name, ys, color)."""
    finite = [y for _, ys, _ in series for y in ys if np.isfinite(y)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    xlo, xhi = min(xs), max(xs)
    sx = lambda x: x0 + (x - xlo) / max(xhi - xlo, 1e-12) * w
    sy = lambda y: y0 + h - (y - lo) / (hi - lo) * h

    body = _line(x0, y0 + h, x0 + w, y0 + h) + _line(x0, y0, x0, y0 + h)
    for x in xs:
        body += _text(sx(x), y0 + h + 14, str(x))
    body += _text(x0 + w / 2, y0 + h + 28, xlabel, size=11)
    body += _text(x0 - 36, y0 - 8, ylabel, size=11, anchor="start")
    body += _text(x0 - 8, sy(lo) + 3, f"{lo:.3g}", anchor="end", size=8)
    body += _text(x0 - 8, sy(hi) + 3, f"{hi:.3g}", anchor="end", size=8)
    for name, ys, color in series:
        pts = [(sx(x), sy(y)) for x, y in zip(xs, ys) if np.isfinite(y)]
        if pts:
            body += _polyline(pts, color)
    return body


def render_selection_curves(path, ks, losses_by_method, silhouettes_by_method,
                            title="Validation loss and silhouette vs k"):
    """Two panels: mean validation loss vs k and silhouette vs k."""
    width, height = 760, 320
    body = ""
    legends = sorted(losses_by_method)
    loss_series = [
        (m, losses_by_method[m], _COLORS[i % len(_COLORS)]) for i, m in enumerate(legends)
    ]
    sil_series = [
        (m, silhouettes_by_method[m], _COLORS[i % len(_COLORS)]) for i, m in enumerate(legends)
    ]
    body += _panel(70, 50, 280, 200, ks, loss_series, "k", "mean validation loss")
    body += _panel(450, 50, 280, 200, ks, sil_series, "k", "silhouette")
    for i, m in enumerate(legends):
        body += _circle(70 + 120 * i, height - 14, 4, _COLORS[i % len(_COLORS)])
        body += _text(80 + 120 * i, height - 10, m, anchor="start", size=11)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_doc(width, height, body, title))


def _density(values, lo, hi, bins=40):
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi), density=True)
    centers = (edges[:-1] + edges[1:]) / 2.0
    return centers, hist


def render_density(path, panels, title="Exposure densities (true vs estimated)"):
    """Per-signature density panels.

    ``panels`` is a list of (name, true_values_or_None, estimated_values).
    """
    pw, ph, gap = 220, 180, 40
    width = gap + len(panels) * (pw + gap)
    height = 320
    body = ""
    for pi, (name, true_vals, est_vals) in enumerate(panels):
        x0, y0 = gap + pi * (pw + gap), 60
        pool = np.concatenate([v for v in (true_vals, est_vals) if v is not None])
        lo, hi = float(pool.min()), float(pool.max())
        if hi - lo < 1e-9:
            lo, hi = lo - 1.0, hi + 1.0
        series = []
        if true_vals is not None:
            series.append(("true", _density(true_vals, lo, hi), "#1f77b4", None))
        series.append(("estimated", _density(est_vals, lo, hi), "#d62728", "4 3"))
        dmax = max(h.max() for _, (_, h), _, _ in series) or 1.0

        sx = lambda x: x0 + (x - lo) / (hi - lo) * pw
        sy = lambda d: y0 + ph - d / dmax * ph
        body += _line(x0, y0 + ph, x0 + pw, y0 + ph) + _line(x0, y0, x0, y0 + ph)
        body += _text(x0 + pw / 2, y0 - 10, name, size=12)
        body += _text(x0, y0 + ph + 14, f"{lo:.3g}", size=8)
        body += _text(x0 + pw, y0 + ph + 14, f"{hi:.3g}", size=8)
        for label, (centers, hist), color, dash in series:
            body += _polyline([(sx(c), sy(h)) for c, h in zip(centers, hist)], color, dash)
    body += _circle(gap, height - 14, 4, "#1f77b4") + _text(gap + 10, height - 10, "true", anchor="start", size=11)
    body += _circle(gap + 80, height - 14, 4, "#d62728") + _text(gap + 90, height - 10, "estimated", anchor="start", size=11)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_doc(width, height, body, title))
