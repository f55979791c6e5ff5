"""Static SVG line and path plots; no rendering dependency."""
from __future__ import annotations

import numpy as np

WIDTH, HEIGHT, MARGIN = 480, 360, 40
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def moving_average(values, window: int):
    """Centered moving average; the window shrinks at the ends and skips gaps (None/nan)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    v = np.array([np.nan if x is None else float(x) for x in values])
    half = window // 2
    out = np.full(len(v), np.nan)
    for i in range(len(v)):
        seg = v[max(0, i - half):i + half + 1]
        seg = seg[np.isfinite(seg)]
        if len(seg) and np.isfinite(v[i]):
            out[i] = seg.mean()
    return out


class Frame:
    """Maps data coordinates into the plot area (y axis pointing up)."""

    def __init__(self, xlim, ylim):
        self.x0, self.x1 = _widen(*xlim)
        self.y0, self.y1 = _widen(*ylim)

    def __call__(self, x, y):
        px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)
        py = HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)
        return px, py


def _widen(lo, hi):
    if not np.isfinite(lo) or not np.isfinite(hi):
        return 0.0, 1.0
    if hi - lo < 1e-12:
        return lo - 0.5, hi + 0.5
    return float(lo), float(hi)


def _polyline(frame, xs, ys, color):
    pts = " ".join("%.2f,%.2f" % frame(x, y) for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def _dot(frame, x, y, color):
    px, py = frame(x, y)
    return f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" fill="{color}"/>'


def _axes(frame, title, xlabel, ylabel):
    out = [f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
           'fill="none" stroke="#444"/>',
           f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="14">{title}</text>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
           f'<text x="12" y="{HEIGHT / 2}" font-size="12" transform="rotate(-90 12 {HEIGHT / 2})" '
           f'text-anchor="middle">{ylabel}</text>']
    for x, anchor, y in ((frame.x0, "start", HEIGHT - MARGIN + 14), (frame.x1, "end", HEIGHT - MARGIN + 14)):
        out.append(f'<text x="{frame(x, frame.y0)[0]:.2f}" y="{y}" text-anchor="{anchor}" font-size="10">{x:.3g}</text>')
    for y in (frame.y0, frame.y1):
        out.append(f'<text x="{MARGIN - 4}" y="{frame(frame.x0, y)[1]:.2f}" text-anchor="end" '
                   f'font-size="10">{y:.3g}</text>')
    return out


def _document(body, header=None):
    # "--" may not appear inside an XML comment
    head = f"<!-- {header.replace('--', '- -')} -->\n" if header else ""
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n{head}' + "\n".join(body) + "\n</svg>\n")


def line_plot_svg(series: dict, title="", xlabel="step", ylabel="", header=None) -> str:
    """``series`` maps a label to ``(xs, ys)``; missing y values break nothing."""
    xs_all = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()]) if series else np.zeros(0)
    ys_all = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()]) if series else np.zeros(0)
    ys_all = ys_all[np.isfinite(ys_all)]
    frame = Frame((xs_all.min(), xs_all.max()) if len(xs_all) else (0, 1),
                  (ys_all.min(), ys_all.max()) if len(ys_all) else (0, 1))
    body = _axes(frame, title, xlabel, ylabel)
    for k, (label, (x, y)) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        ok = np.isfinite(y)
        if ok.sum() == 1:
            body.append(_dot(frame, x[ok][0], y[ok][0], color))
        elif ok.sum() > 1:
            body.append(_polyline(frame, x[ok], y[ok], color))
        body.append(f'<text x="{WIDTH - MARGIN - 4}" y="{MARGIN + 14 + 14 * k}" text-anchor="end" '
                    f'font-size="11" fill="{color}">{label}</text>')
    return _document(body, header)


def paths_svg(paths, title="", xlim=(-1.0, 1.0), ylim=(-1.0, 1.0), header=None) -> str:
    """2-D paths drawn in a fixed data window."""
    frame = Frame(xlim, ylim)
    body = _axes(frame, title, "x", "y")
    for k, p in enumerate(paths):
        p = np.asarray(p, dtype=float)
        body.append(_polyline(frame, p[:, 0], p[:, 1], COLORS[k % len(COLORS)]))
    return _document(body, header)
