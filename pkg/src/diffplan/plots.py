"""Minimal standalone SVG figures for scenarios, gradient arrows and planner trajectories."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 360
MARGIN = 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f", "#bcbd22",
          "#e377c2", "#393b79")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Panel:
    """Affine data-to-pixel map for one rectangular plotting area."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        lo, hi = ylim
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        xlo, xhi = xlim
        if xhi - xlo < 1e-12:
            xlo, xhi = xlo - 0.5, xhi + 0.5
        self.xlim, self.ylim = (xlo, xhi), (lo, hi)

    def px(self, x):
        return self.x0 + (np.asarray(x, float) - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * self.w

    def py(self, y):
        return self.y0 + self.h - (np.asarray(y, float) - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * self.h

    def frame(self, title: str, xlabel: str = "", ylabel: str = "") -> list[str]:
        out = [f'<rect x="{_fmt(self.x0)}" y="{_fmt(self.y0)}" width="{_fmt(self.w)}" height="{_fmt(self.h)}" '
               'fill="none" stroke="#444" stroke-width="1"/>',
               f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 - 8)}" text-anchor="middle" '
               f'font-size="13">{escape(title)}</text>']
        for frac in (0.0, 0.5, 1.0):
            yv = self.ylim[0] + frac * (self.ylim[1] - self.ylim[0])
            out.append(f'<text x="{_fmt(self.x0 - 4)}" y="{_fmt(self.py(yv) + 4)}" text-anchor="end" '
                       f'font-size="10">{yv:.3g}</text>')
            xv = self.xlim[0] + frac * (self.xlim[1] - self.xlim[0])
            out.append(f'<text x="{_fmt(self.px(xv))}" y="{_fmt(self.y0 + self.h + 14)}" text-anchor="middle" '
                       f'font-size="10">{xv:.3g}</text>')
        if xlabel:
            out.append(f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 + self.h + 30)}" '
                       f'text-anchor="middle" font-size="11">{escape(xlabel)}</text>')
        if ylabel:
            cx, cy = self.x0 - 36, self.y0 + self.h / 2
            out.append(f'<text x="{_fmt(cx)}" y="{_fmt(cy)}" text-anchor="middle" font-size="11" '
                       f'transform="rotate(-90 {_fmt(cx)} {_fmt(cy)})">{escape(ylabel)}</text>')
        return out

    def polyline(self, x, y, color, width=1.5) -> str:
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(self.px(x), self.py(y)))
        return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>'


def _document(width, height, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            '<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" '
            'orient="auto-start-reverse"><path d="M0,0 L10,5 L0,10 z" fill="context-stroke"/></marker></defs>\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _limits(*arrays, pad=0.05):
    vals = np.concatenate([np.ravel(a) for a in arrays])
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo or 1.0
    return lo - pad * span, hi + pad * span


def scenario_svg(scenarios, labels=None, title="Load scenarios") -> str:
    """One polyline per scenario column; ``scenarios`` has shape (24, k)."""
    data = np.atleast_2d(np.asarray(scenarios, float).T).T
    hours = np.arange(data.shape[0])
    panel = _Panel(MARGIN + 10, MARGIN, WIDTH - 2 * MARGIN - 10, HEIGHT - 2 * MARGIN - 10,
                   (0, hours[-1]), _limits(data))
    body = panel.frame(title, "hour", "load [p.u.]")
    labels = labels or [f"scenario {i}" for i in range(data.shape[1])]
    for i in range(data.shape[1]):
        body.append(panel.polyline(hours, data[:, i], COLORS[i % len(COLORS)]))
        body.append(f'<text x="{_fmt(panel.x0 + panel.w - 4)}" y="{_fmt(panel.y0 + 14 + 13 * i)}" '
                    f'text-anchor="end" font-size="10" fill="{COLORS[i % len(COLORS)]}">{escape(labels[i])}</text>')
    return _document(WIDTH, HEIGHT, body)


def gradient_arrows_svg(load, jacobian, names, title="Policy gradients") -> str:
    """Scenario curve with one small panel per policy component; arrows show the per-hour derivative."""
    load = np.asarray(load, float)
    jac = np.asarray(jacobian, float)
    k = jac.shape[1]
    ph = 200
    height = MARGIN + k * (ph + MARGIN)
    hours = np.arange(load.size)
    body = []
    for j in range(k):
        col = jac[:, j]
        scale = 0.25 * (load.max() - load.min() or 1.0) / (np.abs(col).max() or 1.0)
        tips = load + scale * col
        panel = _Panel(MARGIN + 10, MARGIN + j * (ph + MARGIN), WIDTH - 2 * MARGIN - 10, ph,
                       (0, hours[-1]), _limits(load, tips))
        body += panel.frame(f"{title}: d load / d {names[j]}", "hour" if j == k - 1 else "", "p.u.")
        body.append(panel.polyline(hours, load, "#222"))
        for t in hours:
            if col[t] == 0:
                continue
            color = COLORS[2] if col[t] > 0 else COLORS[1]
            body.append(f'<line x1="{_fmt(panel.px(t))}" y1="{_fmt(panel.py(load[t]))}" '
                        f'x2="{_fmt(panel.px(t))}" y2="{_fmt(panel.py(tips[t]))}" stroke="{color}" '
                        'stroke-width="1.5" marker-end="url(#arrow)"/>')
    return _document(WIDTH, height, body)


def trajectory_svg(iters, objective, policy, eta_gen, eta_line, gen_names, branch_names) -> str:
    """Four panels: objective, free policy component, generator and branch additions."""
    iters = np.asarray(iters, float)
    w, h = 900, 620
    pw, ph = (w - 3 * MARGIN - 20) / 2, (h - 3 * MARGIN - 20) / 2
    specs = [
        ("(a) objective", "$", [np.asarray(objective, float)], ["J_hat"]),
        ("(b) policy", "level", [np.asarray(policy, float)], ["ev_flex"]),
        ("(c) generator additions", "MW", list(np.asarray(eta_gen, float).T), list(gen_names)),
        ("(d) branch additions", "MW", list(np.asarray(eta_line, float).T), list(branch_names)),
    ]
    body = []
    for idx, (title, ylabel, series, names) in enumerate(specs):
        r, c = divmod(idx, 2)
        panel = _Panel(MARGIN + 20 + c * (pw + MARGIN), MARGIN + r * (ph + MARGIN), pw, ph,
                       (iters.min(), iters.max()), _limits(*series))
        body += panel.frame(title, "iteration", ylabel)
        for i, (ys, name) in enumerate(zip(series, names)):
            color = COLORS[i % len(COLORS)]
            body.append(panel.polyline(iters, ys, color))
            if len(series) > 1:
                body.append(f'<text x="{_fmt(panel.x0 + panel.w - 4)}" y="{_fmt(panel.y0 + 12 + 11 * i)}" '
                            f'text-anchor="end" font-size="9" fill="{color}">{escape(name)}</text>')
    return _document(w, h, body)
