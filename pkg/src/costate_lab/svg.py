"""Minimal native SVG plots on a fixed 800x600 canvas.

A figure is a list of panels; each panel holds scatter series, polylines and
optional text lines.  Output is a pure function of the inputs: numbers are
formatted with fixed precision so identical data gives identical bytes.
"""

import math
from dataclasses import dataclass, field

W, H = 800, 600
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _f(x):
    return f"{x:.2f}"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _tick(v):
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e4 or a < 1e-3:
        return f"{v:.1e}"
    return f"{v:.3g}"


@dataclass
class Panel:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    scatter: list = field(default_factory=list)  # (label, xs, ys)
    lines: list = field(default_factory=list)  # (label, xs, ys)
    text: list = field(default_factory=list)  # free text lines

    def add_scatter(self, label, xs, ys):
        self.scatter.append((label, [float(v) for v in xs], [float(v) for v in ys]))
        return self

    def add_line(self, label, xs, ys):
        self.lines.append((label, [float(v) for v in xs], [float(v) for v in ys]))
        return self


def _range(vals):
    vals = [v for v in vals if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _panel(p, x0, y0, w, h):
    out = []
    series = p.scatter + p.lines
    if p.text and not series:
        out.append(f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" fill="none" stroke="#999"/>')
        out.append(f'<text x="{_f(x0 + 8)}" y="{_f(y0 + 18)}" font-size="13" font-weight="bold">{_esc(p.title)}</text>')
        for i, line in enumerate(p.text):
            out.append(f'<text x="{_f(x0 + 8)}" y="{_f(y0 + 38 + 16 * i)}" font-size="12" font-family="monospace">{_esc(line)}</text>')
        return out
    xs = [v for _, a, _ in series for v in a]
    ys = [v for _, _, b in series for v in b]
    xlo, xhi = _range(xs)
    ylo, yhi = _range(ys)
    ml, mr, mt, mb = 58, 10, 24, 36
    pw, ph = w - ml - mr, h - mt - mb
    px0, py0 = x0 + ml, y0 + mt

    def X(v):
        return px0 + (v - xlo) / (xhi - xlo) * pw

    def Y(v):
        return py0 + ph - (v - ylo) / (yhi - ylo) * ph

    out.append(f'<rect x="{_f(px0)}" y="{_f(py0)}" width="{_f(pw)}" height="{_f(ph)}" fill="none" stroke="#333"/>')
    out.append(f'<text x="{_f(x0 + w / 2)}" y="{_f(y0 + 16)}" font-size="13" text-anchor="middle">{_esc(p.title)}</text>')
    for i in range(5):
        fx = xlo + (xhi - xlo) * i / 4
        fy = ylo + (yhi - ylo) * i / 4
        out.append(f'<text x="{_f(X(fx))}" y="{_f(py0 + ph + 14)}" font-size="10" text-anchor="middle">{_tick(fx)}</text>')
        out.append(f'<text x="{_f(px0 - 4)}" y="{_f(Y(fy) + 3)}" font-size="10" text-anchor="end">{_tick(fy)}</text>')
    out.append(f'<text x="{_f(px0 + pw / 2)}" y="{_f(py0 + ph + 30)}" font-size="11" text-anchor="middle">{_esc(p.xlabel)}</text>')
    out.append(f'<text x="{_f(x0 + 12)}" y="{_f(py0 + ph / 2)}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 {_f(x0 + 12)} {_f(py0 + ph / 2)})">{_esc(p.ylabel)}</text>')
    k = 0
    for label, a, b in p.lines:
        col = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_f(X(u))},{_f(Y(v))}" for u, v in zip(a, b) if math.isfinite(u) and math.isfinite(v))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        k += 1
    for label, a, b in p.scatter:
        col = PALETTE[k % len(PALETTE)]
        for u, v in zip(a, b):
            if math.isfinite(u) and math.isfinite(v):
                out.append(f'<circle cx="{_f(X(u))}" cy="{_f(Y(v))}" r="3" fill="{col}"/>')
        k += 1
    names = [s[0] for s in p.lines] + [s[0] for s in p.scatter]
    for i, name in enumerate(names):
        if name:
            col = PALETTE[i % len(PALETTE)]
            ly = py0 + 12 + 13 * i
            out.append(f'<rect x="{_f(px0 + 6)}" y="{_f(ly - 8)}" width="8" height="8" fill="{col}"/>')
            out.append(f'<text x="{_f(px0 + 18)}" y="{_f(ly)}" font-size="10">{_esc(name)}</text>')
    for i, line in enumerate(p.text):
        out.append(f'<text x="{_f(px0 + pw - 4)}" y="{_f(py0 + 12 + 13 * i)}" font-size="10" text-anchor="end">{_esc(line)}</text>')
    return out


def render(panels, title=""):
    """SVG document with panels laid out on a grid (1, 2 or up to 4 panels)."""
    n = len(panels)
    cols = 1 if n == 1 else 2
    rows = max(1, math.ceil(n / cols))
    top = 28 if title else 0
    cw, ch = W / cols, (H - top) / rows
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>']
    if title:
        body.append(f'<text x="{W / 2:.2f}" y="20" font-size="15" text-anchor="middle">{_esc(title)}</text>')
    for i, p in enumerate(panels):
        r, c = divmod(i, cols)
        body += _panel(p, c * cw + 4, top + r * ch + 4, cw - 8, ch - 8)
    body.append("</svg>")
    return "\n".join(body) + "\n"


def write(path, panels, title=""):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(render(panels, title))
