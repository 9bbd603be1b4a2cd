"""Tiny deterministic SVG emitters for batch plots.

Hand-rolled on purpose: no rendering dependency, and byte-identical output
for identical inputs. Every plot is generated from data the CLI also
writes as CSV/JSON, so users can re-plot elsewhere.
"""

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _fmt(x):
    return f"{float(x):.3f}".rstrip("0").rstrip(".")


def _header(w, h, title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]


def _axis_ticks(lo, hi, n=5):
    span = hi - lo
    if span <= 0:
        span = 1.0
    return [lo + span * i / (n - 1) for i in range(n)]


class _Frame:
    """Maps data coordinates into a margin-padded pixel frame."""

    def __init__(self, w, h, x_lo, x_hi, y_lo, y_hi,
                 left=55, right=15, top=30, bottom=40):
        self.w, self.h = w, h
        self.left, self.right, self.top, self.bottom = left, right, top, bottom
        self.x_lo, self.x_hi = x_lo, x_hi
        self.y_lo, self.y_hi = y_lo, y_hi
        if self.x_hi - self.x_lo <= 0:
            self.x_hi = self.x_lo + 1.0
        if self.y_hi - self.y_lo <= 0:
            self.y_hi = self.y_lo + 1.0

    def px(self, x):
        f = (x - self.x_lo) / (self.x_hi - self.x_lo)
        return self.left + f * (self.w - self.left - self.right)

    def py(self, y):
        f = (y - self.y_lo) / (self.y_hi - self.y_lo)
        return self.h - self.bottom - f * (self.h - self.top - self.bottom)

    def axes(self, x_label, y_label):
        parts = [
            f'<rect x="{self.left}" y="{self.top}" '
            f'width="{self.w - self.left - self.right}" '
            f'height="{self.h - self.top - self.bottom}" '
            f'fill="none" stroke="#333"/>'
        ]
        for x in _axis_ticks(self.x_lo, self.x_hi):
            parts.append(
                f'<text x="{_fmt(self.px(x))}" y="{self.h - self.bottom + 16}" '
                f'text-anchor="middle" font-family="sans-serif" '
                f'font-size="10">{_fmt(x)}</text>')
        for y in _axis_ticks(self.y_lo, self.y_hi):
            parts.append(
                f'<text x="{self.left - 6}" y="{_fmt(self.py(y) + 3)}" '
                f'text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{_fmt(y)}</text>')
        parts.append(
            f'<text x="{(self.left + self.w - self.right) / 2}" '
            f'y="{self.h - 8}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{x_label}</text>')
        parts.append(
            f'<text x="14" y="{(self.top + self.h - self.bottom) / 2}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="11" '
            f'transform="rotate(-90 14 '
            f'{(self.top + self.h - self.bottom) / 2})">{y_label}</text>')
        return parts


def scatter_svg(points, labels, title="", x_label="pc1", y_label="pc2",
                w=520, h=420):
    """Colored scatter: points (N, 2), labels are small ints (cluster ids)."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    fr = _Frame(w, h, min(xs), max(xs), min(ys), max(ys))
    parts = _header(w, h, title)
    parts += fr.axes(x_label, y_label)
    for (x, y), lab in zip(points, labels):
        color = PALETTE[int(lab) % len(PALETTE)]
        parts.append(
            f'<circle cx="{_fmt(fr.px(x))}" cy="{_fmt(fr.py(y))}" r="4" '
            f'fill="{color}" fill-opacity="0.8"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_svg(series, title="", x_label="", y_label="", w=520, h=420):
    """series: list of (name, xs, ys) tuples drawn as polylines."""
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    fr = _Frame(w, h, min(all_x), max(all_x), min(all_y), max(all_y))
    parts = _header(w, h, title)
    parts += fr.axes(x_label, y_label)
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(fr.px(x))},{_fmt(fr.py(y))}"
                       for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{fr.w - fr.right - 6}" y="{fr.top + 14 + 13 * i}" '
            f'text-anchor="end" font-family="sans-serif" font-size="11" '
            f'fill="{color}">{name}</text>')
        for x, y in zip(xs, ys):
            parts.append(
                f'<circle cx="{_fmt(fr.px(x))}" cy="{_fmt(fr.py(y))}" r="3" '
                f'fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap_svg(grid, title="", w=460, h=420):
    """grid: 2-D nested list/array of non-negative weights (row = x bin)."""
    nb = len(grid)
    vmax = max(max(row) for row in grid) or 1.0
    left, top, size = 30, 30, min(w - 60, h - 60)
    cell = size / nb
    parts = _header(w, h, title)
    for i, row in enumerate(grid):
        for j, val in enumerate(row):
            f = min(1.0, float(val) / vmax)
            # white -> dark blue ramp
            r = int(255 - 205 * f)
            g = int(255 - 155 * f)
            b = 255 - int(75 * f)
            x = left + i * cell
            y = top + (nb - 1 - j) * cell
            parts.append(
                f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(cell + 0.5)}" '
                f'height="{_fmt(cell + 0.5)}" fill="rgb({r},{g},{b})"/>')
    parts.append(
        f'<rect x="{left}" y="{top}" width="{_fmt(size)}" '
        f'height="{_fmt(size)}" fill="none" stroke="#333"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
