"""Minimal SVG line charts, written by hand so plots carry no deps.

Output is deterministic for fixed input: coordinates are formatted with
a fixed precision and nothing time- or locale-dependent is embedded.
"""

from xml.sax.saxutils import escape

from .errors import ContractError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v):
    return f"{v:.6g}"


def _ticks(lo, hi, n=5):
    """n+1 evenly spaced tick values covering [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / n
    return [lo + i * step for i in range(n + 1)]


def line_chart(series, title="", xlabel="epoch", ylabel="loss",
               width=640, height=400):
    """Render series = [(name, xs, ys), ...] as an SVG document string."""
    if not series:
        raise ContractError("line_chart needs at least one series")
    for name, xs, ys in series:
        if len(xs) != len(ys):
            raise ContractError(f"series {name!r} has {len(xs)} x values, {len(ys)} y values")
        if not xs:
            raise ContractError(f"series {name!r} is empty")

    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    ml, mr, mt, mb = 62, 18, 34, 46
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.6g}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{escape(title)}</text>')

    # grid and ticks
    for tv in _ticks(y_lo, y_hi):
        y = sy(tv)
        parts.append(f'<line x1="{ml}" y1="{_fmt(y)}" x2="{ml + pw}" y2="{_fmt(y)}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{ml - 6}" y="{_fmt(y + 4)}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{_fmt(tv)}</text>')
    for tv in _ticks(x_lo, x_hi):
        x = sx(tv)
        parts.append(f'<line x1="{_fmt(x)}" y1="{mt + ph}" x2="{_fmt(x)}" '
                     f'y2="{mt + ph + 4}" stroke="#333333" stroke-width="1"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{mt + ph + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{_fmt(tv)}</text>')

    # axes
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" '
                 f'stroke="#333333" stroke-width="1"/>')
    parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" '
                 f'stroke="#333333" stroke-width="1"/>')
    parts.append(f'<text x="{ml + pw / 2:.6g}" y="{height - 8}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{mt + ph / 2:.6g}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {mt + ph / 2:.6g})">{escape(ylabel)}</text>')

    # data
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')

    # legend, top-right inside the plot area
    for i, (name, _, _) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        y = mt + 14 + 16 * i
        x = ml + pw - 130
        parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 22}" y2="{y}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x + 28}" y="{y + 4}" font-family="sans-serif" '
                     f'font-size="11">{escape(str(name))}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def history_chart(rows, title="training history"):
    """Train/validation loss curves from parsed history rows."""
    if not rows:
        raise ContractError("history is empty; nothing to plot")
    epochs = [r["epoch"] for r in rows]
    return line_chart(
        [("train loss", epochs, [r["train_loss"] for r in rows]),
         ("validation loss", epochs, [r["val_loss"] for r in rows])],
        title=title)
