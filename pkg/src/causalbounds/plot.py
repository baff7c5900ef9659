"""Dependency-free SVG rendering of a bound curve."""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 640, 440
LEFT, RIGHT, TOP = 60, 20, 20
MAIN_BOTTOM = 330  # bottom edge of the bounds panel
STRIP_TOP, STRIP_BOTTOM = 350, 410
MARGIN = 0.05
COLORS = {"lower": "#1f77b4", "upper": "#d62728", "true": "#2ca02c", "naive": "#7f7f7f", "density": "#9467bd"}


def _series(curve, dense: int = 200) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    from .pipeline import eval_spline

    varied = curve.varied
    out = {}
    for name, values in (("lower", curve.lower), ("upper", curve.upper)):
        if name in curve.spline:
            knots = np.asarray(curve.spline[name]["knots"])
            xs = np.linspace(knots[0], knots[-1], dense)
            out[name] = (xs, eval_spline(knots, curve.spline[name]["coefficients"], xs))
        else:
            ok = [i for i, v in enumerate(values) if v is not None]
            if ok:
                out[name] = (varied[ok], np.array([values[i] for i in ok], dtype=float))
    if curve.true_effect is not None:
        out["true"] = (varied, np.asarray(curve.true_effect, dtype=float))
    out["naive"] = (varied, np.asarray(curve.naive, dtype=float))
    return out


def plot_ranges(curve) -> tuple[tuple[float, float], tuple[float, float]]:
    """Axis limits: data extent of all series padded by 5% on each side."""
    series = _series(curve)
    xs = np.concatenate([s[0] for s in series.values()])
    ys = np.concatenate([s[1] for s in series.values()])

    def pad(lo, hi):
        span = hi - lo if hi > lo else max(abs(lo), 1.0)
        return lo - MARGIN * span, hi + MARGIN * span

    return pad(float(xs.min()), float(xs.max())), pad(float(ys.min()), float(ys.max()))


def _ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    raw = (hi - lo) / count
    step = 10 ** np.floor(np.log10(raw))
    step *= min((m for m in (1, 2, 5, 10) if m * step >= raw), default=10)
    return np.arange(np.ceil(lo / step) * step, hi + 1e-12, step)


def emit_svg_plot(curve, path) -> None:
    if len(curve.x_grid) < 2:
        raise ValueError("emit_svg_plot: need at least two grid points")
    (x0, x1), (y0, y1) = plot_ranges(curve)

    def sx(v):
        return LEFT + (np.asarray(v) - x0) / (x1 - x0) * (WIDTH - LEFT - RIGHT)

    def sy(v):
        return MAIN_BOTTOM - (np.asarray(v) - y0) / (y1 - y0) * (MAIN_BOTTOM - TOP)

    def points(xs, ys):
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(sx(xs), sy(ys)))

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{WIDTH - LEFT - RIGHT}" height="{MAIN_BOTTOM - TOP}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        parts.append(f'<text x="{sx(t):.2f}" y="{STRIP_BOTTOM + 16}" font-size="11" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        parts.append(f'<line x1="{LEFT - 4}" y1="{sy(t):.2f}" x2="{LEFT}" y2="{sy(t):.2f}" stroke="black"/>')
        parts.append(f'<text x="{LEFT - 6}" y="{sy(t) + 4:.2f}" font-size="11" text-anchor="end">{t:g}</text>')

    styles = {
        "lower": f'stroke="{COLORS["lower"]}" stroke-width="2"',
        "upper": f'stroke="{COLORS["upper"]}" stroke-width="2"',
        "true": f'stroke="{COLORS["true"]}" stroke-width="2"',
        "naive": f'stroke="{COLORS["naive"]}" stroke-width="1.5" stroke-dasharray="6,4"',
    }
    for name, (xs, ys) in _series(curve).items():
        parts.append(f'<polyline id="{name}" fill="none" {styles[name]} points="{points(xs, ys)}"/>')

    if curve.density:
        dx = np.asarray(curve.density["x"])
        dd = np.asarray(curve.density["density"])
        top = dd.max() if dd.size and dd.max() > 0 else 1.0
        ys = STRIP_BOTTOM - dd / top * (STRIP_BOTTOM - STRIP_TOP)
        path_d = f"M {sx(dx[0]):.2f},{STRIP_BOTTOM} " + " ".join(
            f"L {a:.2f},{b:.2f}" for a, b in zip(sx(dx), ys)
        ) + f" L {sx(dx[-1]):.2f},{STRIP_BOTTOM} Z"
        parts.append(f'<path id="density" d="{path_d}" fill="{COLORS["density"]}" fill-opacity="0.4" stroke="none"/>')
    parts.append(
        f'<line x1="{LEFT}" y1="{STRIP_BOTTOM}" x2="{WIDTH - RIGHT}" y2="{STRIP_BOTTOM}" stroke="black"/>'
    )

    legend = [("lower", "lower bound"), ("upper", "upper bound"), ("naive", "naive regression")]
    if curve.true_effect is not None:
        legend.insert(2, ("true", "true effect"))
    for i, (key, label) in enumerate(legend):
        y = TOP + 14 + 16 * i
        parts.append(f'<line x1="{LEFT + 10}" y1="{y - 4}" x2="{LEFT + 34}" y2="{y - 4}" {styles[key]}/>')
        parts.append(f'<text x="{LEFT + 40}" y="{y}" font-size="11">{label}</text>')
    parts.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 4}" font-size="12" text-anchor="middle">'
                 f'x*[{curve.grid_index + 1}]</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
