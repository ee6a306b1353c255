"""Minimal SVG emission: bar charts and polyline charts.

String-built and fully deterministic (fixed float formatting, no ids or
timestamps), so rerunning a report produces byte-identical files.
"""

from __future__ import annotations

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 90


def _fmt(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".")


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]


def bar_chart(labels: list[str], values: list[float], title: str) -> str:
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B
    top = max(max(values), 1) if values else 1
    n = max(len(values), 1)
    bar_w = plot_w / n
    parts = _header(title)
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
        f'y2="{MARGIN_T + plot_h}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T + plot_h}" x2="{MARGIN_L + plot_w}" '
        f'y2="{MARGIN_T + plot_h}" stroke="black"/>'
    )
    parts.append(f'<text x="{MARGIN_L - 8}" y="{MARGIN_T + 4}" text-anchor="end">{top}</text>')
    parts.append(f'<text x="{MARGIN_L - 8}" y="{MARGIN_T + plot_h + 4}" text-anchor="end">0</text>')
    for i, (label, value) in enumerate(zip(labels, values)):
        h = plot_h * (value / top)
        x = MARGIN_L + i * bar_w + bar_w * 0.125
        y = MARGIN_T + plot_h - h
        parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w * 0.75)}" '
            f'height="{_fmt(h)}" fill="steelblue"/>'
        )
        parts.append(
            f'<text x="{_fmt(x + bar_w * 0.375)}" y="{_fmt(y - 4)}" text-anchor="middle">{value}</text>'
        )
        tx = MARGIN_L + i * bar_w + bar_w / 2
        ty = MARGIN_T + plot_h + 10
        parts.append(
            f'<text x="{_fmt(tx)}" y="{_fmt(ty)}" text-anchor="end" '
            f'transform="rotate(-45 {_fmt(tx)} {_fmt(ty)})">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart(
    points: list[tuple[float, float]],
    x_label: str,
    y_label: str,
    title: str,
) -> str:
    """Polyline over unit-range axes with point markers."""
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + plot_w * x

    def py(y):
        return MARGIN_T + plot_h * (1.0 - y)

    parts = _header(title)
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
        f'y2="{MARGIN_T + plot_h}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T + plot_h}" x2="{MARGIN_L + plot_w}" '
        f'y2="{MARGIN_T + plot_h}" stroke="black"/>'
    )
    for v in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{_fmt(px(v))}" y="{MARGIN_T + plot_h + 16}" text-anchor="middle">{_fmt(v)}</text>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{_fmt(py(v) + 4)}" text-anchor="end">{_fmt(v)}</text>'
        )
    parts.append(
        f'<text x="{MARGIN_L + plot_w // 2}" y="{HEIGHT - 40}" text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="18" y="{MARGIN_T + plot_h // 2}" text-anchor="middle" '
        f'transform="rotate(-90 18 {MARGIN_T + plot_h // 2})">{y_label}</text>'
    )
    if points:
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in points)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="crimson"/>')
        for x, y in points:
            parts.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="2.5" fill="crimson"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
