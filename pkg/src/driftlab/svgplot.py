"""Static SVG charts for run traces: accuracy, smoothed flip score, weight norm.

Dependency-free emission; diffable output. One polyline per panel per
trace, vertical marker lines in the accuracy panel at triggered steps.
"""

from __future__ import annotations

import numpy as np

from .harness import windowed_mean
from .tracefile import atomic_write_text

WIDTH = 960
PANEL_HEIGHT = 180
MARGIN_LEFT = 70
MARGIN_RIGHT = 20
MARGIN_TOP = 30
PANEL_GAP = 40
MAX_POINTS = 2000

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _downsample(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(x) <= MAX_POINTS:
        return x, y
    stride = int(np.ceil(len(x) / MAX_POINTS))
    return x[::stride], y[::stride]


class _Panel:
    def __init__(self, title: str, top: float, x_max: float, y_min: float, y_max: float):
        self.title = title
        self.top = top
        self.x_max = max(x_max, 1.0)
        pad = (y_max - y_min) * 0.05 or 0.5
        self.y_min = y_min - pad
        self.y_max = y_max + pad
        self.plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT

    def sx(self, x: float) -> float:
        return MARGIN_LEFT + self.plot_w * (x / self.x_max)

    def sy(self, y: float) -> float:
        frac = (y - self.y_min) / (self.y_max - self.y_min)
        return self.top + PANEL_HEIGHT * (1.0 - frac)

    def frame(self) -> list[str]:
        return [
            f'<rect x="{MARGIN_LEFT}" y="{self.top}" width="{self.plot_w}" height="{PANEL_HEIGHT}" '
            'fill="none" stroke="#999" stroke-width="1"/>',
            f'<text x="{MARGIN_LEFT}" y="{self.top - 8:.1f}" font-size="13" fill="#333">{self.title}</text>',
            f'<text x="{MARGIN_LEFT - 6}" y="{self.top + 12:.1f}" font-size="10" fill="#555" '
            f'text-anchor="end">{self.y_max:.3g}</text>',
            f'<text x="{MARGIN_LEFT - 6}" y="{self.top + PANEL_HEIGHT:.1f}" font-size="10" fill="#555" '
            f'text-anchor="end">{self.y_min:.3g}</text>',
        ]

    def polyline(self, x: np.ndarray, y: np.ndarray, color: str) -> str:
        x, y = _downsample(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        pts = " ".join(f"{self.sx(a):.2f},{self.sy(b):.2f}" for a, b in zip(x, y))
        return f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>'

    def marker(self, x: float, color: str) -> str:
        return (
            f'<line class="trigger" x1="{self.sx(x):.2f}" y1="{self.top}" x2="{self.sx(x):.2f}" '
            f'y2="{self.top + PANEL_HEIGHT}" stroke="{color}" stroke-width="0.8" stroke-dasharray="4,3"/>'
        )


def render_traces(traces: list[tuple[str, dict]], window: int = 500) -> str:
    """traces: (label, columns dict) pairs as returned by `read_trace`."""
    series = []
    for label, cols in traces:
        acc_w = windowed_mean(cols["accuracy"], window)
        steps = cols["step"]
        acc_x = np.minimum(np.arange(1, len(acc_w) + 1) * window, steps[-1])
        series.append(
            {
                "label": label,
                "acc": (acc_x, acc_w),
                "flip": (steps, cols["lf_smoothed"]),
                "norm": (steps, cols["weight_norm"]),
                "trigger_steps": steps[cols["triggered"]],
            }
        )
    x_max = max(float(s["flip"][0][-1]) for s in series)

    def bounds(key: str) -> tuple[float, float]:
        lo = min(float(np.min(s[key][1])) for s in series)
        hi = max(float(np.max(s[key][1])) for s in series)
        return lo, hi

    panels = []
    top = MARGIN_TOP
    acc_lo, acc_hi = bounds("acc")
    panels.append(("acc", _Panel(f"accuracy ({window}-step window mean)", top, x_max, min(acc_lo, 0.0), max(acc_hi, 1.0))))
    top += PANEL_HEIGHT + PANEL_GAP
    flip_lo, flip_hi = bounds("flip")
    panels.append(("flip", _Panel("smoothed label-flip score", top, x_max, flip_lo, flip_hi)))
    top += PANEL_HEIGHT + PANEL_GAP
    norm_lo, norm_hi = bounds("norm")
    panels.append(("norm", _Panel("weight L2 norm", top, x_max, norm_lo, norm_hi)))
    height = top + PANEL_HEIGHT + 60

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}">',
        f'<rect width="{WIDTH}" height="{height}" fill="white"/>',
    ]
    for key, panel in panels:
        parts.extend(panel.frame())
        for i, s in enumerate(series):
            color = PALETTE[i % len(PALETTE)]
            if key == "acc":
                for ts in s["trigger_steps"]:
                    parts.append(panel.marker(float(ts), color))
            parts.append(panel.polyline(*s[key], color))
    legend_y = height - 30
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        x0 = MARGIN_LEFT + i * 220
        parts.append(f'<line x1="{x0}" y1="{legend_y}" x2="{x0 + 24}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x0 + 30}" y="{legend_y + 4}" font-size="11" fill="#333">{s["label"]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path: str, traces: list[tuple[str, dict]], window: int = 500) -> None:
    atomic_write_text(path, render_traces(traces, window))
