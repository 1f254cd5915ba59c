"""Minimal deterministic SVG line charts for training history and ROC curves."""

from __future__ import annotations

from pathlib import Path

WIDTH, HEIGHT = 640, 420
MARGIN = 50
PLOT_W, PLOT_H = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN


def _scale(values, lo, hi, length):
    span = hi - lo if hi > lo else 1.0
    return [(v - lo) / span * length for v in values]


def _polyline(xs, ys, color):
    points = " ".join(f"{MARGIN + x:.2f},{HEIGHT - MARGIN - y:.2f}"
                      for x, y in zip(xs, ys))
    return (f'<polyline fill="none" stroke="{color}" stroke-width="2" '
            f'points="{points}" />')


def _frame(title, x_label, y_label, body):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white" />',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black" />',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black" />',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{x_label}</text>',
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {HEIGHT / 2})">{y_label}</text>',
    ]
    parts.extend(body)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _legend(entries):
    out = []
    for i, (label, color) in enumerate(entries):
        y = MARGIN + 16 + 18 * i
        out.append(f'<rect x="{WIDTH - MARGIN - 110}" y="{y - 9}" width="12" '
                   f'height="12" fill="{color}" />')
        out.append(f'<text x="{WIDTH - MARGIN - 92}" y="{y + 2}" '
                   f'font-family="sans-serif" font-size="12">{label}</text>')
    return out


def render_history_chart(epochs, train_series, val_series, title, y_label) -> str:
    """Two polylines (train vs validation) over epochs."""
    lo = min(min(train_series), min(val_series), 0.0)
    hi = max(max(train_series), max(val_series))
    xs = _scale(epochs, min(epochs), max(epochs), PLOT_W)
    body = [
        _polyline(xs, _scale(train_series, lo, hi, PLOT_H), "#1f77b4"),
        _polyline(xs, _scale(val_series, lo, hi, PLOT_H), "#d62728"),
    ]
    body.extend(_legend([("train", "#1f77b4"), ("validation", "#d62728")]))
    return _frame(title, "epoch", y_label, body)


def render_roc_chart(fprs, tprs, auc_value=None) -> str:
    """The ROC polyline plus the chance diagonal."""
    xs = _scale(fprs, 0.0, 1.0, PLOT_W)
    ys = _scale(tprs, 0.0, 1.0, PLOT_H)
    title = "ROC curve" if auc_value is None else f"ROC curve (AUC {auc_value:.4f})"
    body = [
        _polyline([0, PLOT_W], [0, PLOT_H], "#bbbbbb"),
        _polyline(xs, ys, "#1f77b4"),
    ]
    return _frame(title, "false positive rate", "true positive rate", body)


def parse_history_csv(path) -> dict:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    expected = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    if header != expected:
        raise ValueError(f"history csv header {header} != {expected}")
    cols = {name: [] for name in expected}
    for line in lines[1:]:
        values = line.split(",")
        cols["epoch"].append(int(values[0]))
        for name, v in zip(expected[1:], values[1:]):
            cols[name].append(float(v))
    if not cols["epoch"]:
        raise ValueError("history csv has no rows")
    return cols


def parse_roc_csv(path) -> tuple:
    lines = Path(path).read_text().strip().split("\n")
    if lines[0] != "fpr,tpr,threshold":
        raise ValueError(f"roc csv header {lines[0]!r} != 'fpr,tpr,threshold'")
    fprs, tprs = [], []
    for line in lines[1:]:
        f, t, _ = line.split(",")
        fprs.append(float(f))
        tprs.append(float(t))
    if not fprs:
        raise ValueError("roc csv has no rows")
    return fprs, tprs
