"""Checkpoints, metrics CSV and the SVG chart."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SSMCKPT1"
METRIC_COLUMNS = ("run_id", "seed", "adapter", "trainable_pct", "best_metric", "seconds")


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(params):
    """Binary image: magic, u64 header length, JSON header, little-endian float64 payload."""
    header, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        header.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def checkpoint_save(params, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def checkpoint_load(path, expected=None):
    """Read a checkpoint; with ``expected`` (name -> array or shape), names and shapes must match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    payload = blob[16 + n :]
    out = OrderedDict()
    offset = 0
    for entry in header:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        if entry["offset"] != offset or offset + size > len(payload):
            raise ValueError(f"{path}: offset of {entry['name']!r} inconsistent with shapes")
        out[entry["name"]] = np.frombuffer(payload[offset : offset + size], dtype="<f8").reshape(shape).astype(np.float64)
        offset += size
    if offset != len(payload):
        raise ValueError(f"{path}: trailing bytes after payload")
    if expected is not None:
        exp = OrderedDict((k, tuple(np.shape(v)) if not isinstance(v, tuple) else v) for k, v in expected.items())
        for (k1, s1), (k2, arr) in zip(exp.items(), out.items()):
            if k1 != k2:
                raise ValueError(f"checkpoint mismatch: expected parameter {k1!r}, found {k2!r}")
            if s1 != arr.shape:
                raise ValueError(f"checkpoint mismatch: {k1!r} has shape {arr.shape}, expected {s1}")
        if len(exp) != len(out):
            extra = list(exp)[len(out):] or list(out)[len(exp):]
            raise ValueError(f"checkpoint mismatch: parameter count differs (first unmatched {extra[0]!r})")
    return out


# ---------------------------------------------------------------- metrics


def fmt(x):
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.6g}"


def metrics_text(rows):
    if not rows:
        raise ValueError("metrics table is empty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(
            [r["run_id"], int(r["seed"]), r["adapter"], fmt(float(r["trainable_pct"])), fmt(float(r["best_metric"])), fmt(float(r["seconds"]))]
        )
    return buf.getvalue()


def emit_metrics(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_text(rows))


def read_metrics(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(METRIC_COLUMNS)}")
        rows = []
        for r in reader:
            rows.append(
                {
                    "run_id": r["run_id"],
                    "seed": int(r["seed"]),
                    "adapter": r["adapter"],
                    "trainable_pct": float(r["trainable_pct"]),
                    "best_metric": float(r["best_metric"]),
                    "seconds": float(r["seconds"]),
                }
            )
    return rows


# ---------------------------------------------------------------- SVG

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def plot_svg(rows, path=None, log_y=True, x_label="trainable parameters (%)", y_label="best MSE", title=None):
    """Scatter + line chart, one series per run id, sorted by x within a series."""
    if not rows:
        raise ValueError("plot needs at least one point")
    for i, r in enumerate(rows):
        if log_y and not r["best_metric"] > 0:
            raise ValueError(f"row {i} ({r['run_id']}, seed {r['seed']}): nonpositive value {r['best_metric']} on a log scale")
    W, Hgt, ml, mr, mt, mb = 640, 420, 70, 170, 30, 50
    xs = [float(r["trainable_pct"]) for r in rows]
    ys = [math.log10(r["best_metric"]) if log_y else float(r["best_metric"]) for r in rows]
    x0, x1 = min(0.0, min(xs)), max(100.0, max(xs))
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (W - ml - mr)

    def py(y):
        return Hgt - mb - (y - y0) / (y1 - y0) * (Hgt - mt - mb)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hgt}" viewBox="0 0 {W} {Hgt}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{ml}" y1="{Hgt - mb}" x2="{W - mr}" y2="{Hgt - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{Hgt - mb}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.2f}" y="{Hgt - mb + 16}" font-size="11" text-anchor="middle">{t:.0f}</text>')
    for t in _ticks(y0, y1):
        label = f"1e{t:.1f}" if log_y else f"{t:.3g}"
        out.append(f'<text x="{ml - 6}" y="{py(t) + 4:.2f}" font-size="11" text-anchor="end">{label}</text>')
    out.append(f'<text x="{(ml + W - mr) / 2:.1f}" y="{Hgt - 12}" font-size="13" text-anchor="middle">{x_label}</text>')
    ylab = y_label + (" (log scale)" if log_y else "")
    out.append(
        f'<text x="16" y="{(mt + Hgt - mb) / 2:.1f}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {(mt + Hgt - mb) / 2:.1f})">{ylab}</text>'
    )
    if title:
        out.append(f'<text x="{W / 2:.1f}" y="18" font-size="14" text-anchor="middle">{title}</text>')
    series = OrderedDict()
    for r, x, y in zip(rows, xs, ys):
        series.setdefault(r["run_id"], []).append((x, y))
    for k, (name, pts) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = sorted(pts)
        if len(pts) > 1:
            path_d = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            out.append(f'<polyline points="{path_d}" fill="none" stroke="{color}" stroke-width="1"/>')
        for x, y in pts:
            out.append(f'<circle class="marker" cx="{px(x):.2f}" cy="{py(y):.2f}" r="4" fill="{color}"/>')
        ly = mt + 10 + 18 * k
        out.append(f'<rect x="{W - mr + 12}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - mr + 28}" y="{ly + 1}" font-size="12">{name}</text>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
