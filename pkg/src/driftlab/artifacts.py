"""On-disk formats: CSV tables, the binary model file, SVG histograms, JSON configs."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .mlp import Mlp

MODEL_MAGIC = b"DRIFTLAB"
MODEL_VERSION = 1


def fmt(value) -> str:
    """Round-trip-exact float text (17 significant digits)."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list, list]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_trajectory_csv(path, traj) -> Path:
    """Columns ``lane, step, t, dim0..dimK``; one row per lane per recorded step."""
    states = np.asarray(traj.states)
    n_steps, batch, dim = states.shape
    header = ["lane", "step", "t"] + [f"dim{j}" for j in range(dim)]

    def rows():
        for lane in range(batch):
            for step in range(n_steps):
                yield [lane, step, float(traj.times[step]), *map(float, states[step, lane])]

    return write_csv(path, header, rows())


def write_samples_csv(path, samples, t: float) -> Path:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    header = ["t"] + [f"dim{j}" for j in range(samples.shape[1])]
    return write_csv(path, header, ([t, *map(float, row)] for row in samples))


def write_report_csv(path, rows) -> Path:
    """Rows of ``(check, statistic, threshold, pass)``."""
    return write_csv(path, ["check", "statistic", "threshold", "pass"], rows)


def save_model(path, mlp: Mlp, meta: dict | None = None) -> Path:
    """Binary model file, little-endian throughout.

    Layout: 8-byte magic, u32 version, u32 metadata length, UTF-8 JSON metadata,
    u32 layer count, u32 widths, f64 parameters.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(blob)), blob,
             struct.pack("<I", len(mlp.widths)),
             struct.pack(f"<{len(mlp.widths)}I", *mlp.widths),
             np.asarray(mlp.params, dtype="<f8").tobytes()]
    path.write_bytes(b"".join(parts))
    return path


def load_model(path) -> tuple[Mlp, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ConfigError(f"{path}: not a driftlab model file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise ConfigError(f"{path}: unsupported model version {version}")
    pos = 16
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_layers,) = struct.unpack_from("<I", data, pos)
    pos += 4
    widths = struct.unpack_from(f"<{n_layers}I", data, pos)
    pos += 4 * n_layers
    params = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    return Mlp(widths, params), meta


def load_config(path) -> dict:
    """Parse a JSON config; errors carry the file location."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def histogram_counts(samples, bins: int):
    samples = np.ravel(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise DataError("histogram needs at least one sample")
    if bins < 2:
        raise DataError("histogram needs at least two bins")
    lo, hi = float(samples.min()), float(samples.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return np.histogram(samples, bins=bins, range=(lo, hi))


def histogram_svg(samples, bins: int = 50, title: str = "", xlabel: str = "x",
                  ylabel: str = "count") -> tuple[str, np.ndarray, np.ndarray]:
    """Standalone SVG bar chart; returns ``(svg_text, counts, edges)``."""
    counts, edges = histogram_counts(samples, bins)
    width, height, margin = 640, 400, 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    top = max(int(counts.max()), 1)
    bar_w = plot_w / bins
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for i, c in enumerate(counts):
        h = plot_h * c / top
        out.append(f'<rect x="{margin + i * bar_w:.3f}" y="{margin + plot_h - h:.3f}" '
                   f'width="{bar_w:.3f}" height="{h:.3f}" fill="#4a78a8"/>')
    base = margin + plot_h
    out += [
        f'<line x1="{margin}" y1="{base}" x2="{margin + plot_w}" y2="{base}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{base}" stroke="black"/>',
        f'<text x="{margin}" y="{base + 18}" font-size="12">{edges[0]:.4g}</text>',
        f'<text x="{margin + plot_w}" y="{base + 18}" font-size="12" '
        f'text-anchor="end">{edges[-1]:.4g}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" font-size="12" text-anchor="end">{top}</text>',
        f'<text x="{margin + plot_w / 2}" y="{height - 10}" font-size="14" '
        f'text-anchor="middle">{_escape(xlabel)}</text>',
        f'<text x="15" y="{margin + plot_h / 2}" font-size="14" text-anchor="middle" '
        f'transform="rotate(-90 15 {margin + plot_h / 2})">{_escape(ylabel)}</text>',
    ]
    if title:
        out.append(f'<text x="{width / 2}" y="25" font-size="16" '
                   f'text-anchor="middle">{_escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n", counts, edges


def plot_histogram(samples, bins: int, out_path, **labels) -> np.ndarray:
    """Write an SVG histogram and return the bin counts."""
    svg, counts, _ = histogram_svg(samples, bins, **labels)
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
    return counts


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
