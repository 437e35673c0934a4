from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, TypeVar
from xml.sax.saxutils import escape

import numpy as np

from core.errors import InvalidArgumentError
from core.schemas.report import RunManifest
from core.services.dataset_service import format_real

logger = logging.getLogger("flowlab.export")

T = TypeVar("T")
R = TypeVar("R")

# columns per work item; fixed so that results do not depend on the worker count
CHUNK_SIZE = 1024

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Apply ``fn`` to every item; results come back in submission order."""
    if threads < 1:
        raise InvalidArgumentError("threads must be at least 1")
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def chunk_ranges(total: int, size: int = CHUNK_SIZE) -> list[tuple[int, int]]:
    return [(start, min(start + size, total)) for start in range(0, total, size)]


def map_columns(
    fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray, threads: int = 1, size: int = CHUNK_SIZE
) -> np.ndarray:
    """Evaluate a column-wise map over fixed-size column chunks of ``X`` and stitch the results."""
    chunks = chunk_ranges(X.shape[-1], size)
    results = parallel_map(lambda bounds: fn(X[..., bounds[0] : bounds[1]]), chunks, threads)
    return np.concatenate(results, axis=-1)


def _cell(value: object) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_real(float(value))
    if value is None:
        return ""
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(value) for value in row])
    return buffer.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path = Path(path)
    path.write_text(csv_text(header, rows), encoding="utf-8")
    return path


def write_json(path: str | Path, payload: object) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class Series:
    name: str
    x: np.ndarray
    y: np.ndarray
    kind: Literal["line", "scatter"] = "line"


@dataclass
class Figure:
    title: str
    xlabel: str = ""
    ylabel: str = ""
    series: list[Series] = field(default_factory=list)
    width: int = 640
    height: int = 420

    def line(self, name: str, x: Sequence[float], y: Sequence[float]) -> Figure:
        self.series.append(Series(name, np.asarray(x, dtype=float), np.asarray(y, dtype=float), "line"))
        return self

    def scatter(self, name: str, x: Sequence[float], y: Sequence[float]) -> Figure:
        self.series.append(Series(name, np.asarray(x, dtype=float), np.asarray(y, dtype=float), "scatter"))
        return self


def _extent(values: list[np.ndarray]) -> tuple[float, float]:
    finite = np.concatenate([v[np.isfinite(v)] for v in values]) if values else np.empty(0)
    if finite.size == 0:
        return 0.0, 1.0
    low, high = float(finite.min()), float(finite.max())
    if high == low:
        pad = 0.5 if low == 0.0 else 0.05 * abs(low)
        return low - pad, high + pad
    return low, high


def render_svg(figure: Figure) -> str:
    """Minimal SVG line/scatter chart: axes box, min/max tick labels, legend."""
    margin = 56
    w, h = figure.width, figure.height
    x_lo, x_hi = _extent([s.x for s in figure.series])
    y_lo, y_hi = _extent([s.y for s in figure.series])

    def px(x: np.ndarray) -> np.ndarray:
        return margin + (x - x_lo) / (x_hi - x_lo) * (w - 2 * margin)

    def py(y: np.ndarray) -> np.ndarray:
        return h - margin - (y - y_lo) / (y_hi - y_lo) * (h - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{w - 2 * margin}" height="{h - 2 * margin}" '
        'fill="none" stroke="black"/>',
        f'<text x="{w / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle" font-size="14">'
        f"{escape(figure.title)}</text>",
        f'<text x="{w / 2:.1f}" y="{h - 12}" text-anchor="middle" font-size="12">{escape(figure.xlabel)}</text>',
        f'<text x="14" y="{h / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {h / 2:.1f})">{escape(figure.ylabel)}</text>',
        f'<text x="{margin}" y="{h - margin + 16}" font-size="10">{x_lo:.3g}</text>',
        f'<text x="{w - margin}" y="{h - margin + 16}" text-anchor="end" font-size="10">{x_hi:.3g}</text>',
        f'<text x="{margin - 4}" y="{h - margin}" text-anchor="end" font-size="10">{y_lo:.3g}</text>',
        f'<text x="{margin - 4}" y="{margin + 10}" text-anchor="end" font-size="10">{y_hi:.3g}</text>',
    ]
    for i, series in enumerate(figure.series):
        color = _PALETTE[i % len(_PALETTE)]
        keep = np.isfinite(series.x) & np.isfinite(series.y)
        xs, ys = px(series.x[keep]), py(series.y[keep])
        if series.kind == "line" and xs.size:
            points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
            parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.2"/>')
        else:
            parts.extend(
                f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.6" fill="{color}" fill-opacity="0.6"/>'
                for a, b in zip(xs, ys)
            )
        parts.append(
            f'<text x="{w - margin - 4}" y="{margin + 14 * (i + 1)}" text-anchor="end" '
            f'font-size="10" fill="{color}">{escape(series.name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path: str | Path, figure: Figure) -> Path:
    path = Path(path)
    path.write_text(render_svg(figure), encoding="utf-8")
    return path


class OutputDirectory:
    """Run output folder that remembers every file written through it."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        relative = target.relative_to(self.root).as_posix()
        if relative not in self.outputs:
            self.outputs.append(relative)
        return target

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
        return write_csv(self.path(name), header, rows)

    def json(self, name: str, payload: object) -> Path:
        return write_json(self.path(name), payload)

    def text(self, name: str, content: str) -> Path:
        target = self.path(name)
        target.write_text(content, encoding="utf-8")
        return target

    def svg(self, name: str, figure: Figure) -> Path:
        return write_svg(self.path(name), figure)


def write_manifest(directory: OutputDirectory, manifest: RunManifest) -> Path:
    """Write ``manifest.json`` listing every output, the manifest included."""
    target = directory.path("manifest.json")
    manifest = manifest.model_copy(update={"outputs": list(directory.outputs)})
    target.write_text(manifest.model_dump_json(by_alias=True, indent=2) + "\n", encoding="utf-8")
    logger.info("Wrote %d outputs to %s", len(directory.outputs), directory.root)
    return target
