"""Geometric overlay masks: rasterization and alpha compositing.

A mask is a grid of concentric outline shapes (circle / diamond / square,
plus the overlapping "knit" variant) whose cell count and nesting depth are
driven by a single density scalar in [0, 100].  Geometry is separated from
blending: rasterize() yields a boolean coverage layer that depends only on
(shape, density, seed, size); opacity and color enter at apply_mask() time.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import corpus
from .errors import FormatError, RangeError

CLEAN_CONDITION = "clean"

# Density mapping: one more grid cell per 10 density points, one more
# nesting ring per 34 points (so density 70 -> 7x7 cells, 3 rings).
GRID_STEP = 10
RING_STEP = 34
RING_INNER = 0.30   # innermost ring, fraction of the half-cell extent
RING_OUTER = 0.95   # outermost ring
KNIT_EXTENT = 1.2   # knit rings overflow their cell so neighbors overlap
JITTER_FRAC = 0.05  # optional per-cell center jitter, fraction of cell size


class MaskShape(str, Enum):
    CIRCLE = "circle"
    DIAMOND = "diamond"
    SQUARE = "square"
    KNIT = "knit"


@dataclass(frozen=True)
class MaskSpec:
    """Fully determines one mask layer and how it blends onto an image.

    density and seed drive geometry; opacity_alpha and color only blending.
    jitter is off by default: the stock patterns are regular grids, and the
    seed only matters when jitter is enabled.
    """

    shape: MaskShape
    density: int
    opacity_alpha: int
    color: tuple[int, int, int] = (0, 0, 0)
    seed: int = 0
    jitter: bool = False

    def __post_init__(self):
        if not 0 <= self.density <= 100:
            raise RangeError(f"density must be in [0, 100], got {self.density}")
        if not 0 <= self.opacity_alpha <= 255:
            raise RangeError(f"opacity_alpha must be in [0, 255], got {self.opacity_alpha}")
        if len(self.color) != 3 or any(not 0 <= c <= 255 for c in self.color):
            raise RangeError(f"color must be an RGB triple in [0, 255], got {self.color}")
        if self.seed < 0:
            raise RangeError("seed must be non-negative")


@dataclass
class MaskLayer:
    width: int
    height: int
    coverage: np.ndarray  # bool, shape (height, width)


def condition_id(spec: MaskSpec) -> str:
    """Canonical id joining masked images to prediction records."""
    return f"{spec.shape.value}-d{spec.density}-a{spec.opacity_alpha}-s{spec.seed}"


_CONDITION_RE = re.compile(r"^(circle|diamond|square|knit)-d(\d+)-a(\d+)-s(\d+)$")


def parse_condition_id(condition: str) -> MaskSpec:
    """Inverse of condition_id for the geometry/blend fields it encodes."""
    m = _CONDITION_RE.match(condition)
    if m is None:
        raise FormatError(f"not a mask condition id: {condition!r}")
    return MaskSpec(
        shape=MaskShape(m.group(1)),
        density=int(m.group(2)),
        opacity_alpha=int(m.group(3)),
        seed=int(m.group(4)),
    )


def stroke_width(w: int, h: int) -> int:
    """Outline thickness, scaled so 128px images get a 1px stroke."""
    return max(1, int(min(w, h) / 128 + 0.5))


def _ring_fractions(density: int) -> np.ndarray:
    rings = 1 + density // RING_STEP
    if rings == 1:
        return np.array([RING_OUTER])
    return np.linspace(RING_OUTER, RING_INNER, rings)


def _cell_centers(shape: MaskShape, n: int, cell_w: float, cell_h: float):
    """Yield (cx, cy) shape centers row by row.

    Knit shifts odd rows half a cell right and adds one extra shape per
    shifted row so both edges stay covered.
    """
    for i in range(n):
        cy = (i + 0.5) * cell_h
        if shape is MaskShape.KNIT and i % 2 == 1:
            for j in range(-1, n):
                yield (j + 1.0) * cell_w, cy
        else:
            for j in range(n):
                yield (j + 0.5) * cell_w, cy


def rasterize(spec: MaskSpec, w: int, h: int) -> MaskLayer:
    """Rasterize the mask geometry as a boolean coverage layer.

    Deterministic per (shape, density, seed, w, h); opacity and color are
    ignored here.  No anti-aliasing: a pixel is covered iff its center lies
    within half a stroke width of a ring outline.
    """
    if w < 1 or h < 1:
        raise RangeError(f"layer size must be >= 1x1, got {w}x{h}")
    coverage = np.zeros((h, w), dtype=bool)
    n = math.ceil(spec.density / GRID_STEP)
    if n == 0:
        return MaskLayer(w, h, coverage)

    cell_w = w / n
    cell_h = h / n
    half = min(cell_w, cell_h) / 2.0
    extent = KNIT_EXTENT if spec.shape is MaskShape.KNIT else 1.0
    radii = _ring_fractions(spec.density) * half * extent
    half_stroke = stroke_width(w, h) / 2.0

    rng = np.random.Generator(np.random.Philox(spec.seed)) if spec.jitter else None

    for cx, cy in _cell_centers(spec.shape, n, cell_w, cell_h):
        if rng is not None:
            dx, dy = rng.uniform(-1.0, 1.0, size=2)
            cx += dx * JITTER_FRAC * cell_w
            cy += dy * JITTER_FRAC * cell_h
        reach = radii[0] + half_stroke + 1.0
        x_lo = max(0, int(math.floor(cx - reach)))
        x_hi = min(w, int(math.ceil(cx + reach)))
        y_lo = max(0, int(math.floor(cy - reach)))
        y_hi = min(h, int(math.ceil(cy + reach)))
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        px = (np.arange(x_lo, x_hi) + 0.5) - cx
        py = (np.arange(y_lo, y_hi) + 0.5) - cy
        ax = np.abs(px)[None, :]
        ay = np.abs(py)[:, None]
        if spec.shape is MaskShape.CIRCLE:
            dist = np.hypot(ax, ay)
        elif spec.shape is MaskShape.SQUARE:
            dist = np.maximum(ax, ay)
        else:  # diamond and knit are L1 balls
            dist = ax + ay
        hit = np.zeros(dist.shape, dtype=bool)
        for rho in radii:
            # half-open band: a width-s window catches the same number of
            # pixel-lattice planes whether or not the radius aligns with
            # the grid, keeping coverage monotone in density
            hit |= (dist >= rho - half_stroke) & (dist < rho + half_stroke)
        coverage[y_lo:y_hi, x_lo:x_hi] |= hit
    return MaskLayer(w, h, coverage)


def coverage_fraction(layer: MaskLayer) -> float:
    return float(layer.coverage.mean())


def composite(image: np.ndarray, layer: MaskLayer, spec: MaskSpec) -> np.ndarray:
    """Blend the overlay onto covered pixels of a copy of the image.

    Covered pixels become round(((255-a)*src + a*color) / 255) per channel;
    ties cannot occur with a 255 denominator, so the integer rounding is
    exact for every rounding convention.
    """
    img = corpus.as_rgb_array(image)
    if (layer.height, layer.width) != img.shape[:2]:
        raise RangeError(
            f"layer {layer.width}x{layer.height} does not match image "
            f"{img.shape[1]}x{img.shape[0]}")
    out = img.copy()
    if not layer.coverage.any():
        return out
    a = spec.opacity_alpha
    src = img[layer.coverage].astype(np.uint32)
    color = np.asarray(spec.color, dtype=np.uint32)
    out[layer.coverage] = ((src * (255 - a) + color * a + 127) // 255).astype(np.uint8)
    return out


def apply_mask(image: np.ndarray, spec: MaskSpec) -> np.ndarray:
    """Rasterize the mask at the image's size and composite it on."""
    img = corpus.as_rgb_array(image)
    layer = rasterize(spec, w=img.shape[1], h=img.shape[0])
    return composite(img, layer, spec)


# ---------------------------------------------------------------------------
# batch application: masked-image output tree


@dataclass(frozen=True)
class IndexRow:
    image_id: str
    condition: str
    path: str  # relative to the index file location


def _process_entry(manifest, entry, specs, out_dir, resize):
    img = corpus.load_image(manifest.resolve_path(entry))
    if resize is not None:
        img = corpus.resize_to(img, resize[0], resize[1])
    rows = []
    stats = []
    clean_rel = Path(CLEAN_CONDITION) / f"{entry.image_id}.png"
    corpus.save_image(img, out_dir / clean_rel)
    rows.append(IndexRow(entry.image_id, CLEAN_CONDITION, str(clean_rel)))
    for spec in specs:
        cond = condition_id(spec)
        layer = rasterize(spec, img.shape[1], img.shape[0])
        masked = composite(img, layer, spec)
        rel = Path(cond) / f"{entry.image_id}.png"
        corpus.save_image(masked, out_dir / rel)
        rows.append(IndexRow(entry.image_id, cond, str(rel)))
        stats.append((cond, coverage_fraction(layer)))
    return rows, stats


def apply_to_manifest(
    manifest: corpus.CorpusManifest,
    specs: list[MaskSpec],
    out_dir: str | Path,
    resize: tuple[int, int] | None = None,
    jobs: int = 1,
) -> tuple[list[IndexRow], dict[str, float]]:
    """Write <out>/<condition>/<image_id>.png for every spec plus the clean
    (optionally resized) copies, and an index.jsonl tying them together.

    Returns the index rows and the mean coverage fraction per condition.
    Output is keyed and ordered by image_id, so results do not depend on
    worker scheduling.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = sorted(manifest.entries, key=lambda e: e.image_id)
    work = lambda e: _process_entry(manifest, e, specs, out_dir, resize)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]

    rows: list[IndexRow] = []
    cov_sums: dict[str, list[float]] = {}
    for entry_rows, stats in results:
        rows.extend(entry_rows)
        for cond, frac in stats:
            cov_sums.setdefault(cond, []).append(frac)
    rows.sort(key=lambda r: (r.image_id, r.condition))
    with open(out_dir / "index.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(
                {"image_id": row.image_id, "condition": row.condition, "path": row.path}) + "\n")
    coverage = {cond: float(np.mean(v)) for cond, v in sorted(cov_sums.items())}
    return rows, coverage


def load_index(path: str | Path) -> list[IndexRow]:
    """Read an index.jsonl produced by apply_to_manifest."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                rows.append(IndexRow(str(obj["image_id"]), str(obj["condition"]), str(obj["path"])))
            except KeyError as exc:
                raise FormatError(f"{path}: line {lineno}: missing field {exc}") from exc
    return rows
