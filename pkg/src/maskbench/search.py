"""Hyperparameter grid search over (mask shape, density, opacity).

Each grid combination samples a few corpus images, applies the mask,
scores the accuracy difference (clean minus masked Acc@1, in %-points)
against the mean perceptual quality, then marks as selected every
combination whose quality sits strictly above a per-accuracy-bucket
regression line.  Predictions come from a pluggable provider: either a
directory of precomputed JSONL files or an external command invoked per
condition.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import corpus, maskgen, metrics
from .errors import (
    EmptySample,
    EmptySelection,
    ProviderError,
    RangeError,
    Underdetermined,
)
from .evaluation import PredictionRecord, load_predictions
from .maskgen import CLEAN_CONDITION, MaskShape, MaskSpec, condition_id

SAMPLES_MIN = 5
SAMPLES_MAX = 20
# Points within this distance of the regression line count as "on" it and
# are not selected; keeps the strict-inequality rule stable under roundoff.
SELECT_EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    shapes: tuple[MaskShape, ...]
    densities: tuple[int, ...]
    opacities: tuple[int, ...]
    samples_per_combo: int = 10
    seed: int = 0
    # the 5-20 bound is the documented default envelope; set True to go wider
    extended_samples: bool = False

    def __post_init__(self):
        if not self.shapes or not self.densities or not self.opacities:
            raise RangeError("grid axes must be non-empty")
        if any(not 0 <= d <= 100 for d in self.densities):
            raise RangeError(f"densities must be in [0, 100], got {self.densities}")
        if any(not 0 <= a <= 255 for a in self.opacities):
            raise RangeError(f"opacities must be in [0, 255], got {self.opacities}")
        if self.samples_per_combo < 1:
            raise RangeError("samples_per_combo must be >= 1")
        if not self.extended_samples and not SAMPLES_MIN <= self.samples_per_combo <= SAMPLES_MAX:
            raise RangeError(
                f"samples_per_combo must be in [{SAMPLES_MIN}, {SAMPLES_MAX}] "
                f"(set extended_samples to override), got {self.samples_per_combo}")

    def combos(self) -> list[tuple[MaskShape, int, int]]:
        return sorted(product(self.shapes, self.densities, self.opacities),
                      key=lambda c: (c[0].value, c[1], c[2]))


@dataclass
class ComboResult:
    shape: MaskShape
    density: int
    opacity_alpha: int
    acc_diff: float   # %-points, clean minus masked Acc@1
    quality: float
    selected: bool = False


# ---------------------------------------------------------------------------
# prediction providers


class DirectoryProvider:
    """Reads <dir>/<condition>.jsonl; the clean condition maps to clean.jsonl."""

    needs_images = False

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def predictions(self, condition: str, sample: corpus.CorpusManifest) -> list[PredictionRecord]:
        path = self.directory / f"{condition}.jsonl"
        if not path.is_file():
            raise ProviderError(f"no prediction file for condition {condition!r}: {path}")
        return load_predictions(path)


class CommandProvider:
    """Runs a command template per condition; it must write prediction JSONL.

    The sample manifest handed over lists images already in the stated
    condition (run_grid materializes masked copies first), so the command
    only classifies what it is given.  {condition}, {manifest} and {out}
    are substituted per invocation.  Non-zero exit or a missing output
    file is a ProviderError.
    """

    needs_images = True

    def __init__(self, template: str):
        self.template = template

    def predictions(self, condition: str, sample: corpus.CorpusManifest) -> list[PredictionRecord]:
        with tempfile.TemporaryDirectory(prefix="maskbench-provider-") as tmp:
            manifest_path = Path(tmp) / "sample.jsonl"
            out_path = Path(tmp) / "predictions.jsonl"
            corpus.save_manifest(sample, manifest_path)
            argv = [
                token.format(condition=condition, manifest=manifest_path, out=out_path)
                for token in shlex.split(self.template)
            ]
            proc = subprocess.run(argv, capture_output=True, text=True)
            if proc.returncode != 0:
                raise ProviderError(
                    f"provider command failed for {condition!r} "
                    f"(exit {proc.returncode}): {proc.stderr.strip()}")
            if not out_path.is_file():
                raise ProviderError(f"provider command wrote no file for {condition!r}")
            return load_predictions(out_path)


def make_provider(spec: str):
    """Parse a provider spec: "dir:<path>" or "cmd:<template>"."""
    kind, _, rest = spec.partition(":")
    if kind == "dir" and rest:
        return DirectoryProvider(rest)
    if kind == "cmd" and rest:
        return CommandProvider(rest)
    raise RangeError(f"provider must be 'dir:<path>' or 'cmd:<template>', got {spec!r}")


# ---------------------------------------------------------------------------
# the grid


def _combo_seed(base_seed: int, combo_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, combo_index]).generate_state(1, np.uint64)[0])


def _acc1(records: dict[str, PredictionRecord]) -> float:
    return sum(1 for rec in records.values() if rec.gt_rank == 1) / len(records)


def _records_for_sample(
    records: list[PredictionRecord],
    sample: corpus.CorpusManifest,
    condition: str,
) -> dict[str, PredictionRecord]:
    wanted = {rec.image_id: rec for rec in records if rec.condition == condition}
    missing = [i for i in sample.ids() if i not in wanted]
    if missing:
        raise ProviderError(
            f"provider returned no {condition!r} prediction for image(s) {missing[:5]}")
    return {i: wanted[i] for i in sample.ids()}


def run_grid(
    grid: GridSpec,
    manifest: corpus.CorpusManifest,
    provider,
    quality_metric: str = "three",
) -> list[ComboResult]:
    """Evaluate every (shape, density, opacity) combination.

    Per combo: draw a seeded sample from the corpus, apply the mask, take
    acc_diff from the provider's clean/masked predictions and quality from
    the perceptual metrics (mean over the sample).  Deterministic given the
    grid, corpus and prediction fixtures; output order follows
    GridSpec.combos().
    """
    if len(manifest) == 0:
        raise EmptySample("cannot sample from an empty corpus")
    if quality_metric not in ("three", "composite"):
        raise RangeError(f"quality_metric must be 'three' or 'composite', got {quality_metric!r}")
    results = []
    for idx, (shape, density, opacity) in enumerate(grid.combos()):
        sample = corpus.subsample(manifest, grid.samples_per_combo,
                                  seed=_combo_seed(grid.seed, idx))
        spec = MaskSpec(shape=shape, density=density, opacity_alpha=opacity)
        condition = condition_id(spec)

        qualities = []
        masked_images: dict[str, np.ndarray] = {}
        for entry in sample.entries:
            img = corpus.load_image(sample.resolve_path(entry))
            masked_img = maskgen.apply_mask(img, spec)
            masked_images[entry.image_id] = masked_img
            cos = metrics.cosine_similarity(img, masked_img)
            p = metrics.psnr(img, masked_img)
            s = metrics.ssim(img, masked_img)
            if quality_metric == "three":
                qualities.append(metrics.three_metric_quality(cos, p, s))
            else:
                qualities.append(metrics.composite_quality(cos, p, s))

        clean = _records_for_sample(
            provider.predictions(CLEAN_CONDITION, sample), sample, CLEAN_CONDITION)
        if getattr(provider, "needs_images", False):
            with tempfile.TemporaryDirectory(prefix="maskbench-grid-") as tmp:
                entries = []
                for entry in sample.entries:
                    path = Path(tmp) / f"{entry.image_id}.png"
                    corpus.save_image(masked_images[entry.image_id], path)
                    entries.append(corpus.ManifestEntry(entry.image_id, str(path), entry.label))
                masked_manifest = corpus.CorpusManifest(entries)
                masked_records = provider.predictions(condition, masked_manifest)
        else:
            masked_records = provider.predictions(condition, sample)
        masked = _records_for_sample(masked_records, sample, condition)
        acc_diff = (_acc1(clean) - _acc1(masked)) * 100.0

        results.append(ComboResult(
            shape=shape, density=density, opacity_alpha=opacity,
            acc_diff=acc_diff, quality=float(np.mean(qualities))))
    return results


# ---------------------------------------------------------------------------
# selection


def select_above_regression(results: list[ComboResult]) -> list[ComboResult]:
    """Flag combinations whose quality lies strictly above the regression line.

    The line is fit on the best-quality representative of each 1-%-point
    accuracy-difference bucket; selection then applies to all results.
    Flags are set in place and the list is returned for convenience.
    """
    if len({round(r.acc_diff, 9) for r in results}) < 2:
        raise Underdetermined("need at least 2 distinct acc_diff values")
    best: dict[int, ComboResult] = {}
    for r in sorted(results, key=lambda r: (r.shape.value, r.density, r.opacity_alpha)):
        bucket = int(np.floor(r.acc_diff))
        if bucket not in best or r.quality > best[bucket].quality:
            best[bucket] = r
    if len(best) < 2:
        raise Underdetermined("all results fall into a single accuracy bucket")
    xs = np.array([r.acc_diff for r in best.values()])
    ys = np.array([r.quality for r in best.values()])
    slope, intercept = np.polyfit(xs, ys, 1)
    for r in results:
        r.selected = bool(r.quality - (slope * r.acc_diff + intercept) > SELECT_EPS)
    return results


def report_optima(results: list[ComboResult]) -> dict:
    """Per-shape modal density and opacity range among selected combos."""
    selected = [r for r in results if r.selected]
    if not selected:
        raise EmptySelection("no combination was selected")
    summary: dict[str, dict] = {}
    for shape in sorted({r.shape.value for r in selected}):
        own = [r for r in selected if r.shape.value == shape]
        densities = [r.density for r in own]
        counts = {d: densities.count(d) for d in set(densities)}
        modal = min(d for d, c in counts.items() if c == max(counts.values()))
        summary[shape] = {
            "modal_density": modal,
            "opacity_range": [min(r.opacity_alpha for r in own),
                              max(r.opacity_alpha for r in own)],
            "n_selected": len(own),
        }
    return summary


def write_results_jsonl(results: list[ComboResult], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "shape": r.shape.value,
                "density": r.density,
                "opacity_alpha": r.opacity_alpha,
                "acc_diff": r.acc_diff,
                "quality": r.quality,
                "selected": r.selected,
            }) + "\n")
