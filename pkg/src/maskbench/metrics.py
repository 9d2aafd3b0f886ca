"""Perceptual quality metrics and their weighted composite.

Components: pixel cosine similarity, PSNR, SSIM, and an externally supplied
LPIPS score.  LPIPS needs a learned network, so this module never evaluates
one: it reads sidecar files produced elsewhere and renormalizes the weights
when no sidecar is given.

Normalization choices baked into the composite (and recorded in every
quality-file header): PSNR is clamped at 50 dB then divided by 50; negative
SSIM is clamped to 0 inside the composite only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .corpus import as_rgb_array
from .errors import (
    DegenerateInput,
    DimensionMismatch,
    FormatError,
    KeyMissing,
    RangeError,
    TooSmall,
    WeightError,
)

PSNR_CAP_DB = 100.0   # stand-in for +inf on identical images
PSNR_NORM_DB = 50.0   # composite normalization: min(psnr, 50) / 50
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_NORM_NOTE = "min(psnr_db, 50) / 50"


@dataclass(frozen=True)
class QualityWeights:
    cosine: float = 0.15
    psnr: float = 0.25
    ssim: float = 0.35
    lpips: float = 0.25

    def __post_init__(self):
        vals = (self.cosine, self.psnr, self.ssim, self.lpips)
        if any(v < 0 for v in vals):
            raise WeightError(f"weights must be non-negative, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise WeightError(f"weights must sum to 1, got {sum(vals)!r}")


DEFAULT_WEIGHTS = QualityWeights()


@dataclass(frozen=True)
class QualityReport:
    """Per-(image, condition) component metrics plus the weighted composite."""

    image_id: str
    condition: str
    cosine: float
    psnr_db: float
    ssim: float
    lpips: float | None = None
    composite: float = 0.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = as_rgb_array(a)
    b = as_rgb_array(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the flattened pixel vectors; in [0, 1] for uint8 inputs."""
    a, b = _check_pair(a, b)
    u = a.astype(np.float64).ravel()
    v = b.astype(np.float64).ravel()
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInput("cosine similarity is undefined for an all-zero image")
    return float(np.dot(u, v) / (nu * nv))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(255^2 / MSE) over all channels; identical images hit the cap."""
    a, b = _check_pair(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _luma(img: np.ndarray) -> np.ndarray:
    # Rec. 601 weights
    return (0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]).astype(np.float64)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel()


def _windowed(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, cropped to fully valid window positions."""
    half = SSIM_WINDOW // 2
    t = correlate1d(img, _SSIM_KERNEL, axis=0)
    t = correlate1d(t, _SSIM_KERNEL, axis=1)
    return t[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on luma, 11x11 Gaussian window with sigma 1.5.

    Averaged over all fully valid window positions, so min(w, h) >= 11.
    """
    a, b = _check_pair(a, b)
    h, w = a.shape[:2]
    if min(w, h) < SSIM_WINDOW:
        raise TooSmall(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")
    x = _luma(a)
    y = _luma(b)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu_x = _windowed(x)
    mu_y = _windowed(y)
    var_x = _windowed(x * x) - mu_x * mu_x
    var_y = _windowed(y * y) - mu_y * mu_y
    cov = _windowed(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def normalize_psnr(psnr_db: float) -> float:
    return min(psnr_db, PSNR_NORM_DB) / PSNR_NORM_DB


def composite_quality(
    cosine: float,
    psnr_db: float,
    ssim_value: float,
    lpips: float | None = None,
    weights: QualityWeights = DEFAULT_WEIGHTS,
) -> float:
    """Weighted average of the normalized components, in [0, 1].

    When lpips is absent the remaining three weights are renormalized to
    sum to one.
    """
    terms = (
        weights.cosine * cosine
        + weights.psnr * normalize_psnr(psnr_db)
        + weights.ssim * max(ssim_value, 0.0)
    )
    if lpips is None:
        present = weights.cosine + weights.psnr + weights.ssim
        if present <= 0:
            raise WeightError("all non-lpips weights are zero; composite undefined")
        return terms / present
    return terms + weights.lpips * (1.0 - lpips)


def three_metric_quality(cosine: float, psnr_db: float, ssim_value: float) -> float:
    """Unweighted mean of the three model-free components (search phase)."""
    return (cosine + normalize_psnr(psnr_db) + max(ssim_value, 0.0)) / 3.0


def score_pair(
    original: np.ndarray,
    processed: np.ndarray,
    image_id: str,
    condition: str,
    weights: QualityWeights = DEFAULT_WEIGHTS,
) -> QualityReport:
    cos = cosine_similarity(original, processed)
    p = psnr(original, processed)
    s = ssim(original, processed)
    return QualityReport(
        image_id=image_id,
        condition=condition,
        cosine=cos,
        psnr_db=p,
        ssim=s,
        lpips=None,
        composite=composite_quality(cos, p, s, None, weights),
    )


def attach_lpips(
    report: QualityReport,
    sidecar: dict[tuple[str, str], float],
    weights: QualityWeights = DEFAULT_WEIGHTS,
) -> QualityReport:
    """Fill in the external LPIPS score and recompute the composite."""
    key = (report.image_id, report.condition)
    if key not in sidecar:
        raise KeyMissing(f"no lpips entry for (image_id={key[0]!r}, condition={key[1]!r})")
    value = float(sidecar[key])
    if not 0.0 <= value <= 1.0:
        raise RangeError(f"lpips must be in [0, 1], got {value} for {key}")
    return replace(
        report,
        lpips=value,
        composite=composite_quality(report.cosine, report.psnr_db, report.ssim, value, weights),
    )


# ---------------------------------------------------------------------------
# file formats


def load_lpips_sidecar(path: str | Path) -> dict[tuple[str, str], float]:
    """JSONL of {"image_id", "condition", "lpips"} keyed by (id, condition)."""
    path = Path(path)
    out: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if obj.get("header") is True:
                continue
            try:
                out[(str(obj["image_id"]), str(obj["condition"]))] = float(obj["lpips"])
            except KeyError as exc:
                raise FormatError(f"{path}: line {lineno}: missing field {exc}") from exc
    return out


def write_quality_jsonl(
    reports: list[QualityReport],
    path: str | Path,
    weights: QualityWeights = DEFAULT_WEIGHTS,
) -> None:
    """One JSON line per report, preceded by a header recording the
    normalization conventions; rows sorted by (image_id, condition)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "header": True,
        "psnr_norm": PSNR_NORM_NOTE,
        "weights": {
            "cosine": weights.cosine,
            "psnr": weights.psnr,
            "ssim": weights.ssim,
            "lpips": weights.lpips,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in sorted(reports, key=lambda r: (r.image_id, r.condition)):
            row = {
                "image_id": r.image_id,
                "condition": r.condition,
                "cosine": r.cosine,
                "psnr_db": r.psnr_db,
                "ssim": r.ssim,
                "composite": r.composite,
            }
            if r.lpips is not None:
                row["lpips"] = r.lpips
            fh.write(json.dumps(row) + "\n")


def load_quality_jsonl(path: str | Path) -> list[QualityReport]:
    path = Path(path)
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if obj.get("header") is True:
                continue
            try:
                reports.append(QualityReport(
                    image_id=str(obj["image_id"]),
                    condition=str(obj["condition"]),
                    cosine=float(obj["cosine"]),
                    psnr_db=float(obj["psnr_db"]),
                    ssim=float(obj["ssim"]),
                    lpips=float(obj["lpips"]) if "lpips" in obj else None,
                    composite=float(obj["composite"]),
                ))
            except KeyError as exc:
                raise FormatError(f"{path}: line {lineno}: missing field {exc}") from exc
    return reports
