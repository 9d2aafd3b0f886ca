"""Classifier-degradation statistics from prediction files.

Predictions arrive as JSON lines, one record per (model, image, condition),
carrying the model's top-k classes plus the ground-truth rank and score
computed from the model's full class ranking (worst rank among ties).  This
module aggregates them into the accuracy-delta tables, rank-change and
confidence-drop statistics, the quality-vs-rank trade-off points, and the
degree-2 trade-off fit.

Sign conventions: accuracy deltas are clean minus masked in %-points
(positive = degradation); rank deltas are rank_clean minus rank_masked
(negative = degradation); trade-off score = quality - rank_delta.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInput,
    DuplicateKeyError,
    EmptyIntersection,
    FormatError,
    MissingField,
    MissingTruth,
    MonotonicityError,
    Underdetermined,
)
from .maskgen import CLEAN_CONDITION, parse_condition_id

MIN_TOPK = 5


@dataclass(frozen=True)
class PredictionRecord:
    model: str
    image_id: str
    condition: str
    topk: tuple[tuple[str, float], ...]
    gt_rank: int
    gt_score: float | None = None

    def key(self) -> tuple[str, str, str]:
        return (self.model, self.image_id, self.condition)


@dataclass(frozen=True)
class EvalRow:
    """Aggregated degradation for one (model, mask shape, opacity) cell."""

    model: str
    mask: str
    opacity_alpha: int
    delta_acc1: float
    delta_acc5: float
    mean_delta_rank: float
    n_images: int
    mean_conf_drop: float | None = None


@dataclass(frozen=True)
class TradeoffPoint:
    mask: str
    opacity_alpha: int
    delta_rank: float
    quality: float
    score: float


def tradeoff_point(mask: str, opacity_alpha: int, delta_rank: float, quality: float) -> TradeoffPoint:
    return TradeoffPoint(mask, opacity_alpha, delta_rank, quality, quality - delta_rank)


def _validate_record(rec: PredictionRecord, where: str) -> None:
    if len(rec.topk) < MIN_TOPK:
        raise FormatError(f"{where}: topk must list at least {MIN_TOPK} classes")
    scores = [s for _, s in rec.topk]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise MonotonicityError(f"{where}: topk scores are not descending: {scores}")
    if rec.gt_rank < 1:
        raise FormatError(f"{where}: gt_rank must be >= 1, got {rec.gt_rank}")


def _check_truth_consistency(rec: PredictionRecord, label: str, where: str) -> None:
    # Worst-rank tie convention: the emitted rank may exceed the list
    # position when ties are present, never undercut it.
    for pos, (cls, score) in enumerate(rec.topk, start=1):
        if cls == label:
            if rec.gt_rank < pos:
                raise FormatError(
                    f"{where}: gt_rank {rec.gt_rank} undercuts topk position {pos}")
            if rec.gt_score is not None and rec.gt_score != score:
                raise FormatError(
                    f"{where}: gt_score {rec.gt_score} != topk score {score} at rank {pos}")
            return


def load_predictions(
    path: str | Path,
    truths: dict[str, str] | None = None,
) -> list[PredictionRecord]:
    """Read and validate a prediction JSONL file.

    With a truth map given, records whose ground-truth class appears in
    topk are cross-checked against gt_rank / gt_score.
    """
    path = Path(path)
    records: list[PredictionRecord] = []
    seen: set[tuple[str, str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON ({exc.msg})") from exc
            if obj.get("header") is True:
                continue
            try:
                rec = PredictionRecord(
                    model=str(obj["model"]),
                    image_id=str(obj["image_id"]),
                    condition=str(obj["condition"]),
                    topk=tuple((str(c), float(s)) for c, s in obj["topk"]),
                    gt_rank=int(obj["gt_rank"]),
                    gt_score=float(obj["gt_score"]) if "gt_score" in obj else None,
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{where}: malformed record ({exc})") from exc
            _validate_record(rec, where)
            if rec.key() in seen:
                raise DuplicateKeyError(f"{where}: duplicate record for {rec.key()}")
            seen.add(rec.key())
            if truths is not None:
                if rec.image_id not in truths:
                    raise MissingTruth(f"{where}: no truth label for {rec.image_id!r}")
                _check_truth_consistency(rec, truths[rec.image_id], where)
            records.append(rec)
    return records


def write_predictions(records: list[PredictionRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in sorted(records, key=PredictionRecord.key):
            row = {
                "model": r.model,
                "image_id": r.image_id,
                "condition": r.condition,
                "topk": [[c, s] for c, s in r.topk],
                "gt_rank": r.gt_rank,
            }
            if r.gt_score is not None:
                row["gt_score"] = r.gt_score
            fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# accuracy


def acc_at_k(records: list[PredictionRecord], truths: dict[str, str], k: int) -> float:
    """Fraction of records whose ground truth ranks in the top k."""
    if not records:
        raise DegenerateInput("accuracy of an empty record set is undefined")
    for rec in records:
        if rec.image_id not in truths:
            raise MissingTruth(f"no truth label for {rec.image_id!r}")
    return sum(1 for rec in records if rec.gt_rank <= k) / len(records)


def _clean_by_model(clean: list[PredictionRecord]) -> dict[str, dict[str, PredictionRecord]]:
    out: dict[str, dict[str, PredictionRecord]] = {}
    for rec in clean:
        if rec.condition != CLEAN_CONDITION:
            continue
        out.setdefault(rec.model, {})[rec.image_id] = rec
    if not out:
        raise EmptyIntersection("no records with condition 'clean' in the clean set")
    return out


def _mask_key(condition: str) -> tuple[str, int]:
    spec = parse_condition_id(condition)
    return (spec.shape.value, spec.opacity_alpha)


def _masked_groups(
    masked: list[PredictionRecord],
) -> dict[tuple[str, str, int], dict[str, PredictionRecord]]:
    """Group masked records by (model, mask shape, opacity)."""
    groups: dict[tuple[str, str, int], dict[str, PredictionRecord]] = {}
    for rec in masked:
        shape, alpha = _mask_key(rec.condition)
        groups.setdefault((rec.model, shape, alpha), {})[rec.image_id] = rec
    return groups


def all_correct_images(clean: list[PredictionRecord]) -> set[str]:
    """Images with gt_rank == 1 under every model present in the clean set."""
    by_model = _clean_by_model(clean)
    common: set[str] | None = None
    for model_recs in by_model.values():
        correct = {i for i, rec in model_recs.items() if rec.gt_rank == 1}
        common = correct if common is None else common & correct
    return common or set()


def delta_acc_table(
    clean: list[PredictionRecord],
    masked: list[PredictionRecord],
    restrict_all_correct: bool = False,
) -> list[EvalRow]:
    """Per (model, mask, opacity): Acc@k drop in %-points over the common
    image set, plus the mean ground-truth rank change.

    With restrict_all_correct, only images every model classifies correctly
    in the clean condition enter, so clean Acc@1 is 100% by construction.
    """
    by_model = _clean_by_model(clean)
    eligible = all_correct_images(clean) if restrict_all_correct else None
    rows = []
    for (model, shape, alpha), group in sorted(_masked_groups(masked).items()):
        clean_recs = by_model.get(model, {})
        common = sorted(set(group) & set(clean_recs))
        if eligible is not None:
            common = [i for i in common if i in eligible]
        if not common:
            raise EmptyIntersection(
                f"no common images for model={model!r} mask={shape!r} alpha={alpha}")
        n = len(common)
        acc = lambda recs, k: sum(1 for i in common if recs[i].gt_rank <= k) / n
        rows.append(EvalRow(
            model=model,
            mask=shape,
            opacity_alpha=alpha,
            delta_acc1=(acc(clean_recs, 1) - acc(group, 1)) * 100.0,
            delta_acc5=(acc(clean_recs, 5) - acc(group, 5)) * 100.0,
            mean_delta_rank=float(np.mean(
                [clean_recs[i].gt_rank - group[i].gt_rank for i in common])),
            n_images=n,
        ))
    return rows


def rank_delta(
    clean: list[PredictionRecord],
    masked: list[PredictionRecord],
) -> dict[tuple[str, int], float]:
    """Mean (rank_clean - rank_masked) per (mask, opacity), pooled across
    models and images; negative values mean the mask pushed the truth down."""
    by_model = _clean_by_model(clean)
    deltas: dict[tuple[str, int], list[int]] = {}
    for rec in masked:
        key = _mask_key(rec.condition)
        clean_rec = by_model.get(rec.model, {}).get(rec.image_id)
        if clean_rec is None:
            continue
        deltas.setdefault(key, []).append(clean_rec.gt_rank - rec.gt_rank)
    if not deltas:
        raise EmptyIntersection("no (model, image) pairs matched across conditions")
    return {key: float(np.mean(v)) for key, v in sorted(deltas.items())}


def confidence_drop(
    clean: list[PredictionRecord],
    masked: list[PredictionRecord],
) -> dict[tuple[str, str, int], float]:
    """Mean ground-truth confidence drop in %-points per (model, mask, opacity)."""
    by_model = _clean_by_model(clean)
    drops: dict[tuple[str, str, int], list[float]] = {}
    for rec in masked:
        clean_rec = by_model.get(rec.model, {}).get(rec.image_id)
        if clean_rec is None:
            continue
        if rec.gt_score is None or clean_rec.gt_score is None:
            raise MissingField(
                f"gt_score required for confidence drop (model={rec.model!r}, "
                f"image={rec.image_id!r})")
        shape, alpha = _mask_key(rec.condition)
        drops.setdefault((rec.model, shape, alpha), []).append(
            (clean_rec.gt_score - rec.gt_score) * 100.0)
    if not drops:
        raise EmptyIntersection("no (model, image) pairs matched across conditions")
    return {key: float(np.mean(v)) for key, v in sorted(drops.items())}


# ---------------------------------------------------------------------------
# trade-off


def mean_quality_by_mask(
    reports,
    use_three_metric: bool = False,
) -> dict[tuple[str, int], float]:
    """Mean composite quality per (mask, opacity) from per-image reports.

    use_three_metric swaps in the unweighted cosine/psnr/ssim mean used by
    the hyperparameter phase.
    """
    from .metrics import three_metric_quality

    acc: dict[tuple[str, int], list[float]] = {}
    for r in reports:
        if r.condition == CLEAN_CONDITION:
            continue
        key = _mask_key(r.condition)
        value = (three_metric_quality(r.cosine, r.psnr_db, r.ssim)
                 if use_three_metric else r.composite)
        acc.setdefault(key, []).append(value)
    return {key: float(np.mean(v)) for key, v in sorted(acc.items())}


def tradeoff_points(
    rank_deltas: dict[tuple[str, int], float],
    quality: dict[tuple[str, int], float],
) -> list[TradeoffPoint]:
    """Join rank deltas with mean quality; score = quality - delta_rank."""
    points = []
    for (mask, alpha), dr in sorted(rank_deltas.items()):
        if (mask, alpha) not in quality:
            raise EmptyIntersection(f"no quality reports for mask={mask!r} alpha={alpha}")
        points.append(tradeoff_point(mask, alpha, dr, quality[(mask, alpha)]))
    return points


@dataclass(frozen=True)
class PolyFit:
    coefficients: tuple[float, ...]  # ascending powers
    residual_norm: float


def fit_polynomial(points: list[tuple[float, float]], degree: int = 2) -> PolyFit:
    """Least-squares polynomial fit; coefficients in ascending power order."""
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    if len(set(xs.tolist())) < degree + 1:
        raise Underdetermined(
            f"degree-{degree} fit needs {degree + 1} distinct x values, "
            f"got {len(set(xs.tolist()))}")
    vander = xs[:, None] ** np.arange(degree + 1)
    coeffs, _, rank, _ = np.linalg.lstsq(vander, ys, rcond=None)
    if rank < degree + 1:
        raise Underdetermined("design matrix is rank deficient")
    residual = float(np.linalg.norm(ys - vander @ coeffs))
    return PolyFit(tuple(float(c) for c in coeffs), residual)


# ---------------------------------------------------------------------------
# table output


def _fmt2(value: float) -> str:
    """Two decimals, half-up, matching printed table formatting."""
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def write_delta_csv(
    rows: list[EvalRow],
    path: str | Path,
    conf_drops: dict[tuple[str, str, int], float] | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "mask", "opacity_alpha", "delta_acc1", "delta_acc5",
             "mean_conf_drop", "n"])
        for row in sorted(rows, key=lambda r: (r.model, r.mask, r.opacity_alpha)):
            conf = row.mean_conf_drop
            if conf_drops is not None:
                conf = conf_drops.get((row.model, row.mask, row.opacity_alpha), conf)
            writer.writerow([
                row.model, row.mask, row.opacity_alpha,
                _fmt2(row.delta_acc1), _fmt2(row.delta_acc5),
                _fmt2(conf) if conf is not None else "",
                row.n_images,
            ])


def write_tradeoff_csv(points: list[TradeoffPoint], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask", "opacity_alpha", "delta_rank", "quality", "score"])
        for p in sorted(points, key=lambda p: (p.mask, p.opacity_alpha)):
            writer.writerow([p.mask, p.opacity_alpha,
                             repr(p.delta_rank), repr(p.quality), repr(p.score)])


def write_fit_json(fit: PolyFit, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "degree": len(fit.coefficients) - 1,
            "coefficients": list(fit.coefficients),
            "residual_norm": fit.residual_norm,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
