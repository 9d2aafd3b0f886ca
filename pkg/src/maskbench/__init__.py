"""Geometric mask benchmark toolkit.

Generates circle / diamond / square / knit overlay masks, applies them to
image corpora, scores perceptual quality, and aggregates classifier
degradation statistics from prediction files.
"""

from .corpus import (
    CorpusManifest,
    ManifestEntry,
    load_image,
    load_manifest,
    resize_to,
    save_image,
    save_manifest,
    subsample,
)
from .evaluation import (
    EvalRow,
    PolyFit,
    PredictionRecord,
    TradeoffPoint,
    acc_at_k,
    confidence_drop,
    delta_acc_table,
    fit_polynomial,
    load_predictions,
    rank_delta,
    tradeoff_point,
    tradeoff_points,
)
from .maskgen import (
    MaskLayer,
    MaskShape,
    MaskSpec,
    apply_mask,
    condition_id,
    coverage_fraction,
    parse_condition_id,
    rasterize,
)
from .metrics import (
    QualityReport,
    QualityWeights,
    attach_lpips,
    composite_quality,
    cosine_similarity,
    psnr,
    score_pair,
    ssim,
)
from .search import ComboResult, GridSpec, report_optima, run_grid, select_above_regression

__version__ = "0.1.0"
