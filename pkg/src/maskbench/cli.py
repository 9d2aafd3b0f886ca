"""Command-line entry point: mask / score / eval / search subcommands.

Flag values resolve in three layers: hard defaults, then the optional INI
config file (section per subcommand plus [global]), then explicit flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import corpus, evaluation, maskgen, metrics, search
from .errors import MaskbenchError, RangeError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

JOBS_ENV = "MASKBENCH_JOBS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_color(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise RangeError(f"color must be R,G,B, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _parse_bool(text: str) -> bool:
    states = {"1": True, "yes": True, "true": True, "on": True,
              "0": False, "no": False, "false": False, "off": False}
    try:
        return states[text.strip().lower()]
    except KeyError:
        raise RangeError(f"not a boolean: {text!r}") from None


def _parse_size(text: str) -> tuple[int, int]:
    w, _, h = text.lower().partition("x")
    try:
        return int(w), int(h)
    except ValueError:
        raise RangeError(f"size must be WxH, got {text!r}") from None


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in text.split(",") if p.strip())


class _Config:
    """INI config: values used when the corresponding flag was not given."""

    def __init__(self, path: str | None):
        self.parser = configparser.ConfigParser()
        if path:
            with open(path, encoding="utf-8") as fh:
                self.parser.read_file(fh)

    def get(self, section: str, key: str, conv, fallback):
        for sec in (section, "global"):
            if self.parser.has_option(sec, key):
                return conv(self.parser.get(sec, key))
        return fallback


def _resolve(flag_value, cfg: _Config, section: str, key: str, conv, fallback):
    return flag_value if flag_value is not None else cfg.get(section, key, conv, fallback)


def build_parser() -> _Parser:
    parser = _Parser(prog="maskbench", description=__doc__)
    parser.add_argument("--config", help="INI config file; flags override it")
    parser.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    parser.add_argument("--jobs", type=int, default=None,
                        help=f"worker threads (default ${JOBS_ENV} or 1)")
    parser.add_argument("--out-dir", default=None,
                        help="default directory for --out arguments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="apply a mask to a corpus", parents=[])
    p.add_argument("--manifest", required=True)
    p.add_argument("--shape", choices=[s.value for s in maskgen.MaskShape], default=None)
    p.add_argument("--density", type=int, default=None)
    p.add_argument("--alpha", type=int, default=None)
    p.add_argument("--color", default=None, help="overlay color R,G,B (default 0,0,0)")
    p.add_argument("--resize", default=None, help="resize inputs to WxH before masking")
    p.add_argument("--out", default=None, help="output tree directory")

    p = sub.add_parser("score", help="perceptual quality of masked images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masked-index", required=True)
    p.add_argument("--lpips-sidecar", default=None)
    p.add_argument("--out", default=None, help="quality JSONL path")

    p = sub.add_parser("eval", help="classifier degradation tables")
    p.add_argument("--truths", required=True, help="manifest supplying image labels")
    p.add_argument("--clean-preds", required=True)
    p.add_argument("--masked-preds", required=True)
    p.add_argument("--all-correct", action="store_true", default=None,
                   help="restrict to images all models classify correctly when clean")
    p.add_argument("--quality", default=None,
                   help="quality JSONL; enables the trade-off table and fit")
    p.add_argument("--three-metric", action="store_true", default=None,
                   help="use the 3-metric quality average instead of the composite")
    p.add_argument("--out", default=None, help="output directory for tables")

    p = sub.add_parser("search", help="hyperparameter grid search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", required=True, help="INI grid file ([grid] section)")
    p.add_argument("--provider", required=True, help="dir:<path> or cmd:<template>")
    p.add_argument("--out", default=None, help="output directory")
    return parser


def _jobs_default() -> int:
    env = os.environ.get(JOBS_ENV)
    return int(env) if env else 1


def _out_path(args, cfg, section: str, default_name: str) -> Path:
    out = _resolve(args.out, cfg, section, "out", str, None)
    if out is not None:
        return Path(out)
    out_dir = _resolve(args.out_dir, cfg, "global", "out_dir", str, None)
    if out_dir is not None:
        return Path(out_dir) / default_name
    raise RangeError(f"no --out given for {section} and no --out-dir set")


# ---------------------------------------------------------------------------
# subcommands


def cmd_mask(args, cfg: _Config) -> int:
    manifest = corpus.load_manifest(args.manifest)
    spec = maskgen.MaskSpec(
        shape=maskgen.MaskShape(_resolve(args.shape, cfg, "mask", "shape", str, "circle")),
        density=_resolve(args.density, cfg, "mask", "density", int, 70),
        opacity_alpha=_resolve(args.alpha, cfg, "mask", "alpha", int, 128),
        color=_parse_color(_resolve(args.color, cfg, "mask", "color", str, "0,0,0")),
        seed=_resolve(args.seed, cfg, "global", "seed", int, 0),
    )
    resize = _resolve(args.resize, cfg, "mask", "resize", str, None)
    jobs = _resolve(args.jobs, cfg, "global", "jobs", int, _jobs_default())
    out = _out_path(args, cfg, "mask", "masked")
    rows, coverage = maskgen.apply_to_manifest(
        manifest, [spec], out,
        resize=_parse_size(resize) if resize else None,
        jobs=jobs)
    for cond, frac in coverage.items():
        print(f"condition={cond} images={len(manifest)} mean_coverage={frac:.4f}")
    print(f"wrote {len(rows)} images under {out}")
    return EXIT_OK


def _score_one(task):
    image_id, condition, clean_path, masked_path, weights = task
    original = corpus.load_image(clean_path)
    processed = corpus.load_image(masked_path)
    return metrics.score_pair(original, processed, image_id, condition, weights)


def cmd_score(args, cfg: _Config) -> int:
    manifest = corpus.load_manifest(args.manifest)
    known_ids = set(manifest.labels())
    index_path = Path(args.masked_index)
    rows = maskgen.load_index(index_path)
    base = index_path.parent

    clean_paths: dict[str, Path] = {}
    for row in rows:
        if row.condition == maskgen.CLEAN_CONDITION:
            clean_paths[row.image_id] = base / row.path
    # trees without clean copies fall back to the manifest originals
    by_id = {e.image_id: manifest.resolve_path(e) for e in manifest.entries}

    weights = metrics.DEFAULT_WEIGHTS
    tasks = []
    for row in sorted(rows, key=lambda r: (r.image_id, r.condition)):
        if row.condition == maskgen.CLEAN_CONDITION:
            continue
        if row.image_id not in known_ids:
            raise MaskbenchError(f"index image_id {row.image_id!r} not in manifest")
        clean = clean_paths.get(row.image_id) or by_id.get(row.image_id)
        if clean is None:
            raise MaskbenchError(f"no original image for {row.image_id!r}")
        tasks.append((row.image_id, row.condition, clean, base / row.path, weights))

    jobs = _resolve(args.jobs, cfg, "global", "jobs", int, _jobs_default())
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_score_one, tasks))
    else:
        reports = [_score_one(t) for t in tasks]

    sidecar_path = _resolve(args.lpips_sidecar, cfg, "score", "lpips_sidecar", str, None)
    if sidecar_path:
        sidecar = metrics.load_lpips_sidecar(sidecar_path)
        reports = [metrics.attach_lpips(r, sidecar, weights) for r in reports]

    out = _out_path(args, cfg, "score", "quality.jsonl")
    metrics.write_quality_jsonl(reports, out, weights)
    print(f"scored {len(reports)} (image, condition) pairs -> {out}")
    return EXIT_OK


def cmd_eval(args, cfg: _Config) -> int:
    truths = corpus.load_manifest(args.truths).labels()
    clean = evaluation.load_predictions(args.clean_preds, truths=truths)
    masked = evaluation.load_predictions(args.masked_preds, truths=truths)
    masked = [r for r in masked if r.condition != maskgen.CLEAN_CONDITION]
    restrict = _resolve(args.all_correct, cfg, "eval", "all_correct", _parse_bool, False)

    rows = evaluation.delta_acc_table(clean, masked, restrict_all_correct=restrict)
    conf = evaluation.confidence_drop(clean, masked)
    out = _out_path(args, cfg, "eval", ".")
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_delta_csv(rows, out / "deltas.csv", conf_drops=conf)
    print(f"wrote {len(rows)} delta rows -> {out / 'deltas.csv'}")

    quality_path = _resolve(args.quality, cfg, "eval", "quality", str, None)
    if quality_path:
        reports = metrics.load_quality_jsonl(quality_path)
        three = _resolve(args.three_metric, cfg, "eval", "three_metric", _parse_bool, False)
        deltas = evaluation.rank_delta(clean, masked)
        quality = evaluation.mean_quality_by_mask(reports, use_three_metric=three)
        points = evaluation.tradeoff_points(deltas, quality)
        evaluation.write_tradeoff_csv(points, out / "tradeoff.csv")
        fit = evaluation.fit_polynomial(
            [(p.delta_rank, p.quality) for p in points], degree=2)
        evaluation.write_fit_json(fit, out / "tradeoff_fit.json")
        print(f"wrote {len(points)} trade-off points -> {out / 'tradeoff.csv'}")
    return EXIT_OK


def cmd_search(args, cfg: _Config) -> int:
    manifest = corpus.load_manifest(args.manifest)
    grid_ini = configparser.ConfigParser()
    with open(args.grid, encoding="utf-8") as fh:
        grid_ini.read_file(fh)
    if not grid_ini.has_section("grid"):
        raise MaskbenchError(f"{args.grid}: missing [grid] section")
    g = grid_ini["grid"]
    grid = search.GridSpec(
        shapes=tuple(maskgen.MaskShape(s.strip())
                     for s in g.get("shapes", "circle").split(",") if s.strip()),
        densities=_parse_int_list(g.get("densities", "70")),
        opacities=_parse_int_list(g.get("opacities", "50,110,170")),
        samples_per_combo=g.getint("samples", 5),
        seed=_resolve(args.seed, cfg, "global", "seed", int, g.getint("seed", 0)),
        extended_samples=g.getboolean("extended_samples", False),
    )
    provider = search.make_provider(args.provider)
    results = search.run_grid(grid, manifest, provider,
                              quality_metric=g.get("metric", "three"))
    search.select_above_regression(results)
    out = _out_path(args, cfg, "search", ".")
    out.mkdir(parents=True, exist_ok=True)
    search.write_results_jsonl(results, out / "combos.jsonl")
    summary = search.report_optima(results)
    with open(out / "optima.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"evaluated {len(results)} combinations -> {out / 'combos.jsonl'}")
    for shape, info in summary.items():
        print(f"shape={shape} modal_density={info['modal_density']} "
              f"opacity_range={info['opacity_range'][0]}-{info['opacity_range'][1]}")
    return EXIT_OK


_COMMANDS = {"mask": cmd_mask, "score": cmd_score, "eval": cmd_eval, "search": cmd_search}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _Config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (MaskbenchError, OSError) as exc:
        print(f"maskbench: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
