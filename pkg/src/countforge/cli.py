"""Command-line interface binding the library to files.

Every subcommand validates its inputs fully before writing anything, and
all writes go through a temp-file-plus-rename so no partial output is
ever left behind.  Exit codes: 0 success, 2 input/validation failure,
3 zero ground-truth count, 4 numerical failure (divergence or
non-convergence; partial results are still written, flagged).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import core, demo, metrics, mosaic, ttn
from .errors import NumericalError, ValidationError, ZeroCountError
from .gl import GlConfig, gl_loss
from .transport import cost_matrix, grid_coords, normalize_points

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ZERO_COUNT = 3
EXIT_NUMERICAL = 4


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_manifest(path) -> list[core.AnnotatedImage]:
    if not Path(path).is_file():
        raise ValidationError(f"manifest not found: {path}")
    return core.load_manifest(path)


def _find_image(images, image_id: str) -> core.AnnotatedImage:
    for img in images:
        if img.id == image_id:
            return img
    raise ValidationError(f"image id '{image_id}' not in manifest")


# ---------------------------------------------------------------------------
# gen-mosaic
# ---------------------------------------------------------------------------


def cmd_gen_mosaic(args) -> int:
    images = _load_manifest(args.manifest)
    config = mosaic.EVAL_CONFIG if args.mode == "eval" else mosaic.TRAIN_CONFIG
    payload = mosaic.generate_mosaic_dataset(images, args.n_queries, config, seed=args.seed)
    _atomic_write(args.out, core.dumps_canonical(payload))
    if args.csv:
        _atomic_write(args.csv, mosaic.pairs_csv_text(payload))
    pairs = payload["pairs"]
    classes = sorted({p["target_class"] for p in pairs})
    print(f"pairs: {len(pairs)}")
    print(f"classes: {len(classes)}")
    records = [
        metrics.CountRecord(id=p["pair_id"], gt=p["gt_count"], pred=0.0) for p in pairs
    ]
    print("gt count histogram:")
    for lo, hi, count in metrics.bin_distribution(records, 10):
        print(f"  [{lo:.1f}, {hi:.1f}]: {count}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval-metrics
# ---------------------------------------------------------------------------


def _read_simple_csv(path, value_col: str) -> dict[str, str]:
    import csv as _csv

    if not Path(path).is_file():
        raise ValidationError(f"CSV not found: {path}")
    out: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.DictReader(fh)
        for row in reader:
            if row.get("id") is None or row.get(value_col) is None:
                raise ValidationError(f"{path}: need columns id,{value_col}")
            if row["id"] in out:
                raise ValidationError(f"{path}: duplicate id '{row['id']}'")
            out[row["id"]] = row[value_col]
    return out


def cmd_eval_metrics(args) -> int:
    preds = _read_simple_csv(args.pred, "pred")
    if args.gt:
        gts = _read_simple_csv(args.gt, "gt")
    elif args.manifest:
        gts = {img.id: str(img.count) for img in _load_manifest(args.manifest)}
    else:
        raise ValidationError("need --gt or --manifest for ground truth")
    missing = sorted(set(gts) - set(preds))
    unmatched = sorted(set(preds) - set(gts))
    if missing:
        raise ValidationError(f"missing prediction for id '{missing[0]}'")
    if unmatched:
        raise ValidationError(f"prediction id '{unmatched[0]}' has no ground truth")
    try:
        records = [
            metrics.CountRecord(id=rid, gt=int(gts[rid]), pred=float(preds[rid]))
            for rid in sorted(gts)
        ]
    except ValueError as exc:
        raise ValidationError(f"non-numeric record field: {exc}") from exc

    report = metrics.compute_metrics(records)
    payload: dict = {"metrics": report.to_payload()}
    if args.exclude_top is not None:
        full, excluded, dropped = metrics.exclusion_report(records, args.exclude_top)
        payload["exclusion"] = {
            "k": args.exclude_top,
            "full": full.to_payload(),
            "excluded": excluded.to_payload(),
            "dropped_ids": list(dropped),
        }
    hist_text = None
    if args.bins is not None:
        bins = metrics.bin_distribution(records, args.bins)
        payload["distribution"] = [
            {"bin_low": lo, "bin_high": hi, "count": c} for lo, hi, c in bins
        ]
        hist_text = metrics.histogram_csv_text(bins)
    text = core.dumps_canonical(payload)
    if args.out:
        _atomic_write(args.out, text)
    else:
        print(text, end="")
    if args.hist_csv:
        if hist_text is None:
            raise ValidationError("--hist-csv requires --bins")
        _atomic_write(args.hist_csv, hist_text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gl-loss
# ---------------------------------------------------------------------------


def cmd_gl_loss(args) -> int:
    if not Path(args.density).is_file():
        raise ValidationError(f"density file not found: {args.density}")
    grid = core.load_grid(args.density)
    images = _load_manifest(args.manifest)
    img = _find_image(images, args.image_id)
    stride = args.stride if args.stride is not None else grid.stride
    if stride != grid.stride:
        raise ValidationError(
            f"--stride {stride} conflicts with density stride {grid.stride}"
        )
    if grid.width != math.ceil(img.width / stride) or grid.height != math.ceil(
        img.height / stride
    ):
        raise ValidationError(
            f"density {grid.height}x{grid.width} at stride {stride} does not cover "
            f"image '{img.id}' ({img.width}x{img.height})"
        )
    config = GlConfig(
        epsilon=args.epsilon,
        tau=args.tau,
        eta=args.eta,
        max_iters=args.max_iters,
        tol=args.tol,
    )
    grid_frame = core.points_to_grid_frame(img.points, stride)
    pts = normalize_points(grid_frame, grid.height, grid.width)
    cells = grid_coords(grid.height, grid.width)
    cost = cost_matrix(cells, pts, eta=config.eta)
    result = gl_loss(grid, cost, len(pts), config)
    payload = {
        "loss": result.loss,
        "count": core.total_count(grid),
        "grad_norm": float(np.linalg.norm(result.grad_a)),
        "iterations": result.iterations,
        "converged": result.converged,
    }
    text = core.dumps_canonical(payload)
    if args.out:
        _atomic_write(args.out, text)
    else:
        print(text, end="")
    return EXIT_OK if result.converged else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# render-density
# ---------------------------------------------------------------------------


def cmd_render_density(args) -> int:
    images = _load_manifest(args.manifest)
    img = _find_image(images, args.image_id)
    height = math.ceil(img.height / args.stride)
    width = math.ceil(img.width / args.stride)
    grid = core.render_gaussian_density(
        img.points, height, width, stride=args.stride, sigma=args.sigma
    )
    _atomic_write(args.out, core.dumps_canonical(core.grid_to_payload(grid)))
    print(f"rendered {height}x{width} grid, count {core.total_count(grid):.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ttn-plan
# ---------------------------------------------------------------------------


def cmd_ttn_plan(args) -> int:
    images = _load_manifest(args.manifest)
    img = _find_image(images, args.image_id)
    config = ttn.TtnConfig(M=args.tiles_m, T=args.threshold_t)
    plan = ttn.make_plan(img.boxes, img.width, img.height, config)
    text = core.dumps_canonical(plan.to_payload())
    if args.out:
        _atomic_write(args.out, text)
    else:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# demo-recipe
# ---------------------------------------------------------------------------


def _demo_config_from_file(path) -> demo.DemoConfig:
    if not Path(path).is_file():
        raise ValidationError(f"demo config not found: {path}")
    with open(path, encoding="utf-8") as fh:
        raw = core.loads_strict(fh.read())
    if not isinstance(raw, dict):
        raise ValidationError("demo config must be a JSON object")
    kwargs: dict = {}
    scene_kwargs = raw.pop("scene", None)
    gl_kwargs = raw.pop("gl", None)
    init_kwargs = raw.pop("init_params", None)
    if scene_kwargs is not None:
        kwargs["scene"] = demo.BlobSceneSpec(**scene_kwargs)
    if gl_kwargs is not None:
        kwargs["gl"] = GlConfig(**gl_kwargs)
    if init_kwargs is not None:
        kwargs["init_params"] = demo.ToyModelParams(**init_kwargs)
    if "seeds" in raw:
        raw["seeds"] = tuple(raw["seeds"])
    try:
        return demo.DemoConfig(**kwargs, **raw)
    except TypeError as exc:
        raise ValidationError(f"invalid demo config: {exc}") from exc


def cmd_demo_recipe(args) -> int:
    config = _demo_config_from_file(args.config) if args.config else demo.DemoConfig()
    seeds = config.seeds
    if args.seeds:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(","))
        except ValueError as exc:
            raise ValidationError(f"bad --seeds list: {exc}") from exc
    outcome = demo.run_ablation(config, seeds=seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "ablation.csv", demo.ablation_csv_text(outcome))
    for run in outcome.runs:
        _atomic_write(
            out_dir / f"trace_{run.setting}_seed{run.seed}.csv",
            demo.trace_csv_text(run),
        )
    print(demo.ablation_csv_text(outcome), end="")
    if outcome.degenerate:
        return EXIT_OK
    return EXIT_OK if outcome.ordering_holds else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="countforge",
        description="Numerical tools for multi-class density-map counting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gen-mosaic", help="synthesize a mosaic training/evaluation manifest"
    )
    p.add_argument("--manifest", required=True, help="annotation manifest JSON")
    p.add_argument("--n-queries", type=int, required=True, help="number of collages")
    p.add_argument(
        "--mode", choices=("train", "eval"), default="eval",
        help="eval: 384px tiles, 4 distinct classes, 4 pairs per collage; "
        "train: 192px tiles, 1 pair per collage (default: eval)",
    )
    p.add_argument("--seed", type=int, required=True, help="generation seed (required)")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--csv", help="optional companion CSV (pair_id,target_class,gt_count)")
    p.set_defaults(func=cmd_gen_mosaic)

    p = sub.add_parser("eval-metrics", help="compute MAE/RMSE/NAE/SRE from counts")
    p.add_argument("--pred", required=True, help="predictions CSV with header id,pred")
    p.add_argument("--gt", help="ground-truth CSV with header id,gt")
    p.add_argument("--manifest", help="annotation manifest (gt = number of points)")
    p.add_argument(
        "--exclude-top", type=int, default=None, metavar="K",
        help="also report metrics after dropping the K largest-count records",
    )
    p.add_argument(
        "--bins", type=int, default=None, metavar="N",
        help="also report an N-bin count histogram of ground-truth counts",
    )
    p.add_argument("--out", help="report JSON path (default: stdout)")
    p.add_argument("--hist-csv", help="histogram CSV path (requires --bins)")
    p.set_defaults(func=cmd_eval_metrics)

    p = sub.add_parser(
        "gl-loss",
        help="transport counting loss of a density grid against an image's points",
    )
    p.add_argument("--density", required=True, help="density grid JSON")
    p.add_argument("--manifest", required=True, help="annotation manifest JSON")
    p.add_argument("--image-id", required=True, help="image id inside the manifest")
    p.add_argument(
        "--epsilon", type=float, default=0.01, help="entropic weight (default: 0.01)"
    )
    p.add_argument(
        "--tau", type=float, default=0.5, help="marginal penalty weight (default: 0.5)"
    )
    p.add_argument(
        "--eta", type=float, default=0.6, help="cost bandwidth (default: 0.6)"
    )
    p.add_argument(
        "--stride", type=int, default=None,
        help="cells-to-pixels stride; must match the density file (default: 4)",
    )
    p.add_argument("--max-iters", type=int, default=1000, help="solver iteration cap")
    p.add_argument("--tol", type=float, default=1e-7, help="relative objective tolerance")
    p.add_argument("--out", help="result JSON path (default: stdout)")
    p.set_defaults(func=cmd_gl_loss)

    p = sub.add_parser(
        "render-density",
        help="rasterize an image's point annotations as a Gaussian density grid",
    )
    p.add_argument("--manifest", required=True, help="annotation manifest JSON")
    p.add_argument("--image-id", required=True, help="image id inside the manifest")
    p.add_argument(
        "--stride", type=int, default=4,
        help="source pixels per grid cell (default: 4)",
    )
    p.add_argument(
        "--sigma", type=float, default=1.0,
        help="Gaussian width in grid cells (default: 1.0)",
    )
    p.add_argument("--out", required=True, help="density grid JSON path")
    p.set_defaults(func=cmd_render_density)

    p = sub.add_parser(
        "ttn-plan", help="test-time normalization tiling plan for a query image"
    )
    p.add_argument("--manifest", required=True, help="annotation manifest JSON")
    p.add_argument("--image-id", required=True, help="image id inside the manifest")
    p.add_argument(
        "--tiles-M", dest="tiles_m", type=int, default=8,
        help="tiles per side when normalizing (default: 8)",
    )
    p.add_argument(
        "--threshold-T", dest="threshold_t", type=float, default=0.0002,
        help="reference-to-query area ratio threshold (default: 0.0002)",
    )
    p.add_argument("--out", help="plan JSON path (default: stdout)")
    p.set_defaults(func=cmd_ttn_plan)

    p = sub.add_parser(
        "demo-recipe",
        help="train the four ablation settings and emit the comparison table",
    )
    p.add_argument("--config", help="demo config JSON (defaults are checked in)")
    p.add_argument("--seeds", help="comma-separated seed list (default: config seeds)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_demo_recipe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ZeroCountError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ZERO_COUNT
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
