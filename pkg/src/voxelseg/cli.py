"""Command line entry points.

Subcommands cover the full workflow: phantom generation, dataset
augmentation, training, prediction, evaluation, gradient checking, and
metric-curve smoothing.  Failures are reported as a single `error: <message>`
line on stderr with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .adversarial import CriticConfig
from .augment import ElasticParams, build_augmented_dataset
from .gradcheck import format_results, run_gradient_suite
from .models import ModelConfig
from .optim import OptimConfig
from .training import TrainRun, evaluate, predict, smooth_curve, train
from .volume_io import PhantomSpec, generate_phantom, read_manifest, write_manifest, write_volume


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"dims must look like WxHxZ, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"dims must be integers, got {text!r}") from None
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {text!r}")
    return dims


def _parse_pair(text: str, cast, flag: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"{flag} wants two comma-separated values, got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError:
        raise ValueError(f"{flag} could not parse {text!r}") from None


def _cmd_phantom_gen(args) -> int:
    dims = _parse_dims(args.dims)
    if args.splits:
        try:
            counts = [int(p) for p in args.splits.split(",")]
        except ValueError:
            raise ValueError(f"--splits wants integer counts, got {args.splits!r}") from None
        if len(counts) != 3 or min(counts) < 0:
            raise ValueError(f"--splits wants train,validation,test counts, got {args.splits!r}")
        if sum(counts) != args.count:
            raise ValueError(f"--splits sums to {sum(counts)} but --count is {args.count}")
        plan = list(zip(("train", "validation", "test"), counts))
    else:
        plan = [("train", args.count)]
    os.makedirs(args.out, exist_ok=True)
    rows = []
    index = 0
    for split, n in plan:
        for _ in range(n):
            spec = PhantomSpec(seed=args.seed + index, dims=dims, layer_count=args.layers,
                               pocket_count=_parse_pair(args.pockets, int, "--pockets"),
                               pocket_radius=_parse_pair(args.radius, float, "--radius"),
                               noise_sigma=args.noise)
            image, mask = generate_phantom(spec)
            stem = f"phantom_{index:03d}"
            write_volume(os.path.join(args.out, stem + "_img"), image, kind="image")
            write_volume(os.path.join(args.out, stem + "_gt"), mask, kind="mask")
            rows.append({"image_path": stem + "_img", "annotation_paths": [stem + "_gt"],
                         "split": split})
            index += 1
    manifest_path = os.path.join(args.out, "manifest.jsonl")
    write_manifest(manifest_path, rows)
    print(f"wrote {index} phantoms and {manifest_path}")
    return 0


def _cmd_augment(args) -> int:
    manifest = read_manifest(args.manifest)
    elastic = ElasticParams(sigma=args.sigma, points=args.points)
    path = build_augmented_dataset(manifest, args.multiplicity, args.seed, args.out,
                                   _parse_dims(args.dims), elastic)
    print(f"wrote {path}")
    return 0


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def _cmd_train(args) -> int:
    with open(args.config, encoding="utf-8") as f:
        cfg = json.load(f)
    for key in ("run", "model"):
        if key not in cfg:
            raise ValueError(f"{args.config}: missing top-level {key!r} section")
    base = os.path.dirname(os.path.abspath(args.config))
    run_kw = dict(cfg["run"])
    for key in ("manifest_path", "out_dir"):
        if key not in run_kw:
            raise ValueError(f"{args.config}: run section needs {key!r}")
        run_kw[key] = _resolve(base, run_kw[key])
    if args.deterministic:
        run_kw["deterministic"] = True
    run = TrainRun(**run_kw)
    model_cfg = ModelConfig(**cfg["model"])
    optim_cfg = OptimConfig(**(cfg.get("optim") or {}))
    critic_cfg = CriticConfig(**cfg["adversarial"]) if cfg.get("adversarial") else None
    result = train(run, model_cfg, optim_cfg, critic_cfg)
    print(f"trained {run.variant} for {result.epochs_run} epochs into {result.out_dir}")
    if result.best_epoch is not None:
        print(f"best jaccard {result.best_jaccard:.6f} at epoch {result.best_epoch}")
    for split, peak in result.peaks.items():
        print(f"{split} peak jaccard {peak['raw']['jaccard']:.6f} at epoch "
              f"{peak['raw']['epoch']:.0f} (smoothed {peak['smoothed']['jaccard']:.6f})")
    return 0


def _cmd_predict(args) -> int:
    net_path, full_path = predict(args.checkpoint, args.input, args.out)
    print(f"wrote {net_path} and {full_path}")
    return 0


def _cmd_evaluate(args) -> int:
    dims = _parse_dims(args.dims) if args.dims else None
    text = evaluate(args.pred, args.gt, dims)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradient_suite(float64=args.f64, seeds=range(args.seeds),
                                 include_model=not args.skip_model)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


def _cmd_smooth(args) -> int:
    smooth_curve(args.csv_in, args.out, args.window)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelseg",
        description="volumetric segmentation: phantoms, augmentation, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate layered phantom volumes and a manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", default="32x32x17", help="WxHxZ")
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default=None, help="train,validation,test counts (default: all train)")
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--pockets", default="2,5", help="min,max pockets per phantom")
    p.add_argument("--radius", default="2.5,5.0", help="min,max pocket radius in voxels")
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=_cmd_phantom_gen)

    p = sub.add_parser("augment", help="build an augmented copy of a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--multiplicity", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", default="32x32x17", help="network input dims WxHxZ")
    p.add_argument("--sigma", type=float, default=10.0, help="elastic displacement sigma")
    p.add_argument("--points", type=int, default=6, help="elastic control points per axis")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="run a training schedule from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--deterministic", action="store_true",
                   help="force the deterministic flag in the run config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write probability volumes for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output base path (suffixes _net and _full)")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score a probability volume against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", action="append", required=True, help="repeatable, one per author")
    p.add_argument("--dims", default=None, help="expected full dims WxHxZ")
    p.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    p.add_argument("--f64", action="store_true", help="check in float64 at tighter bounds")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--skip-model", dest="skip_model", action="store_true")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("smooth", help="window-average a metrics CSV")
    p.add_argument("--in", dest="csv_in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=200)
    p.set_defaults(func=_cmd_smooth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # uniform contract for scripted callers
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
