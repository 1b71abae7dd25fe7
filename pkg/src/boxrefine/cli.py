"""Command-line surface: dataset synthesis, training, refinement,
evaluation, distance-bound sweeps and latency benchmarking.

Every command is deterministic given its configuration and seed. A config
file is flat ``key = value`` text whose keys are the flag names with
underscores; explicit flags override file values.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluate, kitti
from .checkpoint import load_checkpoint
from .codec import CLASS_ANCHORS
from .geometry import Box3D, Detection
from .network import build_model
from .pipeline import CLASS_REGIONS, AugmentConfig, crop_cylinder, refine_detections, resample_fixed
from .network import forward_batch
from .synthetic import LocalizerSpec, SceneSpec, simulate_localizer, write_synthetic_dataset
from .training import build_object_bank, train_model

# paper-scale training regime; desk-scale commands default to batch 64
PAPER_BATCH = 512
PAPER_LR = 5e-4


class CommandError(Exception):
    """A command failed; main() reports it and exits nonzero."""


@dataclass
class RunConfig:
    """Default run configuration; model flags source their defaults here.

    ``batch`` carries the paper-scale regime; the train/sweep commands
    default their flag to the desk-scale 64 instead.
    """

    obj_class: str = "car"
    dist_bound: float = 0.15
    mechanisms: str = "centering"
    n_bins: int = 12
    n_points: int = 256
    batch: int = PAPER_BATCH
    lr: float = PAPER_LR
    iters: int = 10000
    seed: int = 0
    threads: int = 0
    dataset: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None
    report: str | None = None


DEFAULTS = RunConfig()


def _parse_widths(text: str):
    return tuple(int(v) for v in text.split(",") if v)


def _parse_mechanisms(text: str):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _parse_floats(text: str):
    return tuple(float(v) for v in text.split(",") if v)


def _read_config_file(path):
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_file(parser: argparse.ArgumentParser, args: list[str]):
    """Pre-scan for --config and fold file values in as typed defaults."""
    if "--config" not in args:
        return
    idx = args.index("--config")
    if idx + 1 >= len(args):
        return  # argparse will complain
    values = _read_config_file(args[idx + 1])
    by_dest = {action.dest: action for action in parser._actions}
    defaults = {}
    for key, raw in values.items():
        action = by_dest.get(key)
        if action is None:
            raise CommandError(f"config key {key!r} is not a recognized option")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes")
        elif action.type is not None:
            defaults[key] = action.type(raw)
        else:
            defaults[key] = raw
    parser.set_defaults(**defaults)


def _load_model(path, expect_class=None):
    model, meta, opt_state = load_checkpoint(path)
    if expect_class is not None and model.obj_class != expect_class:
        raise CommandError(
            f"checkpoint {path} was trained for class {model.obj_class!r}, "
            f"not {expect_class!r}"
        )
    return model, meta, opt_state


def _region_for(args) -> "SamplingRegion":
    return CLASS_REGIONS[args.obj_class]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"{out} exists and is not empty (use --force)")
    spec = SceneSpec(
        n_objects=args.objects,
        obj_class=args.obj_class,
        extent=args.extent,
        points_per_object=args.points_per_object,
        ground_density=args.ground_density,
        clutter=args.clutter,
    )
    scenes = write_synthetic_dataset(out, args.scenes, spec, seed=args.seed)
    n_objects = sum(len(s.ground_truths) for s in scenes)
    print(f"wrote {len(scenes)} scenes, {n_objects} objects to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    scenes = kitti.load_dataset(args.dataset)
    region = _region_for(args)
    bank = build_object_bank(scenes, args.obj_class, region)
    if len(bank) == 0:
        raise CommandError(f"dataset {args.dataset} has no usable {args.obj_class} objects")

    opt_state = None
    start_iteration = 0
    if args.resume:
        model, meta, opt_state = _load_model(args.checkpoint, args.obj_class)
        start_iteration = meta["iteration"]
        if args.seed != meta["seed"]:
            print(
                f"warning: resuming with seed {args.seed}, checkpoint was {meta['seed']}",
                file=sys.stderr,
            )
    else:
        model = build_model(
            obj_class=args.obj_class,
            mechanisms=_parse_mechanisms(args.mechanisms),
            dist_bound=args.dist_bound,
            n_bins=args.nr_bins,
            point_widths=_parse_widths(args.point_widths),
            head_widths=_parse_widths(args.head_widths),
            seed=args.seed,
            dtype=np.float32,
        )
    cfg = AugmentConfig(dist_bound=args.dist_bound, n_points=args.n_points, region=region)

    log_stream = None
    if args.log:
        mode = "a" if args.resume else "w"
        log_stream = open(args.log, mode)
    try:
        train_model(
            model,
            bank,
            cfg,
            iterations=args.iters,
            batch_size=args.batch,
            lr=args.lr,
            seed=args.seed,
            optimizer=args.optimizer,
            opt_state=opt_state,
            start_iteration=start_iteration,
            log_stream=log_stream,
            checkpoint_path=args.checkpoint,
            ckpt_every=args.ckpt_every,
            progress_every=args.progress_every,
            fixed_batch=args.fixed_batch,
        )
    finally:
        if log_stream is not None:
            log_stream.close()
    print(f"trained {args.iters - start_iteration} iterations -> {args.checkpoint}")
    return 0


# ---------------------------------------------------------------------------
# refine
# ---------------------------------------------------------------------------

def _detections_for_scene(scene, args, rng):
    if args.detections:
        pred_path = Path(args.detections) / f"{scene.scene_id}.txt"
        if not pred_path.exists():
            return []
        calib = kitti.read_calib(Path(args.dataset) / "calib" / f"{scene.scene_id}.txt")
        return kitti.read_predictions(pred_path, calib)
    spec = LocalizerSpec(
        noise=args.noise,
        noise_scale=args.noise_scale,
        fn_rate=args.fn_rate,
        fp_rate=args.fp_rate,
    )
    return simulate_localizer(scene, spec, rng)


def _fallback_box(location, obj_class) -> Box3D:
    h, w, l = CLASS_ANCHORS[obj_class]
    return Box3D(center=location, size=(h, w, l), yaw=0.0)


def cmd_refine(args) -> int:
    model, _, _ = _load_model(args.checkpoint, args.obj_class)
    scenes = kitti.load_dataset(args.dataset)
    region = _region_for(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    calib = kitti.Calibration.nominal()

    def process(item):
        index, scene = item
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, index)))
        detections = _detections_for_scene(scene, args, rng)
        result = refine_detections(
            detections, scene.points, model, region, n_points=args.n_points,
            seed=args.seed + index,
        )
        written = []
        for det, ok in zip(result.detections, result.refined):
            box = det.box if ok else _fallback_box(det.location, args.obj_class)
            written.append(Detection(location=det.location, score=det.score, box=box))
        return scene.scene_id, written, sum(1 for ok in result.refined if not ok)

    threads = args.threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(process, enumerate(scenes)))

    unrefined_total = 0
    for scene_id, detections, unrefined in results:
        kitti.write_predictions(out / f"{scene_id}.txt", detections, calib, args.obj_class)
        unrefined_total += unrefined
    total = sum(len(d) for _, d, _ in results)
    print(f"refined {total - unrefined_total}/{total} detections -> {out}")
    if unrefined_total:
        print(f"{unrefined_total} detections passed through unrefined (empty crop)", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_predictions_dir(scenes, pred_dir, dataset_root):
    calib_dir = Path(dataset_root) / "calib"
    predictions = {}
    for scene in scenes:
        path = Path(pred_dir) / f"{scene.scene_id}.txt"
        if not path.exists():
            predictions[scene.scene_id] = []
            continue
        calib = kitti.read_calib(calib_dir / f"{scene.scene_id}.txt")
        predictions[scene.scene_id] = kitti.read_predictions(path, calib)
    return predictions


def cmd_eval(args) -> int:
    scenes = kitti.load_dataset(args.dataset)
    predictions = _load_predictions_dir(scenes, args.predictions, args.dataset)
    rows = []
    for obj_class in _parse_mechanisms(args.classes):
        rows.extend(
            evaluate.evaluate_class(
                scenes,
                predictions,
                obj_class,
                iou_threshold=args.iou_threshold,
                levels=_parse_mechanisms(args.levels),
            )
        )
    text = evaluate.format_report(rows)
    sys.stdout.write(text)
    if args.report:
        evaluate.write_report(args.report, rows)
    return 0


# ---------------------------------------------------------------------------
# sweep-dist
# ---------------------------------------------------------------------------

def cmd_sweep_dist(args) -> int:
    bounds = _parse_floats(args.bounds)
    noise_levels = _parse_floats(args.noise_levels)
    if not bounds:
        raise CommandError("--bounds must list at least one value")
    if not noise_levels:
        raise CommandError("--noise-levels must list at least one value")
    train_scenes = kitti.load_dataset(args.dataset)
    eval_scenes = kitti.load_dataset(args.eval_dataset or args.dataset)
    region = _region_for(args)
    bank = build_object_bank(train_scenes, args.obj_class, region)
    threshold = evaluate.CLASS_IOU_THRESHOLDS[args.obj_class]

    checkpoints = _parse_mechanisms(args.checkpoints) if args.checkpoints else ()
    if checkpoints and len(checkpoints) != len(bounds):
        raise CommandError("--checkpoints must match --bounds one to one")

    rows = []
    for bi, bound in enumerate(bounds):
        if checkpoints:
            model, _, _ = _load_model(checkpoints[bi], args.obj_class)
        else:
            model = build_model(
                obj_class=args.obj_class,
                mechanisms=_parse_mechanisms(args.mechanisms),
                dist_bound=bound,
                n_bins=args.nr_bins,
                point_widths=_parse_widths(args.point_widths),
                head_widths=_parse_widths(args.head_widths),
                seed=args.seed,
                dtype=np.float32,
            )
            cfg = AugmentConfig(dist_bound=bound, n_points=args.n_points, region=region)
            print(f"training dist_bound={bound} ...", file=sys.stderr)
            train_model(
                model, bank, cfg, iterations=args.iters, batch_size=args.batch,
                lr=args.lr, seed=args.seed, progress_every=args.progress_every,
            )
        for noise in noise_levels:
            spec = LocalizerSpec(noise="uniform", noise_scale=noise)
            pairs = []
            for si, scene in enumerate(eval_scenes):
                rng = np.random.default_rng(np.random.SeedSequence((args.seed, 100 + si)))
                detections = simulate_localizer(scene, spec, rng)
                result = refine_detections(
                    detections, scene.points, model, region,
                    n_points=args.n_points, seed=args.seed + si,
                )
                gts = [g.box for g in scene.ground_truths if g.obj_class == args.obj_class]
                preds = [d for d in result.detections if d.box is not None]
                pairs.append((gts, preds))
            value = evaluate.ratio(pairs, threshold)
            rows.append((bound, noise, value))

    lines = ["# dist_bound noise ratio"]
    lines += [f"{b:.4f} {n:.4f} {v:.6f}" for b, n, v in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    model, _, _ = _load_model(args.checkpoint, args.obj_class)
    scenes = kitti.load_dataset(args.dataset)
    region = _region_for(args)
    scene = max(scenes, key=lambda s: len(s.ground_truths))
    rng = np.random.default_rng(args.seed)
    detections = simulate_localizer(
        scene, LocalizerSpec(noise="uniform", noise_scale=0.1), rng
    )
    if not detections:
        raise CommandError(f"no objects in {args.dataset} to benchmark against")
    originals = list(detections)
    while len(detections) < args.detections:
        base = originals[len(detections) % len(originals)]
        jitter = rng.uniform(-0.05, 0.05, size=3)
        detections.append(Detection(location=base.location + jitter, score=base.score))
    detections = detections[: args.detections]

    def sample_phase():
        crops = []
        for det in detections:
            crop = crop_cylinder(scene.points, det.location, region)
            if len(crop) == 0:
                crop = np.zeros((1, 3))
            crops.append(resample_fixed(crop - det.location, args.n_points,
                                        np.random.default_rng(0)).astype(np.float32))
        return crops

    def infer_phase(crops):
        forward_batch(np.stack(crops), model, region, args.n_points, np.random.default_rng(0))

    for _ in range(3):  # warmup
        infer_phase(sample_phase())
    sample_times, infer_times = [], []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        crops = sample_phase()
        t1 = time.perf_counter()
        infer_phase(crops)
        t2 = time.perf_counter()
        sample_times.append(t1 - t0)
        infer_times.append(t2 - t1)
    sample_ms = float(np.median(sample_times) * 1000)
    infer_ms = float(np.median(infer_times) * 1000)
    report = (
        f"objects: {len(detections)}\n"
        f"sampling (crop+resample): {sample_ms:.2f} ms\n"
        f"network inference: {infer_ms:.2f} ms\n"
        f"reference GPU timings for 20 objects: sampling 6.5 ms, "
        f"inference 5.5 ms (one transform stage) - reference only, not asserted\n"
    )
    sys.stdout.write(report)
    if args.report:
        Path(args.report).write_text(report)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--class", dest="obj_class", default=DEFAULTS.obj_class,
                     choices=sorted(CLASS_ANCHORS), help="object class")
    sub.add_argument("--seed", type=int, default=DEFAULTS.seed)
    sub.add_argument("--threads", type=int, default=DEFAULTS.threads, help="0 = all cores")


def _add_model_flags(sub, default_batch=64):
    sub.add_argument("--dist-bound", type=float, default=DEFAULTS.dist_bound,
                     help="max proposal-to-truth distance the model corrects")
    sub.add_argument("--mechanisms", default=DEFAULTS.mechanisms,
                     help="comma list from translation,centering,rotation,scaling")
    sub.add_argument("--nr-bins", type=int, default=DEFAULTS.n_bins,
                     help="rotation bins over 180 deg")
    sub.add_argument("--n-points", type=int, default=DEFAULTS.n_points)
    sub.add_argument("--point-widths", default="64,128,256")
    sub.add_argument("--head-widths", default="128")
    sub.add_argument("--batch", type=int, default=default_batch,
                     help=f"desk-scale default; paper regime is {DEFAULTS.batch}")
    sub.add_argument("--lr", type=float, default=DEFAULTS.lr)
    sub.add_argument("--iters", type=int, default=DEFAULTS.iters)
    sub.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    sub.add_argument("--progress-every", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxrefine",
        description="3D bounding-box refinement from raw LiDAR point clouds",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic KITTI-layout dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--extent", type=float, default=30.0)
    p.add_argument("--points-per-object", type=int, default=220)
    p.add_argument("--ground-density", type=float, default=0.05)
    p.add_argument("--clutter", type=float, default=30.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train a refinement model")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", help="loss log path")
    p.add_argument("--ckpt-every", type=int, default=1000)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--fixed-batch", action="store_true",
                   help="repeat the first batch every iteration (overfit sanity)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("refine", help="refine detections into oriented boxes")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="predictions output directory")
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--detections", help="directory of KITTI prediction files")
    p.add_argument("--noise", choices=("uniform", "gaussian"), default="uniform")
    p.add_argument("--noise-scale", type=float, default=0.15)
    p.add_argument("--fn-rate", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_refine)

    p = subs.add_parser("eval", help="evaluate predictions against ground truth")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--report")
    p.add_argument("--classes", default="car")
    p.add_argument("--levels", default="all,moderate")
    p.add_argument("--iou-threshold", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("sweep-dist", help="train/evaluate across distance bounds")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--eval-dataset")
    p.add_argument("--bounds", required=True, help="comma list of dist bounds")
    p.add_argument("--noise-levels", default="0.15")
    p.add_argument("--checkpoints", help="optional comma list of trained checkpoints")
    p.add_argument("--report")
    p.set_defaults(func=cmd_sweep_dist)

    p = subs.add_parser("bench", help="latency of sampling and inference")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--detections", type=int, default=20)
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] in {"synth", "train", "refine", "eval", "sweep-dist", "bench"}:
            sub = {a.dest: a for a in parser._actions}["command"].choices[argv[0]]
            _apply_config_file(sub, argv[1:])
        args = parser.parse_args(argv)
        return args.func(args)
    except (CommandError, OSError, kitti.FormatError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
