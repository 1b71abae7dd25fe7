"""Acceptance criteria, one test per criterion, each printing a PASS line.

The two end-to-end training criteria (5 and 6) dominate the runtime: they
train full models at desk scale (10k iterations, batch 64) and take the
better part of an hour on a 2-core CPU. Run with `-v -s` to watch the
per-criterion lines appear.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from boxrefine import codec, evaluate, kitti
from boxrefine import network as nw
from boxrefine.cli import main as cli_main
from boxrefine.geometry import Box3D, Detection, iou_3d, rotate_z, wrap_angle
from boxrefine.pipeline import (
    CLASS_REGIONS,
    AugmentConfig,
    TrainingSample,
    make_training_sample,
    refine_detections,
)
from boxrefine.synthetic import LocalizerSpec, SceneSpec, generate_scene, simulate_localizer
from boxrefine.training import build_object_bank, train_model
from conftest import monte_carlo_iou, random_overlapping_pair

DATA = Path(__file__).parent / "data"
REGION = CLASS_REGIONS["car"]
ANCHOR = codec.CLASS_ANCHORS["car"]


def report(number, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {number:2d} {name}: {status} ({detail})", flush=True)
    assert ok, f"criterion {number} {name}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        model = nw.build_model(
            "car", mechanisms=("centering",), dist_bound=0.15,
            point_widths=(8, 16), head_widths=(16,), seed=int(rng.integers(0, 2**31)),
        )
        for arr in model.param_arrays():
            arr += rng.normal(scale=0.05, size=arr.shape)
        cloud = rng.normal(scale=0.7, size=(56, 3)) + [0.05, -0.02, 0.3]
        target = TrainingSample(
            points=cloud,
            location=rng.uniform(-0.12, 0.12, size=3),
            yaw=rng.uniform(0, np.pi),
            size=np.asarray(ANCHOR) * rng.uniform(0.9, 1.1, size=3),
        )
        pred, state = nw.refiner_forward(cloud, model, REGION, 32, np.random.default_rng(0))
        plan = state.plan[0]
        _, d_head, d_stage = nw.multitask_loss(pred, target, model)
        grads = nw.backward_batch(
            state, d_head[None], [d[None] if d is not None else None for d in d_stage]
        )

        def loss():
            p, _ = nw.refiner_forward(cloud, model, REGION, 32, plan=plan)
            return nw.multitask_loss(p, target, model)[0].total

        for arr, grad in zip(model.param_arrays(), grads.arrays()):
            flat, gflat = arr.ravel(), grad.ravel()
            for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                best = np.inf
                for h in (1e-3, 1e-4, 1e-5):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    up = loss()
                    flat[idx] = orig - h
                    down = loss()
                    flat[idx] = orig
                    fd = (up - down) / (2 * h)
                    best = min(best, abs(fd - gflat[idx]) / max(1e-7, abs(fd) + abs(gflat[idx])))
                    if best < 1e-4:
                        break
                worst = max(worst, best)
    elapsed = time.perf_counter() - t0
    report(
        1, "gradient correctness", worst < 1e-4 and elapsed < 60,
        f"worst rel err {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. codec exactness
# ---------------------------------------------------------------------------

def test_criterion_2_codec_exactness():
    bounds = codec.TransformBounds.from_dist_bound(0.15)
    reg = codec.RegressionBounds.from_transform(bounds)
    bins = codec.RotationBins(12)
    rng = np.random.default_rng(7)
    ln3 = np.log(3.0)
    checks = []

    # closed-form decode identities
    checks.append(abs(codec.decode_translation([ln3, 0, 0], bounds)[0] - 0.075) < 1e-12)
    checks.append(np.all(codec.decode_translation([0, 0, 0], bounds) == 0.0))
    checks.append(abs(codec.decode_rotation_angle(ln3, bounds) - np.pi / 8) < 1e-12)
    checks.append(abs(codec.decode_scale([ln3, 0.0], bounds)[0] - np.sqrt(2)) < 1e-12)
    checks.append(abs(codec.decode_location([ln3, 0, 0], reg)[0] - 0.0375) < 1e-12)
    checks.append(
        np.allclose(codec.decode_size([0, 0, 0], ANCHOR), [1.50, 1.57, 3.33], atol=1e-15)
    )
    checks.append(abs(codec.decode_size([0, 0, np.log(2)], ANCHOR)[2] - 6.66) < 1e-12)

    # open-interval bounds under fuzzing
    for t in rng.uniform(-100, 100, size=300):
        checks.append(abs(codec.decode_translation([t, 0, 0], bounds)[0]) < 0.15)
        checks.append(abs(codec.decode_rotation_angle(t, bounds)) < np.pi / 4)
        s_xy, s_z = codec.decode_scale([t, -t], bounds)
        checks.append(0.5 < s_xy < 2.0 and 0.5 < s_z < 2.0)
        checks.append(abs(codec.decode_location([t, 0, 0], reg)[0]) < 0.075)

    # round trips within 1e-9
    rt = True
    for theta in rng.uniform(0, np.pi, size=300):
        index, residual = codec.encode_rotation(theta, bins)
        logits = np.zeros(12)
        logits[index] = 10.0
        reg_vec = np.zeros(12)
        reg_vec[index] = residual
        rt &= abs(codec.decode_rotation(logits, reg_vec, bins) - theta) < 1e-9
    for size in rng.uniform(0.3, 5.0, size=(200, 3)):
        rt &= np.all(np.abs(codec.decode_size(codec.encode_size(size, ANCHOR), ANCHOR) - size) < 1e-9)
    for off in rng.uniform(-0.074, 0.074, size=(200, 3)):
        rt &= np.all(np.abs(codec.decode_location(codec.encode_location(off, reg), reg) - off) < 1e-9)
    checks.append(rt)

    # analytic derivatives vs central differences (step 1e-4, rel < 1e-5)
    deriv_ok = True
    for t in rng.uniform(-6, 6, size=100):
        pairs = [
            (lambda u: codec.decode_translation([u, 0, 0], bounds)[0],
             lambda u: codec.decode_translation_grad([u, 0, 0], bounds)[0]),
            (lambda u: codec.decode_rotation_angle(u, bounds),
             lambda u: codec.decode_rotation_angle_grad(u, bounds)),
            (lambda u: codec.decode_scale([u, 0.0], bounds)[0],
             lambda u: codec.decode_scale_grad([u, 0.0], bounds)[0]),
            (lambda u: codec.decode_location([u, 0, 0], reg)[0],
             lambda u: codec.decode_location_grad([u, 0, 0], reg)[0]),
            (lambda u: codec.decode_size([u, 0, 0], ANCHOR)[0],
             lambda u: codec.decode_size_grad([u, 0, 0], ANCHOR)[0]),
        ]
        for fn, grad in pairs:
            fd = (fn(t + 1e-4) - fn(t - 1e-4)) / 2e-4
            an = grad(t)
            deriv_ok &= abs(fd - an) / max(1e-6, abs(fd) + abs(an)) < 1e-5
    checks.append(deriv_ok)

    report(2, "codec exactness", all(checks), f"{len(checks)} checks")


# ---------------------------------------------------------------------------
# 3. IoU oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_3_iou_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    for i in range(100):
        a, b = random_overlapping_pair(rng)
        exact = iou_3d(a, b)
        estimate = monte_carlo_iou(a, b, n_samples=1_000_000, seed=i)
        worst = max(worst, abs(exact - estimate))
    elapsed = time.perf_counter() - t0
    report(
        3, "IoU oracle equivalence", worst < 5e-3 and elapsed < 300,
        f"worst |exact - MC| {worst:.2e} over 100 pairs, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 4. augmentation contract
# ---------------------------------------------------------------------------

def _oracle_box_from_corners(gt, scales, r_z, offset):
    from boxrefine.geometry import box_corners

    corners = box_corners(gt) - gt.center
    corners = rotate_z(corners, -gt.yaw)
    corners = corners * scales
    corners = rotate_z(corners, gt.yaw + r_z)
    corners = corners + offset
    center = corners.mean(axis=0)
    w = float(np.linalg.norm(corners[1][:2] - corners[0][:2]))
    edge = corners[3][:2] - corners[0][:2]
    l = float(np.linalg.norm(edge))
    h = float(corners[4][2] - corners[0][2])
    return Box3D(center=center, size=(h, w, l), yaw=float(np.arctan2(edge[0], edge[1])))


def test_criterion_4_augmentation_contract():
    cfg = AugmentConfig(dist_bound=0.15, n_points=128, region=REGION)
    scenes = [
        generate_scene(SceneSpec(n_objects=5), np.random.default_rng((40, i)), f"{i:06d}")
        for i in range(20)
    ]
    objects = [(s, gt.box) for s in scenes for gt in s.ground_truths]
    rng = np.random.default_rng(41)
    violations = 0
    good_iou = 0
    total = 10_000
    for k in range(total):
        scene, gt = objects[k % len(objects)]
        sample = make_training_sample(scene.points, gt, cfg, rng)
        gt_sizes = np.array([gt.h, gt.w, gt.l])
        ratios = sample.size / gt_sizes
        jitter = wrap_angle(sample.yaw - gt.yaw)
        if np.any(np.abs(sample.location) > 0.15):
            violations += 1
        elif np.any(ratios < 0.9 - 1e-9) or np.any(ratios > 1.1 + 1e-9):
            violations += 1
        elif abs(jitter) > np.pi / 8 + 1e-9:
            violations += 1
        # recover the draws from the outputs and run the corner oracle
        scales = np.array([ratios[1], ratios[2], ratios[0]])  # (s_x, s_y, s_z)
        oracle = _oracle_box_from_corners(gt, scales, jitter, sample.location)
        target_box = Box3D(center=sample.location, size=tuple(sample.size), yaw=sample.yaw)
        if iou_3d(target_box, oracle) >= 0.95:
            good_iou += 1
    frac = good_iou / total
    report(
        4, "augmentation contract", violations == 0 and frac >= 0.99,
        f"{violations} interval violations, reconstruction IoU>=0.95 on {frac:.2%}",
    )


# ---------------------------------------------------------------------------
# 7. metric correctness
# ---------------------------------------------------------------------------

def test_criterion_7_metric_correctness():
    def box_at(x):
        return Box3D(center=[x, 0, 0], size=(1.5, 1.6, 3.6), yaw=0.0)

    def det(box, score):
        return Detection(location=box.center, score=score, box=box)

    # hand-computed AP fixture: FP at 0.9 then TP at 0.8 over one GT -> 0.5
    gt = box_at(0)
    ap = evaluate.average_precision(
        [evaluate.match([gt], [det(box_at(50), 0.9), det(gt, 0.8)], 0.7)]
    )
    ap_ok = abs(ap - 0.5) < 1e-12

    # ratio fixture: 3 GT, 2 detected -> 2/3
    gts = [box_at(0), box_at(10), box_at(20)]
    ratio = evaluate.ratio([(gts, [det(gts[0], 0.9), det(gts[1], 0.8)])], 0.7)
    ratio_ok = abs(ratio - 2.0 / 3.0) < 1e-12

    # monotone-score invariance over 1000 random rescalings
    rng = np.random.default_rng(77)
    pool_gts = [box_at(x * 10.0) for x in range(6)]
    preds = [det(box_at(x * 10.0 + rng.uniform(-0.2, 0.2)), float(rng.uniform(0.1, 0.9)))
             for x in range(6)]
    preds += [det(box_at(200 + x * 10.0), float(rng.uniform(0.1, 0.9))) for x in range(4)]
    base = evaluate.average_precision([evaluate.match(pool_gts, preds, 0.7)])
    invariant = True
    for _ in range(1000):
        p_exp = float(rng.uniform(0.3, 3.0))
        b = float(rng.uniform(0.0, 0.5))
        rescaled = [
            Detection(location=p.location, score=(p.score**p_exp + b) / (1 + b), box=p.box)
            for p in preds
        ]
        value = evaluate.average_precision([evaluate.match(pool_gts, rescaled, 0.7)])
        invariant &= abs(value - base) < 1e-12
    report(
        7, "metric correctness", ap_ok and ratio_ok and invariant,
        f"AP fixture {ap:.3f}, ratio fixture {ratio:.3f}, 1000 rescalings invariant={invariant}",
    )


# ---------------------------------------------------------------------------
# 8. determinism of synth and train commands
# ---------------------------------------------------------------------------

def test_criterion_8_command_determinism(tmp_path):
    synth_args = ["--scenes", "4", "--objects", "4", "--seed", "17"]
    assert cli_main(["synth", "--out", str(tmp_path / "d1"), *synth_args]) == 0
    assert cli_main(["synth", "--out", str(tmp_path / "d2"), *synth_args]) == 0
    synth_ok = True
    for f in sorted((tmp_path / "d1").rglob("*.*")):
        twin = tmp_path / "d2" / f.relative_to(tmp_path / "d1")
        synth_ok &= f.read_bytes() == twin.read_bytes()

    train_args = [
        "--dataset", str(tmp_path / "d1"), "--mechanisms", "centering",
        "--iters", "25", "--batch", "8", "--point-widths", "8,16",
        "--head-widths", "16", "--seed", "5",
    ]
    assert cli_main(["train", "--checkpoint", str(tmp_path / "a.ckpt"), *train_args]) == 0
    assert cli_main(["train", "--checkpoint", str(tmp_path / "b.ckpt"), *train_args]) == 0
    train_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    report(
        8, "command determinism", synth_ok and train_ok,
        f"synth bitwise={synth_ok}, train bitwise={train_ok}",
    )


# ---------------------------------------------------------------------------
# 9. latency report
# ---------------------------------------------------------------------------

def test_criterion_9_latency_report(tmp_path, capsys):
    assert cli_main(["synth", "--out", str(tmp_path / "ds"), "--scenes", "2",
                     "--objects", "10", "--seed", "3"]) == 0
    assert cli_main([
        "train", "--dataset", str(tmp_path / "ds"), "--checkpoint", str(tmp_path / "m.ckpt"),
        "--mechanisms", "centering", "--iters", "5", "--batch", "8",
        "--point-widths", "8,16", "--head-widths", "16",
    ]) == 0
    report_path = tmp_path / "bench.txt"
    code = cli_main([
        "bench", "--dataset", str(tmp_path / "ds"), "--checkpoint", str(tmp_path / "m.ckpt"),
        "--detections", "20", "--repeats", "100", "--report", str(report_path),
    ])
    capsys.readouterr()
    text = report_path.read_text()
    ok = (
        code == 0
        and "sampling (crop+resample):" in text
        and "network inference:" in text
        and "reference GPU timings" in text
        and "6.5" in text and "5.5" in text
    )
    sampling_line = [l for l in text.splitlines() if l.startswith("sampling")][0]
    report(9, "latency report", ok, sampling_line)


# ---------------------------------------------------------------------------
# 10. format fidelity
# ---------------------------------------------------------------------------

def test_criterion_10_format_fidelity(tmp_path):
    import json

    calib = kitti.read_calib(DATA / "golden_calib.txt")
    gts = kitti.read_labels(DATA / "golden_label.txt", calib)
    expected = json.loads((DATA / "golden_boxes.json").read_text())
    golden_ok = len(gts) == len(expected)
    for gt, exp in zip(gts, expected):
        golden_ok &= gt.obj_class == exp["class"]
        golden_ok &= bool(np.allclose(gt.box.center, exp["center"], atol=1e-9))
        golden_ok &= abs(gt.box.yaw - exp["yaw"]) < 1e-9

    rng = np.random.default_rng(5)
    nominal = kitti.Calibration.nominal()
    detections = []
    for _ in range(100):
        box = Box3D(
            center=rng.uniform(-30, 30, size=3),
            size=tuple(rng.uniform(0.5, 4.0, size=3)),
            yaw=rng.uniform(-np.pi, np.pi),
        )
        detections.append(Detection(location=box.center, score=float(rng.uniform(0, 1)), box=box))
    path = tmp_path / "preds.txt"
    kitti.write_predictions(path, detections, nominal, "car")
    back = kitti.read_predictions(path, nominal)
    rt_ok = len(back) == 100
    for a, b in zip(detections, back):
        rt_ok &= bool(np.allclose(a.box.center, b.box.center, atol=2e-6))
        rt_ok &= bool(np.allclose(a.box.size, b.box.size, atol=1e-6))
        rt_ok &= abs(a.score - b.score) < 1e-6

    velo_ok = True
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    velo_ok &= kitti.read_velodyne(empty).shape == (0, 3)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 17)
    try:
        kitti.read_velodyne(bad)
        velo_ok = False
    except kitti.FormatError:
        pass
    report(
        10, "format fidelity", golden_ok and rt_ok and velo_ok,
        f"golden={golden_ok}, prediction round trip={rt_ok}, velodyne errors={velo_ok}",
    )


# ---------------------------------------------------------------------------
# 5 & 6: end-to-end synthetic training runs (the slow part)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synthetic_world():
    spec = SceneSpec(n_objects=5)
    train_scenes = [
        generate_scene(spec, np.random.default_rng(np.random.SeedSequence((101, i))), f"{i:06d}")
        for i in range(500)
    ]
    val_scenes = [
        generate_scene(spec, np.random.default_rng(np.random.SeedSequence((202, i))), f"{i:06d}")
        for i in range(300)
    ]
    bank = build_object_bank(train_scenes, "car", REGION)
    loc_spec = LocalizerSpec(noise="uniform", noise_scale=0.15)
    val_detections = [
        simulate_localizer(scene, loc_spec, np.random.default_rng(np.random.SeedSequence((303, si))))
        for si, scene in enumerate(val_scenes)
    ]
    return bank, val_scenes, val_detections


def _train(bank, mechanisms, iterations, dist_bound=0.15):
    model = nw.build_model(
        "car", mechanisms=mechanisms, dist_bound=dist_bound,
        point_widths=(32, 64, 128), head_widths=(64,), seed=11, dtype=np.float32,
    )
    cfg = AugmentConfig(dist_bound=dist_bound, n_points=256, region=REGION)
    model, _, _ = train_model(
        model, bank, cfg, iterations=iterations, batch_size=64, lr=5e-4, seed=21,
        progress_every=2000,
    )
    return model


def _evaluate_model(model, val_scenes, val_detections):
    pairs = []
    per_axis_errors = []
    euclid_errors = []
    for si, (scene, detections) in enumerate(zip(val_scenes, val_detections)):
        result = refine_detections(
            detections, scene.points, model, REGION, n_points=256, seed=1000 + si
        )
        gts = [gt.box for gt in scene.ground_truths]
        pairs.append((gts, [d for d in result.detections if d.box is not None]))
        for det, ok, gt in zip(result.detections, result.refined, scene.ground_truths):
            if ok:
                err = det.box.center - gt.box.center
                per_axis_errors.append(np.mean(np.abs(err)))
                euclid_errors.append(np.linalg.norm(err))
    return (
        evaluate.ratio(pairs, 0.7),
        float(np.mean(per_axis_errors)),
        float(np.mean(euclid_errors)),
    )


@pytest.fixture(scope="module")
def trained_centering(synthetic_world):
    bank, _, _ = synthetic_world
    return _train(bank, ("centering",), 10_000)


@pytest.fixture(scope="module")
def centering_scores(synthetic_world, trained_centering):
    _, val_scenes, val_detections = synthetic_world
    return _evaluate_model(trained_centering, val_scenes, val_detections)


def test_criterion_5a_ratio_over_baseline(synthetic_world, centering_scores):
    bank, val_scenes, val_detections = synthetic_world
    # baseline: proposal center + anchor size + the training set's median yaw
    median_yaw = float(np.median([b.yaw % np.pi for b in bank.boxes]))
    baseline_pairs = []
    for scene, detections in zip(val_scenes, val_detections):
        gts = [gt.box for gt in scene.ground_truths]
        baseline = [
            Detection(location=d.location, score=d.score,
                      box=Box3D(center=d.location, size=ANCHOR, yaw=median_yaw))
            for d in detections
        ]
        baseline_pairs.append((gts, baseline))
    baseline_ratio = evaluate.ratio(baseline_pairs, 0.7)
    refined_ratio, _, _ = centering_scores
    report(
        5, "refined ratio over baseline (a)",
        refined_ratio >= baseline_ratio + 0.20,
        f"refined {refined_ratio:.3f} vs baseline {baseline_ratio:.3f} "
        f"(+{(refined_ratio - baseline_ratio) * 100:.0f}pp, need >= +20pp)",
    )


def test_criterion_5b_center_error(synthetic_world, trained_centering, centering_scores):
    _, val_scenes, _ = synthetic_world
    _, per_axis, euclid = centering_scores

    # zero-noise proposals must land within the same bound
    zero_spec = LocalizerSpec(noise="uniform", noise_scale=0.0)
    zero_errors = []
    for si, scene in enumerate(val_scenes[:25]):
        dets = simulate_localizer(scene, zero_spec, np.random.default_rng((404, si)))
        result = refine_detections(dets, scene.points, trained_centering, REGION,
                                   n_points=256, seed=2000 + si)
        for det, ok, gt in zip(result.detections, result.refined, scene.ground_truths):
            if ok:
                zero_errors.append(np.mean(np.abs(det.box.center - gt.box.center)))
    zero_err = float(np.mean(zero_errors))
    # input error reference: per-axis mean |uniform(-0.15, 0.15)| = 0.075 m
    report(
        5, "refined center error (b)",
        per_axis < 0.05 and zero_err <= 0.05,
        f"center err {per_axis:.4f} m/axis ({euclid:.4f} m euclidean) vs 0.075 input, "
        f"zero-noise err {zero_err:.4f}",
    )


def test_criterion_5c_mechanism_ordering(synthetic_world, centering_scores):
    bank, val_scenes, val_detections = synthetic_world
    refined_ratio, _, _ = centering_scores
    none_model = _train(bank, (), 10_000)
    none_ratio, _, _ = _evaluate_model(none_model, val_scenes, val_detections)
    report(
        5, "centering >= no-mechanism (c)",
        refined_ratio >= none_ratio,
        f"centering {refined_ratio:.3f} vs none {none_ratio:.3f}",
    )


def test_criterion_6_dist_bound_sweep(synthetic_world):
    bank, val_scenes, val_detections = synthetic_world
    ratios = {}
    for bound in (0.15, 0.60):
        model = _train(bank, ("centering",), 2_500, dist_bound=bound)
        ratios[bound], _, _ = _evaluate_model(model, val_scenes, val_detections)
    ok = ratios[0.15] >= ratios[0.60]
    report(
        6, "dist-bound sweep shape", ok,
        f"ratio(bound 0.15)={ratios[0.15]:.3f} >= ratio(bound 0.60)={ratios[0.60]:.3f}",
    )
