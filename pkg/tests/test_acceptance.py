"""Desk-scale acceptance checks, one test per release criterion.

Each test prints a PASS/FAIL line through the terminal summary so the whole
gate is readable at a glance.  The heavy criteria (the 20-seed gradient
sweep, the overfit and generalization runs, the 500-step adversarial run)
dominate the runtime; everything stays on one CPU.
"""

import json
import os
import time

import numpy as np

from test_ops_conv import conv3d_loop, conv_transpose3d_loop, maxpool3d_loop
from voxelseg import ops
from voxelseg.adversarial import CriticConfig, build_critic, wgan_train_step
from voxelseg.augment import (AUGMENT_KINDS, ElasticParams, apply_crop, apply_scale_up,
                              build_augmented_dataset, elastic_deform, sample_spec)
from voxelseg.cli import main
from voxelseg.gradcheck import CHECKS, run_gradient_suite
from voxelseg.metrics import (absolute_volume_difference, average_precision, dice,
                              evaluate_full, jaccard, precision_recall)
from voxelseg.models import build_model, forward, parameter_count, variant_config
from voxelseg.optim import AdamState, OptimConfig
from voxelseg.resample import (MaskVolume, Volume, resample_trilinear, sample_nearest,
                               sample_trilinear)
from voxelseg.tensor import Tensor, no_grad
from voxelseg.training import TrainRun, load_model, tensor_to_volume, train, volume_to_tensor
from voxelseg.volume_io import (PhantomSpec, generate_phantom, read_manifest, read_volume,
                                write_manifest, write_volume)


def _phantom_dataset(root, dims, specs):
    """Write one phantom pair per (split, seed) row and a manifest for them."""
    os.makedirs(root, exist_ok=True)
    rows = []
    for k, (split, seed) in enumerate(specs):
        image, mask = generate_phantom(PhantomSpec(seed=seed, dims=dims))
        write_volume(os.path.join(root, f"p{k}_img"), image)
        write_volume(os.path.join(root, f"p{k}_gt"), mask)
        rows.append({"image_path": f"p{k}_img", "annotation_paths": [f"p{k}_gt"],
                     "split": split, "author_tags": ["A1"]})
    path = os.path.join(root, "manifest.jsonl")
    write_manifest(path, rows)
    return path


def _csv_rows(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        return [dict(zip(header, (float(c) for c in line.split(","))))
                for line in fh if line.strip()]


def _spearman_against_time(values) -> float:
    v = np.asarray(values, dtype=np.float64)

    def rank(x):
        r = np.empty(x.size)
        r[np.argsort(x, kind="stable")] = np.arange(x.size)
        return r

    return float(np.corrcoef(rank(v), np.arange(v.size, dtype=np.float64))[0, 1])


def _ap_threshold_sweep(prob: Volume, gt: MaskVolume) -> float:
    """Exhaustive oracle: one precision/recall point per distinct score, with
    the prediction set {score >= t}, rectangle rule over recall."""
    scores = prob.voxels.reshape(-1).astype(np.float64)
    labels = gt.voxels.reshape(-1) > 0.5
    npos = int(labels.sum())
    ap = 0.0
    prev_rec = 0.0
    for t in np.unique(scores)[::-1]:
        sel = scores >= t
        picked = int(labels[sel].sum())
        prec = picked / int(sel.sum())
        rec = picked / npos
        ap += (rec - prev_rec) * prec
        prev_rec = rec
    return ap


def test_criterion_1_gradients(criterion_report):
    required = {"conv3d_same", "conv3d_valid", "conv_transpose3d", "maxpool3d",
                "batchnorm3d_train", "relu", "sigmoid", "bce_loss"}
    covered = required <= {name for name, _ in CHECKS}
    start = time.perf_counter()
    r32 = run_gradient_suite(float64=False, seeds=range(20), include_model=True)
    r64 = run_gradient_suite(float64=True, seeds=range(20), include_model=True)
    elapsed = time.perf_counter() - start
    worst32 = max(r.max_rel_err for r in r32)
    worst64 = max(r.max_rel_err for r in r64)
    ok = (covered
          and any(r.name == "model_m3" for r in r32)
          and any(r.name == "model_m3" for r in r64)
          and all(r.passed for r in r32 + r64)
          and worst32 < 1e-2 and worst64 < 1e-4
          and elapsed < 300.0)
    criterion_report(1, "finite-difference gradient checks, primitives and whole model", ok,
                     f"worst rel err {worst32:.1e} 32-bit / {worst64:.1e} 64-bit, {elapsed:.0f}s")
    assert ok


def test_criterion_2_kernel_oracles(criterion_report):
    start = time.perf_counter()
    worst = 0.0
    for draw in range(50):
        rng = np.random.default_rng(1000 + draw)
        n = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        padding = str(rng.choice(["same", "valid"]))
        d, h, w = (int(rng.integers(max(k, 4), 8)) for _ in range(3))
        x = rng.normal(size=(n, cin, d, h, w)).astype(np.float32)
        wt = rng.normal(size=(cout, cin, k, k, k)).astype(np.float32)
        b = rng.normal(size=cout).astype(np.float32)
        got = ops.conv3d(Tensor(x), Tensor(wt), Tensor(b), padding=padding, stride=stride)
        worst = max(worst, float(np.abs(got.data - conv3d_loop(x, wt, b, padding, stride)).max()))

        de, he, we = (int(rng.integers(2, 5)) for _ in range(3))
        xt = rng.normal(size=(n, cin, de, he, we)).astype(np.float32)
        wu = rng.normal(size=(cin, cout, 2, 2, 2)).astype(np.float32)
        got_t = ops.conv_transpose3d(Tensor(xt), Tensor(wu))
        worst = max(worst, float(np.abs(got_t.data - conv_transpose3d_loop(xt, wu)).max()))

        dp, hp, wp = (2 * int(rng.integers(1, 4)) for _ in range(3))
        xp = rng.normal(size=(n, cin, dp, hp, wp)).astype(np.float32)
        got_p = ops.maxpool3d(Tensor(xp))
        worst = max(worst, float(np.abs(got_p.data - maxpool3d_loop(xp)).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 120.0
    criterion_report(2, "convolution and pooling kernels against nested-loop oracles", ok,
                     f"50 draws, worst abs err {worst:.1e}, {elapsed:.0f}s")
    assert ok


def test_criterion_3_metric_oracles(criterion_report):
    dims = (8, 8, 4)
    w, h, z = dims
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    counting_exact = True
    worst_ap = 0.0
    worst_identity = 0.0
    for _ in range(1000):
        pred_bits = rng.uniform(size=(z, h, w)) > 0.5
        gt_bits = rng.uniform(size=(z, h, w)) > 0.5
        if not gt_bits.any():
            gt_bits[0, 0, 0] = True
        pred = MaskVolume(dims, pred_bits.astype(np.float32))
        gt = MaskVolume(dims, gt_bits.astype(np.float32))

        # brute force: literal set arithmetic over flat voxel indices
        p_set = set(np.flatnonzero(pred_bits).tolist())
        g_set = set(np.flatnonzero(gt_bits).tolist())
        tp = len(p_set & g_set)
        fp = len(p_set - g_set)
        fn = len(g_set - p_set)
        union = tp + fp + fn
        j = jaccard(pred, gt)
        d = dice(pred, gt)
        prec, rec = precision_recall(pred, gt)
        counting_exact &= j == (tp / union if union else 1.0)
        counting_exact &= d == (2 * tp / (2 * tp + fp + fn) if union else 1.0)
        counting_exact &= prec == (tp / (tp + fp) if tp + fp else 1.0)
        counting_exact &= rec == (tp / (tp + fn) if tp + fn else 0.0)
        counting_exact &= absolute_volume_difference(pred, gt) == abs(len(p_set) - len(g_set))
        worst_identity = max(worst_identity, abs(d - 2 * j / (1 + j)))

        prob = Volume(dims, rng.uniform(size=(z, h, w)).astype(np.float32))
        worst_ap = max(worst_ap, abs(average_precision(prob, gt) - _ap_threshold_sweep(prob, gt)))
    elapsed = time.perf_counter() - start
    ok = counting_exact and worst_ap <= 1e-9 and worst_identity <= 1e-9 and elapsed < 60.0
    criterion_report(3, "overlap metrics against set counting, AP against threshold sweep", ok,
                     f"1000 pairs, AP dev {worst_ap:.1e}, dice identity dev {worst_identity:.1e}, "
                     f"{elapsed:.0f}s")
    assert ok


def test_criterion_4_augmentation_invariants(criterion_report, tmp_path):
    image, mask = generate_phantom(PhantomSpec(seed=5, dims=(32, 28, 17)))

    s_img, s_mask = apply_scale_up(image, mask, 1.0)
    c_img, c_mask = apply_crop(image, mask, (0, 0, 0), image.dims)
    e_img, e_mask = elastic_deform(image, mask, ElasticParams(sigma=0.0), seed=3)
    identity_ok = all(np.array_equal(got.voxels, want.voxels) for got, want in
                      ((s_img, image), (s_mask, mask), (c_img, image), (c_mask, mask),
                       (e_img, image), (e_mask, mask)))

    rng = np.random.default_rng(11)
    n = 10_000
    tally = {kind: 0 for kind in AUGMENT_KINDS}
    for _ in range(n):
        tally[sample_spec(rng, image.dims).kind] += 1
    sigma = np.sqrt(n * 0.25 * 0.75)
    max_dev = max(abs(c - n / 4) for c in tally.values())
    freq_ok = max_dev < 4 * sigma

    w, h, z = image.dims
    aspect_ok = True
    for _ in range(2000):
        spec = sample_spec(rng, image.dims, kinds=("crop",))
        sx, sy, sz = spec.crop_size
        aspect_ok &= abs(sy - sx * h / w) <= 1 + 1e-9 and abs(sz - sx * z / w) <= 1 + 1e-9
    for _ in range(20):
        spec = sample_spec(rng, image.dims, kinds=("scale_up",))
        o_img, _ = apply_scale_up(image, mask, spec.scale_factor)
        ox, oy, oz = o_img.dims
        aspect_ok &= abs(oy - ox * h / w) <= 1 + 1e-9 and abs(oz - ox * z / w) <= 1 + 1e-9

    vox = image.voxels
    mirror_ok = True
    for axis, extent in enumerate(vox.shape):
        for _ in range(50):
            delta = float(rng.uniform(0.05, extent - 0.05))
            neg = [float(s // 2) for s in vox.shape]
            pos = list(neg)
            neg[axis] = -delta
            pos[axis] = delta
            tri = abs(float(sample_trilinear(vox, *neg)) - float(sample_trilinear(vox, *pos)))
            near = abs(float(sample_nearest(vox, *neg)) - float(sample_nearest(vox, *pos)))
            mirror_ok &= tri <= 1e-6 and near == 0.0

    src = _phantom_dataset(str(tmp_path / "src"), (24, 20, 13),
                           [("train", 0), ("train", 1), ("train", 2), ("test", 50)])
    manifest = read_manifest(src)
    build_augmented_dataset(manifest, multiplicity=6, master_seed=9,
                            out_dir=str(tmp_path / "a"), network_dims=(16, 16, 9))
    build_augmented_dataset(manifest, multiplicity=6, master_seed=9,
                            out_dir=str(tmp_path / "b"), network_dims=(16, 16, 9))
    names = sorted(os.listdir(tmp_path / "a"))
    build_ok = (names == sorted(os.listdir(tmp_path / "b"))
                and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                        for f in names))

    ok = identity_ok and freq_ok and aspect_ok and mirror_ok and build_ok
    criterion_report(4, "augmentation identities, balance, aspect, mirror, reproducible build", ok,
                     f"kind dev {max_dev:.0f} of {4 * sigma:.0f} allowed, "
                     f"{len(names)} build files byte-identical")
    assert ok


def test_criterion_5_overfit_two_phantoms(criterion_report, tmp_path):
    dims = (32, 32, 17)
    manifest = _phantom_dataset(str(tmp_path / "data"), dims, [("train", 0), ("train", 1)])
    cfg = variant_config("M3", input_shape=dims, base_channels=8)
    run = TrainRun(variant="M3", epochs=200, iterations_per_epoch=10, eval_interval=2,
                   manifest_path=manifest, out_dir=str(tmp_path / "run"), seed=0,
                   stop_at_train_jaccard=0.90)
    start = time.perf_counter()
    result = train(run, cfg, OptimConfig(learning_rate=1e-3))
    elapsed = time.perf_counter() - start
    best = max(_csv_rows(result.csv_paths["train"]), key=lambda r: r["jaccard"])
    iterations = result.epochs_run * run.iterations_per_epoch
    ok = best["jaccard"] >= 0.90 and iterations <= 2000 and elapsed < 1800.0
    criterion_report(5, "residual net overfits two phantoms", ok,
                     f"train jaccard {best['jaccard']:.3f} by iteration {iterations}, {elapsed:.0f}s")
    assert ok


def test_criterion_6_small_data_generalization(criterion_report, tmp_path):
    dims = (32, 32, 17)
    specs = [("train", seed) for seed in range(12)] + [("test", 100), ("test", 101)]
    manifest = _phantom_dataset(str(tmp_path / "data"), dims, specs)
    start = time.perf_counter()
    aug_manifest = build_augmented_dataset(read_manifest(manifest), multiplicity=16,
                                           master_seed=3, out_dir=str(tmp_path / "aug"),
                                           network_dims=dims)
    cfg = variant_config("M3", input_shape=dims, base_channels=8)
    run = TrainRun(variant="M3", epochs=60, iterations_per_epoch=10, eval_interval=20,
                   eval_train_limit=4, manifest_path=aug_manifest,
                   out_dir=str(tmp_path / "run"), seed=0)
    result = train(run, cfg, OptimConfig(learning_rate=1e-3))

    model, _, _ = load_model(result.checkpoint_paths["latest"])
    scores = []
    for entry in read_manifest(aug_manifest).split("test"):
        vol = read_volume(entry.image_path)
        gt = read_volume(entry.annotation_paths[0])
        net = resample_trilinear(vol, model.config.input_shape)
        with no_grad():
            q = forward(model, volume_to_tensor(net), "eval")
        scores.append(evaluate_full(tensor_to_volume(q), gt, vol.dims).jaccard)
    elapsed = time.perf_counter() - start
    mean_j = float(np.mean(scores))
    ok = mean_j >= 0.5 and elapsed < 7200.0
    criterion_report(6, "generalizes from 12 phantoms with 16x augmentation to 2 held out", ok,
                     f"test jaccard {', '.join(f'{s:.3f}' for s in scores)}, mean {mean_j:.3f}, "
                     f"{elapsed:.0f}s")
    assert ok


def test_criterion_7_parameter_count_ordering(criterion_report):
    base = 8
    replica = build_model(variant_config("M1", input_shape=(132, 132, 116),
                                         base_channels=base), seed=0)
    compact = build_model(variant_config("M3", input_shape=(32, 32, 17),
                                         base_channels=base), seed=0)
    n_replica = parameter_count(replica)
    n_compact = parameter_count(compact)
    ok = (replica.config.depth == 4 and compact.config.depth == 3
          and n_compact < n_replica)
    criterion_report(7, "depth-3 residual net is smaller than the depth-4 replica", ok,
                     f"{n_compact} vs {n_replica} parameters at base {base}")
    assert ok


def test_criterion_8_adversarial_regularizer(criterion_report):
    dims = (16, 16, 9)
    batch = []
    for seed in (0, 1):
        img, msk = generate_phantom(PhantomSpec(seed=seed, dims=dims))
        batch.append((volume_to_tensor(img), volume_to_tensor(msk)))
    cfg = variant_config("M4", input_shape=dims, base_channels=4)

    # a zero adversarial weight must reduce to the plain cross-entropy step
    plain = build_model(cfg, seed=11)
    paired = build_model(cfg, seed=11)
    spare = build_critic(CriticConfig(), seed=12)
    spare_before = {k: t.data.copy() for k, t in spare.parameters.items()}
    report_plain = wgan_train_step(plain, None, batch, 0.0,
                                   (AdamState(plain.parameters), OptimConfig(learning_rate=1e-3)))
    report_paired = wgan_train_step(paired, spare, batch, 0.0,
                                    (AdamState(paired.parameters), OptimConfig(learning_rate=1e-3)),
                                    (AdamState(spare.parameters), OptimConfig(learning_rate=1e-4)))
    identity_ok = (all(np.array_equal(plain.parameters[k].data, paired.parameters[k].data)
                       for k in plain.parameters)
                   and all(np.array_equal(spare.parameters[k].data, before)
                           for k, before in spare_before.items())
                   and report_plain.bce == report_paired.bce
                   and report_plain.critic_steps == report_paired.critic_steps == 0)

    model = build_model(cfg, seed=0)
    critic_cfg = CriticConfig()
    critic = build_critic(critic_cfg, seed=1)
    gen_opt = (AdamState(model.parameters), OptimConfig(learning_rate=1e-3))
    critic_opt = (AdamState(critic.parameters), OptimConfig(learning_rate=1e-4))
    contained = True
    finite = True
    estimates = []
    start = time.perf_counter()
    for _ in range(500):
        report = wgan_train_step(model, critic, batch, 0.01, gen_opt, critic_opt)
        estimates.append(report.wasserstein)
        finite &= all(np.isfinite(v) for v in (report.bce, report.adversarial,
                                               report.wasserstein, report.total))
        contained &= all(float(np.abs(t.data).max()) <= critic_cfg.clip_value
                         for t in critic.parameters.values())
    elapsed = time.perf_counter() - start
    rho = _spearman_against_time(estimates)
    ok = identity_ok and contained and finite and rho < 0.0
    criterion_report(8, "weight-clipped adversarial regularizer", ok,
                     f"estimate/step spearman {rho:.2f} over 500 steps, {elapsed:.0f}s")
    assert ok


def test_criterion_9_deterministic_training(criterion_report, tmp_path):
    data = str(tmp_path / "data")
    assert main(["phantom-gen", "--count", "4", "--seed", "1", "--dims", "12x12x7",
                 "--out", data, "--splits", "2,1,1"]) == 0
    manifest = os.path.join(data, "manifest.jsonl")

    def run_once(tag):
        out_dir = str(tmp_path / tag)
        config = {"run": {"variant": "M2", "epochs": 3, "manifest_path": manifest,
                          "out_dir": out_dir, "iterations_per_epoch": 2,
                          "eval_interval": 1, "seed": 5},
                  "model": {"depth": 2, "base_channels": 2, "padding": "same",
                            "input_shape": [12, 12, 7], "variant_tag": "M2"},
                  "optim": {"learning_rate": 1e-3}}
        path = tmp_path / f"{tag}.json"
        path.write_text(json.dumps(config))
        assert main(["train", "--config", str(path), "--deterministic"]) == 0
        return out_dir

    first = run_once("a")
    second = run_once("b")

    def artifacts(out_dir):
        return [f for f in sorted(os.listdir(out_dir))
                if f.endswith(".csv") or f.endswith(".ckpt")]

    names = artifacts(first)
    ok = (bool(names) and names == artifacts(second)
          and all(open(os.path.join(first, f), "rb").read()
                  == open(os.path.join(second, f), "rb").read() for f in names))
    criterion_report(9, "repeat deterministic runs are byte-identical", ok,
                     f"{len(names)} files compared")
    assert ok
