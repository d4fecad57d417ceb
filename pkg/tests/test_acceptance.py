"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria (5 to 8) train networks at full 96x128 desk scale
and take most of the suite's runtime; they share one person-agnostic
gesture network trained once per session.
"""
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import ndimage as ndi

from conftest import record_criterion
from gestboot import nn
from gestboot.appearance import (AppearanceTrainCfg, AugmentCfg, crop_window, scale_brightness,
                                 train_appearance_net)
from gestboot.gesture import GestureTrainCfg, PseudoLabel, mc_predict
from gestboot.harness import ablation, pipeline, synth
from gestboot.harness.config import SEED_ENV, Config
from gestboot.harness.metrics import f1_score
from gestboot.imagecore import hflip, rgb_to_hsv
from gestboot.motion import ForegroundConfig, fg_init, tvl1_flow

SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def gesture_params(tmp_path_factory):
    """The reference gesture network (seed 0), trained on synthetic users."""
    config = Config.from_text("seed = 0\n", environ={})
    params = pipeline.train_reference_gesture_net(config)
    path = tmp_path_factory.mktemp("gesture") / "gesture.params"
    nn.save_params(params, nn.toy_spec(3, 2, dropout=pipeline.gesture_cfg(config).dropout), path)
    return path


def study_config(gesture_params, out_dir, **values):
    text = f"gesture_params = {gesture_params}\nout_dir = {out_dir}\n"
    text += "".join(f"{k} = {v}\n" for k, v in values.items())
    return Config.from_text(text, environ={})


# ---------------------------------------------------------------- 1

def test_criterion_01_gradients():
    t0 = time.perf_counter()
    errors = {}
    rng = np.random.default_rng(100)
    widths = (2, 3, 3, 4, 4, 3)
    # conv stack under a plain squared loss, then each training loss on top
    for kind, out in (("squared", 2), ("weighted_softmax", 2), ("precision_weighted", 1)):
        spec = nn.toy_spec(2, out, dropout=("conv2", "fc6"), widths=widths)
        errors[kind] = nn.grad_check(spec, kind, 1e-4, rng).max_rel_error

    def rel(a, n):
        return float((np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)).max())

    def numeric(fn, x, step=1e-6):
        g = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            old = x[i]
            x[i] = old + step
            lp = fn(x)
            x[i] = old - step
            lm = fn(x)
            x[i] = old
            g[i] = (lp - lm) / (2 * step)
        return g

    logits = rng.normal(size=(2, 6, 6))
    target = (rng.random((6, 6)) < 0.4).astype(np.float64)
    _, g = nn.weighted_softmax_loss(logits, target)
    loss_err = rel(g, numeric(lambda z: nn.weighted_softmax_loss(z, target)[0], logits))
    x = rng.normal(size=(1, 6, 6)) * 2
    t = (rng.random((1, 6, 6)) < 0.4).astype(np.float64)
    p = rng.uniform(0.1, 3.0, size=(1, 6, 6))
    _, g = nn.precision_weighted_loss(x, t, p)
    loss_err = max(loss_err, rel(g, numeric(lambda z: nn.precision_weighted_loss(z, t, p)[0], x)))
    elapsed = time.perf_counter() - t0

    net_err = max(errors.values())
    passed = net_err < 1e-4 and loss_err < 1e-6 and elapsed < 30
    record_criterion(1, passed, f"net max rel err {net_err:.2e} (<1e-4), loss-only {loss_err:.2e} "
                                f"(<1e-6), {elapsed:.1f} s (<30 s)")
    assert passed


# ---------------------------------------------------------------- 2

def test_criterion_02_tvl1_flow():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    img = ndi.gaussian_filter(rng.random((64, 64)), 1.0, mode="wrap")
    img = (img - img.min()) / (img.max() - img.min())
    still = np.abs(tvl1_flow(img, img)).mean()
    moved = np.roll(img, 1, axis=1)
    flow = tvl1_flow(img, moved)
    epe = float(np.hypot(flow[0] - 1.0, flow[1]).mean())
    elapsed = time.perf_counter() - t0
    passed = still < 1e-3 and epe < 0.3 and elapsed < 60
    record_criterion(2, passed, f"identical mean |w| {still:.1e} px (<1e-3), shift EPE {epe:.3f} px "
                                f"(<0.3), {elapsed:.1f} s (<60 s)")
    assert passed


# ---------------------------------------------------------------- 3

def test_criterion_03_background_subtraction():
    t0 = time.perf_counter()
    scene = synth.render_background(synth.SynthCfg(scene_seed=4))
    model = fg_init(scene, ForegroundConfig(prior_background=0.8, learning_rate=0.6, smoothing=0.0))
    yy, xx = np.mgrid[0:96, 0:128]
    preds, truths = [], []
    for k in range(40):
        cy, cx = 48 + 20 * np.sin(k / 6), 20 + 2.2 * k
        blob = (yy - cy) ** 2 / 14 ** 2 + (xx - cx) ** 2 / 10 ** 2 <= 1
        frame = scene.copy()
        frame[:, blob] = np.array([0.9, 0.2, 0.8])[:, None]
        prob = model.update(frame)
        if k >= 20:
            preds.append(prob)
            truths.append(blob)
    rep = f1_score(preds, truths)
    elapsed = time.perf_counter() - t0
    passed = rep.f1 >= 0.7 and elapsed < 30
    record_criterion(3, passed, f"foreground F1 {rep.f1:.4f} over frames 20-39 (>=0.7), "
                                f"{elapsed:.1f} s (<30 s)")
    assert passed


# ---------------------------------------------------------------- 4

def test_criterion_04_mc_dropout(gesture_params):
    t0 = time.perf_counter()
    params, _ = nn.load_params(gesture_params)
    frames, _ = synth.synth_gesture_sequence(synth.variant_cfg("normal"), np.random.default_rng(0))
    stack = pipeline.motion_stacks(frames[10:14])[-1]
    cfg = GestureTrainCfg()

    umap = mc_predict(params, stack, cfg, np.random.default_rng(1), samples=100)
    min_var = float(umap.variance.min())
    off = mc_predict(params, stack, GestureTrainCfg(dropout_ratio=0.0), np.random.default_rng(1),
                     samples=10)
    max_var_off = float(off.variance.max())

    # spread of the MC mean across independent repeats
    repeats = 20
    spread = {}
    for n in (25, 100):
        means = np.stack([mc_predict(params, stack, cfg, np.random.default_rng([n, r]), samples=n).mean
                          for r in range(repeats)])
        spread[n] = means.std(axis=0, ddof=1).mean()
    ratio = float(spread[25] / spread[100])
    elapsed = time.perf_counter() - t0
    passed = min_var >= 0 and max_var_off <= 1e-12 and 1.5 <= ratio <= 2.5 and elapsed < 120
    record_criterion(4, passed, f"min var {min_var:.1e} (>=0), ratio-0 max var {max_var_off:.1e} "
                                f"(<=1e-12), std shrink 25->100 x{ratio:.3f} ([1.5, 2.5]), "
                                f"{elapsed:.1f} s (<120 s)")
    assert passed


# ---------------------------------------------------------------- 5

@pytest.mark.slow
def test_criterion_05_end_to_end(gesture_params, tmp_path):
    scores, times = {}, {}
    for variant in synth.VARIANTS:
        config = study_config(gesture_params, tmp_path / variant, variant=variant)
        t0 = time.perf_counter()
        report = pipeline.run_pipeline(config)
        times[variant] = time.perf_counter() - t0
        scores[variant] = report.f1
    passed = all(f >= 0.8 for f in scores.values()) and all(t < 600 for t in times.values())
    detail = ", ".join(f"{v} F1 {scores[v]:.4f} in {times[v]:.0f} s" for v in synth.VARIANTS)
    record_criterion(5, passed, f"{detail} (F1 >=0.8, <600 s each)")
    assert passed


# ---------------------------------------------------------------- 6

def _uniform_precision_arms_match(seed):
    """Train both weighting arms on uniform-precision labels; compare bytes."""
    cfg = synth.variant_cfg("normal", scene_seed=seed)
    frames, masks = synth.synth_gesture_sequence(cfg, np.random.default_rng(seed))
    labels = [PseudoLabel(m, np.ones_like(m)) for m in masks]
    out = []
    for use in (True, False):
        out.append(train_appearance_net(frames, labels, AppearanceTrainCfg(epochs=2, use_precision=use),
                                        AugmentCfg(), np.random.default_rng(seed)))
    return all(out[0][k].tobytes() == out[1][k].tobytes() for k in out[0])


@pytest.mark.slow
def test_criterion_06_uncertainty_weighting(gesture_params, tmp_path):
    config = study_config(gesture_params, tmp_path / "uncertainty")
    results = ablation.run_ablation("uncertainty", config, SEEDS)
    means = ablation.summarize(results)
    identical = all(_uniform_precision_arms_match(s) for s in SEEDS)
    passed = means["precision"] >= means["identity"] and identical
    per_seed = ", ".join(f"s{r.seed} {r.variant[:4]} {r.report.f1:.4f}" for r in results)
    record_criterion(6, passed, f"mean F1 precision {means['precision']:.4f} vs identity "
                                f"{means['identity']:.4f} over {len(SEEDS)} seeds [{per_seed}]; "
                                f"uniform-precision arms bitwise identical: {identical}")
    assert passed


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_07_input_combinations(tmp_path):
    config = Config.from_text(f"out_dir = {tmp_path}\n", environ={})
    results = ablation.run_ablation("inputs", config)
    f1 = {r.variant: r.report.f1 for r in results}
    full = f1["bgsub+optx+opty"]
    singles = ("bgsub", "opt")
    passed = all(full >= f1[s] for s in singles)
    table = ", ".join(f"{k} {v:.4f}" for k, v in f1.items())
    record_criterion(7, passed, f"3-channel F1 {full:.4f} >= single-cue "
                                f"{', '.join(f'{s} {f1[s]:.4f}' for s in singles)} [{table}]")
    assert passed


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_08_multi_video(gesture_params, tmp_path):
    config = study_config(gesture_params, tmp_path / "videos")
    results = ablation.run_ablation("videos", config, SEEDS)
    means = ablation.summarize(results)
    passed = means["4-video"] >= means["1-video"]
    record_criterion(8, passed, "mean F1 over 3 seeds: " +
                     ", ".join(f"{k} {v:.4f}" for k, v in means.items()) + " (4 >= 1)")
    assert passed


# ---------------------------------------------------------------- 9

TINY_RUN = """\
seed = 3
height = 48
width = 64
phase_frames = 6
test_frames = 6
test_videos = 1
gesture_users = 2
gesture_epochs = 1
mc_samples = 4
appearance_epochs = 1
background_frames = 3
videos = 1,2
out_dir = out
"""


def _cli_session(root):
    """Run every CLI command once under ``root``; return the normalized stdout."""
    geometry = ["--height", "48", "--width", "64", "--seed", "3"]
    commands = [
        ["synth", "--kind", "gesture", "--out", "gest", "--frames", "6", *geometry],
        ["synth", "--kind", "test", "--out", "test", "--frames", "6", *geometry],
        ["synth", "--kind", "background", "--out", "bg", "--frames", "3", *geometry],
        ["flow", "--prev", "gest/frame_003.png", "--next", "gest/frame_004.png", "--out", "flow.gbt"],
        ["bgsub", "--frames", "gest", "--out", "fg"],
        ["train-gesture", "--data", "gest", "--out", "g.params", "--epochs", "1"],
        ["pseudo-label", "--params", "g.params", "--frames", "gest", "--out", "labels",
         "--samples", "4"],
        ["train-appearance", "--frames", "gest", "--labels", "labels", "--out", "a.params",
         "--epochs", "1", "--aug", "brightness,transform,background", "--background", "bg"],
        ["segment", "--params", "a.params", "--in", "test", "--out", "seg"],
        ["eval", "--pred", "seg", "--truth", "test", "--pred-prefix", "mask_",
         "--truth-prefix", "mask_", "--out", "eval.json"],
        ["ablate", "--study", "uncertainty", "--config", "run.cfg", "--out", "ablate/table.txt"],
        ["pipeline", "--config", "run.cfg"],
    ]
    root.mkdir()
    (root / "run.cfg").write_text(TINY_RUN, encoding="utf-8")
    env = {k: v for k, v in os.environ.items() if k != SEED_ENV}
    env.update(OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    outputs = []
    for cmd in commands:
        proc = subprocess.run([sys.executable, "-m", "gestboot.harness.cli", *cmd], cwd=root,
                              env=env, capture_output=True, text=True)
        assert proc.returncode == 0, (cmd, proc.stderr)
        outputs.append(proc.stdout)
    return outputs


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_09_cli_determinism(tmp_path):
    out_a = _cli_session(tmp_path / "a")
    out_b = _cli_session(tmp_path / "b")
    tree_a, tree_b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differing = sorted(k for k in tree_a.keys() | tree_b.keys() if tree_a.get(k) != tree_b.get(k))
    passed = not differing and out_a == out_b
    record_criterion(9, passed, f"12 commands x2: {len(tree_a)} artifacts, {len(differing)} differ "
                                f"{differing[:3]}, stdout identical: {out_a == out_b}")
    assert passed


# ---------------------------------------------------------------- 10

def test_criterion_10_augmentation_exactness():
    rng = np.random.default_rng(1000)
    frame = rng.random((3, 40, 50))
    v = rgb_to_hsv(frame)[2]
    exact = True
    for level in (0.2, 0.3, 0.4, 0.5, 0.6, 1.7):
        out_v = rgb_to_hsv(scale_brightness(frame, level))[2]
        exact &= bool(np.array_equal(out_v, np.minimum(v * level, 1.0)))
    window = crop_window(380, 1030, 0.8)
    flips = bool(np.array_equal(hflip(hflip(frame)), frame))
    passed = exact and window == (304, 824) and flips
    record_criterion(10, passed, f"V -> V*L bitwise: {exact}, crop 380x1030 @0.8 -> "
                                 f"{window[0]}x{window[1]} (304x824), hflip∘hflip = id: {flips}")
    assert passed
