"""Controlled studies: each variant changes one factor on a shared dataset.

=============  =====================================  ===========================
study          varied keys                            scored network
=============  =====================================  ===========================
inputs         gesture_inputs                         gesture net, held-out users
augmentation   augment                                appearance net, test frames
dropout        appearance_dropout, dropout_ratio      appearance net, test frames
videos         videos                                 appearance net, test frames
uncertainty    use_precision                          appearance net, test frames
=============  =====================================  ===========================

Everything except the varied keys (seed, synthetic data, gesture network,
pseudo-labels) is computed once per seed and reused by every variant.
"""
from dataclasses import dataclass

import numpy as np

from ..appearance import DROPOUT_STUDY
from ..errors import GestbootError
from ..gesture import predict
from ..motion import INPUT_VARIANTS
from . import pipeline, synth
from .metrics import F1Report, f1_score

STUDIES = ("inputs", "augmentation", "dropout", "videos", "uncertainty")

AUGMENT_STUDY = (
    ("none", "none"),
    ("brightness", "brightness"),
    ("environment", "background"),
    ("brightness+transformation", "brightness,transform"),
    ("environment+transformation", "background,transform"),
    ("brightness+transformation+environment", "brightness,transform,background"),
)

VIDEO_COUNTS = (1, 2, 4)


class UnknownStudyError(GestbootError, ValueError):
    """The requested study name is not one of :data:`STUDIES`."""


@dataclass
class AblationResult:
    variant: str
    seed: int
    report: F1Report
    config: dict


def study_variants(study):
    """``(variant_id, config_changes)`` for every row of a study."""
    if study == "inputs":
        return [(name, {"gesture_inputs": name}) for name in INPUT_VARIANTS]
    if study == "augmentation":
        return [(name, {"augment": flags}) for name, flags in AUGMENT_STUDY]
    if study == "dropout":
        rows = []
        for ratio in ("0.4", "0.5"):
            for places in DROPOUT_STUDY:
                name = "+".join(("fc7",) + places) + f"@{ratio}"
                rows.append((name, {"appearance_dropout": ",".join(places),
                                    "dropout_ratio": ratio}))
        return rows
    if study == "videos":
        return [(f"{n}-video", {"videos": str(n)}) for n in VIDEO_COUNTS]
    if study == "uncertainty":
        return [("identity", {"use_precision": "false"}),
                ("precision", {"use_precision": "true"})]
    raise UnknownStudyError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")


def _appearance_prep(config, n_videos):
    """Data, gesture network and pseudo-labels shared by appearance studies."""
    data = pipeline.gather_data(config, n_videos)
    out_dir = config.get_path("out_dir")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    gparams = pipeline.load_or_train_gesture(config, out_dir)
    channels = pipeline.input_channels(config)
    labels = []
    for i, (frames, _) in enumerate(data.calib):
        stacks = pipeline.motion_stacks(frames, channels)
        lab, _ = pipeline.pseudo_labels(gparams, stacks, config, i)
        labels.append(pipeline.corrupt_labels(lab, config, i))
    return data, labels


def _score_appearance(config, data, labels, n_videos):
    frames = [f for v, _ in data.calib[:n_videos] for f in v]
    labs = [l for v in labels[:n_videos] for l in v]
    params = pipeline.train_appearance(frames, labs, config, data.background, n_videos)
    probs, truth = [], []
    for tframes, tmasks in data.test:
        if tmasks is None:
            raise pipeline.ConfigError("test_mask_dir", "ablation studies need test masks")
        p, _ = pipeline.evaluate(params, tframes, tmasks, config)
        probs += p
        truth += list(tmasks)
    return f1_score(probs, truth, config.get_float("threshold"))


def _run_inputs(config, variants):
    seed = config.get_int("seed")
    users = [(pipeline.motion_stacks(f), m) for f, m in pipeline.synthetic_users(config)]
    # held-out people come from their own stream, disjoint from training users
    held_rng = pipeline.stage_rng(seed, pipeline.USERS, 1)
    held = []
    base = pipeline.synth_cfg(config)
    for _ in range(config.get_int("eval_users", 1)):
        ucfg = synth.random_user_cfg(held_rng, height=base.height, width=base.width,
                                     phase1_frames=base.phase1_frames,
                                     phase2_frames=base.phase2_frames, jitter=base.jitter)
        frames, masks = synth.synth_gesture_sequence(ucfg, held_rng)
        held.append((pipeline.motion_stacks(frames), masks))
    out = []
    for name, changes in variants:
        vcfg = config.with_values(**changes)
        params = pipeline.train_reference_gesture_net(vcfg, users)
        channels = np.asarray(pipeline.input_channels(vcfg), dtype=np.float64)[:, None, None]
        gcfg = pipeline.gesture_cfg(vcfg)
        probs = [predict(params, s * channels, gcfg) for stacks, _ in held for s in stacks]
        truth = [m for _, masks in held for m in masks]
        out.append((name, vcfg, f1_score(probs, truth, vcfg.get_float("threshold"))))
    return out


def run_ablation(study, config, seeds=None):
    """Run every variant of ``study`` for each seed (default: the config's).

    Returns a list of :class:`AblationResult`, variants in table order,
    grouped by seed.
    """
    variants = study_variants(study)
    seeds = [config.get_int("seed")] if seeds is None else [int(s) for s in seeds]
    results = []
    for seed in seeds:
        scfg = config.with_values(seed=seed)
        if study == "uncertainty" and scfg.get_int("label_corruption", 0) == 0:
            scfg = scfg.with_values(label_corruption=2)
        if study == "inputs":
            scored = _run_inputs(scfg, variants)
        else:
            n_max = max(VIDEO_COUNTS) if study == "videos" else max(pipeline.video_counts(scfg))
            data, labels = _appearance_prep(scfg, n_max)
            scored = []
            for name, changes in variants:
                vcfg = scfg.with_values(**changes)
                n = max(pipeline.video_counts(vcfg))
                scored.append((name, vcfg, _score_appearance(vcfg, data, labels, n)))
        for name, vcfg, rep in scored:
            pipeline._log(f"[{study}] seed {seed} {name}: F1 {rep.f1:.4f}")
            results.append(AblationResult(name, seed, rep, vcfg.snapshot()))
    return results


def summarize(results):
    """Mean F1 per variant id across seeds, in first-seen order."""
    table = {}
    for r in results:
        table.setdefault(r.variant, []).append(r.report.f1)
    return {k: float(np.mean(v)) for k, v in table.items()}


def format_table(study, results):
    seeds = sorted({r.seed for r in results})
    per = {(r.variant, r.seed): r.report.f1 for r in results}
    means = summarize(results)
    width = max(len(v) for v in means) + 2
    head = f"{'variant':<{width}}" + "".join(f"  seed {s:<4}" for s in seeds) + "     mean"
    lines = [f"study: {study}", head]
    for v, m in means.items():
        cells = "".join(f"  {per[(v, s)]:9.4f}" for s in seeds)
        lines.append(f"{v:<{width}}{cells}  {m:7.4f}")
    return "\n".join(lines) + "\n"


def config_diff(a, b):
    """Keys whose values differ between two config snapshots."""
    return sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
