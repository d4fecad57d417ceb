"""End-to-end orchestration: calibration gesture to personalized detector.

Stages, each writing its artifacts under ``out_dir``:

1. calibration frames (synthesized, or read from ``calib_dir``)
2. motion stacks (background subtraction + TV-L1 flow)
3. gesture network (loaded from ``gesture_params`` or trained on
   synthetic users)
4. Monte-Carlo dropout pseudo-labels (target PNG + precision blob)
5. appearance network, once per requested video count
6. segmentation and F1 on held-out test frames

Every random draw comes from :func:`stage_rng`, keyed by the run seed and
the stage, so re-running a stage on its saved inputs reproduces its
outputs bit for bit.
"""
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .. import nn
from ..appearance import AppearanceTrainCfg, AugmentCfg, segment, train_appearance_net
from ..errors import ConfigError
from ..gesture import GestureTrainCfg, PseudoLabel, make_pseudo_label, mc_predict, train_gesture_net
from ..imagecore import read_blob, read_png, write_blob, write_png
from ..motion import INPUT_VARIANTS, sequence_motion_stacks
from . import synth
from .config import Config
from .metrics import f1_score

# stream ids for stage_rng
CALIB, TEST, GESTURE, MC, APPEARANCE, BACKGROUND, USERS, CORRUPT = range(1, 9)

AUGMENT_FLAGS = ("transform", "brightness", "background")


def stage_rng(seed, stage, *extra):
    """Independent generator for one stage of one run."""
    return np.random.default_rng([int(seed), stage, *map(int, extra)])


def config_digest(config):
    """Short content hash of the resolved configuration."""
    return hashlib.sha256(config.to_text().encode("utf-8")).hexdigest()[:16]


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- settings

def synth_cfg(config):
    try:
        return synth.variant_cfg(
            config.get_str("variant"),
            height=config.get_int("height", 32), width=config.get_int("width", 32),
            phase1_frames=config.get_int("phase_frames", 5),
            phase2_frames=config.get_int("phase_frames", 5),
            test_frames=config.get_int("test_frames", 1),
            jitter=config.get_float("jitter"),
            scene_seed=config.get_int("seed"))
    except ValueError as exc:
        raise ConfigError("variant", str(exc)) from None


def gesture_cfg(config):
    return GestureTrainCfg(epochs=config.get_int("gesture_epochs", 1),
                           base_lr=config.get_float("gesture_lr"),
                           mc_samples=config.get_int("mc_samples", 2))


def input_channels(config):
    name = config.get_str("gesture_inputs")
    if name not in INPUT_VARIANTS:
        raise ConfigError("gesture_inputs",
                          f"gesture_inputs = {name!r}; pick one of {sorted(INPUT_VARIANTS)}")
    return INPUT_VARIANTS[name]


def appearance_cfg(config):
    dropout = tuple(config.get_list("appearance_dropout"))
    unknown = set(dropout) - set(nn.DROPOUT_SLOTS) - {"fc7"}
    if unknown:
        raise ConfigError("appearance_dropout", f"unknown dropout slots {sorted(unknown)}")
    return AppearanceTrainCfg(epochs=config.get_int("appearance_epochs", 1),
                              base_lr=config.get_float("appearance_lr"),
                              dropout=dropout,
                              dropout_ratio=config.get_float("dropout_ratio"),
                              alpha=config.get_float("alpha"),
                              use_precision=config.get_bool("use_precision"),
                              grad_clip=config.get_float("grad_clip"))


def augment_cfg(config, background_images=()):
    flags = [f for f in config.get_list("augment") if f != "none"]
    unknown = set(flags) - set(AUGMENT_FLAGS)
    if unknown:
        raise ConfigError("augment", f"unknown augmentation strategies {sorted(unknown)}")
    return AugmentCfg(transform="transform" in flags, brightness="brightness" in flags,
                      background="background" in flags,
                      background_images=tuple(background_images))


def video_counts(config):
    try:
        counts = [int(v) for v in config.get_list("videos")]
    except ValueError:
        raise ConfigError("videos", "videos must be a comma-separated list of integers") from None
    if not counts or min(counts) < 1:
        raise ConfigError("videos", "videos needs at least one count >= 1")
    return counts


# ---------------------------------------------------------------- frame I/O

def list_pngs(directory, prefix=""):
    return sorted(p for p in Path(directory).glob(f"{prefix}*.png") if p.is_file())


def read_frame_dir(directory, key=None, prefix=""):
    """Read every PNG in a directory (sorted by name) as RGB frames."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(key or str(directory), f"frame directory {directory} does not exist")
    paths = list_pngs(directory, prefix)
    if not paths:
        raise ConfigError(key or str(directory), f"no PNG frames in {directory}")
    frames = []
    for p in paths:
        img = read_png(p)
        frames.append(np.stack([img] * 3) if img.ndim == 2 else img)
    return frames


def read_mask_dir(directory, key=None, prefix=""):
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(key or str(directory), f"mask directory {directory} does not exist")
    masks = []
    for p in list_pngs(directory, prefix):
        m = read_png(p)
        masks.append((m if m.ndim == 2 else m.mean(axis=0)) > 0.5)
    return [m.astype(np.float64) for m in masks]


def write_sequence(directory, frames, masks=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        write_png(frame, directory / f"frame_{k:03d}.png")
        if masks is not None:
            write_png(masks[k], directory / f"mask_{k:03d}.png")


def write_labels(directory, labels, umaps=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, label in enumerate(labels):
        write_png(label.t, directory / f"t_{k:03d}.png")
        write_blob(label.precision, directory / f"precision_{k:03d}.gbt")
        if umaps is not None:
            write_blob(umaps[k].mean, directory / f"mean_{k:03d}.gbt")
            write_blob(umaps[k].variance, directory / f"variance_{k:03d}.gbt")


def read_labels(directory):
    directory = Path(directory)
    ts = list_pngs(directory, "t_")
    ps = sorted(directory.glob("precision_*.gbt"))
    if not ts or len(ts) != len(ps):
        raise ConfigError(str(directory), f"{directory}: need matching t_*.png and precision_*.gbt files")
    return [PseudoLabel((read_png(t) > 0.5).astype(np.float64), read_blob(p).astype(np.float64))
            for t, p in zip(ts, ps)]


def storable(label):
    """Round the precision to the float32 values a blob stores, so training
    from saved labels matches training from in-memory ones."""
    return PseudoLabel(label.t, label.precision.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------- stages

def motion_stacks(frames, channels=(1, 1, 1)):
    mask = np.asarray(channels, dtype=np.float64)[:, None, None]
    return [s * mask for s in sequence_motion_stacks(frames)]


def synthetic_users(config):
    """Calibration gestures of random people/scenes for the gesture network."""
    rng = stage_rng(config.get_int("seed"), USERS)
    base = synth_cfg(config)
    seqs = []
    for _ in range(config.get_int("gesture_users", 1)):
        cfg = synth.random_user_cfg(rng, height=base.height, width=base.width,
                                    phase1_frames=base.phase1_frames,
                                    phase2_frames=base.phase2_frames, jitter=base.jitter)
        seqs.append(synth.synth_gesture_sequence(cfg, rng))
    return seqs


def train_reference_gesture_net(config, user_stacks=None):
    """Train the person-agnostic gesture network on synthetic users.

    ``user_stacks`` may supply precomputed ``(stacks, masks)`` pairs (all
    channels present); the configured input variant is applied here.
    """
    if user_stacks is None:
        user_stacks = [(motion_stacks(f), m) for f, m in synthetic_users(config)]
    channels = np.asarray(input_channels(config), dtype=np.float64)[:, None, None]
    examples = [(s * channels, m) for stacks, masks in user_stacks for s, m in zip(stacks, masks)]
    return train_gesture_net(examples, gesture_cfg(config),
                             stage_rng(config.get_int("seed"), GESTURE))


def pseudo_labels(params, stacks, config, video):
    rng = stage_rng(config.get_int("seed"), MC, video)
    gcfg = gesture_cfg(config)
    umaps, labels = [], []
    for stack in stacks:
        umap = mc_predict(params, stack, gcfg, rng)
        umaps.append(umap)
        labels.append(storable(make_pseudo_label(umap, config.get_float("eps_var"),
                                                 binary=config.get_bool("binary_labels"))))
    return labels, umaps


def corrupt_boundary(label, width, prob, rng):
    """Flip target pixels within ``width`` px of the hand boundary, each with
    probability ``prob``; the precision map is left untouched."""
    t = np.asarray(label.t) > 0.5
    if width <= 0 or prob <= 0:
        return label
    band = ndi.binary_dilation(t, iterations=width) & ~ndi.binary_erosion(t, iterations=width)
    flip = band & (rng.random(t.shape) < prob)
    return PseudoLabel((t ^ flip).astype(np.float64), label.precision)


def corrupt_labels(labels, config, video):
    """Apply the configured boundary corruption (``label_corruption`` px,
    ``corruption_prob``); a width of 0 returns the labels unchanged."""
    width = config.get_int("label_corruption", 0)
    if width == 0:
        return list(labels)
    prob = config.get_float("corruption_prob")
    rng = stage_rng(config.get_int("seed"), CORRUPT, video)
    return [corrupt_boundary(l, width, prob, rng) for l in labels]


def train_appearance(frames, labels, config, background_images, n_videos):
    return train_appearance_net(frames, labels, appearance_cfg(config),
                                augment_cfg(config, background_images),
                                stage_rng(config.get_int("seed"), APPEARANCE, n_videos))


def evaluate(params, frames, masks, config):
    alpha = config.get_float("alpha")
    probs = [segment(params, f, alpha) for f in frames]
    return probs, f1_score(probs, masks, config.get_float("threshold"))


# ---------------------------------------------------------------- data

@dataclass
class RunData:
    """Inputs of one pipeline run (calibration videos, test set, background)."""
    calib: list
    test: list
    background: list = field(default_factory=list)


def gather_data(config, max_videos):
    seed = config.get_int("seed")
    scfg = synth_cfg(config)
    calib_dir = config.get_path("calib_dir")
    if calib_dir is not None:
        if not calib_dir.is_dir():
            raise ConfigError("calib_dir", f"calib_dir {calib_dir} does not exist")
        subdirs = sorted(p for p in calib_dir.iterdir() if p.is_dir())
        dirs = subdirs if subdirs else [calib_dir]
        if len(dirs) < max_videos:
            raise ConfigError("videos", f"{len(dirs)} calibration videos in {calib_dir}, need {max_videos}")
        calib = [(read_frame_dir(d, "calib_dir", "frame_"), None) for d in dirs[:max_videos]]
    else:
        calib = [synth.synth_gesture_sequence(scfg, stage_rng(seed, CALIB, i))
                 for i in range(max_videos)]

    test_dir = config.get_path("test_dir")
    if test_dir is not None:
        frames = read_frame_dir(test_dir, "test_dir", "frame_")
        mask_dir = config.get_path("test_mask_dir")
        masks = read_mask_dir(mask_dir, "test_mask_dir", "mask_") if mask_dir else None
        if masks is not None and len(masks) != len(frames):
            raise ConfigError("test_mask_dir", f"{len(masks)} masks for {len(frames)} test frames")
        test = [(frames, masks)]
    else:
        test = [synth.synth_test_sequence(scfg, stage_rng(seed, TEST, j))
                for j in range(config.get_int("test_videos", 1))]

    bg_dir = config.get_path("background_dir")
    if bg_dir is not None:
        background = read_frame_dir(bg_dir, "background_dir")
    elif calib_dir is None:
        background = synth.background_frames(scfg, config.get_int("background_frames", 0),
                                             stage_rng(seed, BACKGROUND))
    else:
        background = []
    return RunData(calib, test, background)


# ---------------------------------------------------------------- driver

@dataclass
class PipelineReport:
    config: dict
    digest: str
    results: list  # one dict per video count
    gesture_f1: float = None

    @property
    def f1(self):
        scored = [r for r in self.results if r["f1"] is not None]
        return scored[-1]["f1"] if scored else None

    def records(self):
        yield {"kind": "config", "digest": self.digest, "config": self.config}
        if self.gesture_f1 is not None:
            yield {"kind": "gesture", "f1": self.gesture_f1}
        for r in self.results:
            yield {"kind": "appearance", **r}

    def to_text(self):
        lines = [f"gestboot pipeline report  (config {self.digest})", ""]
        if self.gesture_f1 is not None:
            lines.append(f"gesture network F1 on calibration frames: {self.gesture_f1:.4f}")
            lines.append("")
        lines.append(f"{'videos':>6}  {'precision':>9}  {'recall':>7}  {'F1':>7}")
        for r in self.results:
            if r["f1"] is None:
                lines.append(f"{r['videos']:>6}  {'-':>9}  {'-':>7}  {'-':>7}")
            else:
                lines.append(f"{r['videos']:>6}  {r['precision']:>9.4f}  {r['recall']:>7.4f}  {r['f1']:>7.4f}")
        lines += ["", "config snapshot:"]
        lines += [f"  {k} = {v}" for k, v in self.config.items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        (out_dir / "report.txt").write_text(self.to_text(), encoding="utf-8")
        with open(out_dir / "report.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_or_train_gesture(config, out_dir):
    path = config.get_path("gesture_params")
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError("gesture_params", f"gesture_params {path} does not exist")
        params, _ = nn.load_params(path)
        return params
    _log("training gesture network on synthetic users")
    params = train_reference_gesture_net(config)
    nn.save_params(params, nn.toy_spec(3, 2, dropout=gesture_cfg(config).dropout), out_dir / "gesture.params")
    return params


def run_pipeline(config):
    """Run every stage for a :class:`Config` (or config file path) and
    return the :class:`PipelineReport`, also written to ``out_dir``."""
    if not isinstance(config, Config):
        config = Config.load(config)
    out_dir = config.get_path("out_dir")
    if out_dir is None:
        raise ConfigError("out_dir", "out_dir must be set")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    counts = video_counts(config)
    t0 = time.perf_counter()

    data = gather_data(config, max(counts))
    gparams = load_or_train_gesture(config, out_dir)
    channels = input_channels(config)
    if data.background:
        write_sequence(out_dir / "background", data.background)

    frames_per_video, labels_per_video = [], []
    gesture_preds, gesture_truth = [], []
    for i, (frames, masks) in enumerate(data.calib):
        _log(f"calibration video {i}: motion stacks and pseudo-labels")
        write_sequence(out_dir / "calib" / f"v{i}", frames, masks)
        stacks = motion_stacks(frames, channels)
        labels, umaps = pseudo_labels(gparams, stacks, config, i)
        labels = corrupt_labels(labels, config, i)
        write_labels(out_dir / "labels" / f"v{i}", labels, umaps)
        frames_per_video.append(frames)
        labels_per_video.append(labels)
        if masks is not None:
            gesture_preds += [u.mean for u in umaps]
            gesture_truth += list(masks)
    gesture_f1 = None
    if gesture_truth:
        gesture_f1 = f1_score(gesture_preds, gesture_truth, config.get_float("threshold")).f1

    for j, (frames, masks) in enumerate(data.test):
        write_sequence(out_dir / "test" / f"v{j}", frames, masks)

    results = []
    for n in counts:
        _log(f"training appearance network on {n} video(s)")
        frames = [f for v in frames_per_video[:n] for f in v]
        labels = [l for v in labels_per_video[:n] for l in v]
        params = train_appearance(frames, labels, config, data.background, n)
        nn.save_params(params, nn.toy_spec(3, 1, dropout=appearance_cfg(config).dropout),
                       out_dir / f"appearance_n{n}.params")
        all_probs, all_truth = [], []
        for j, (tframes, tmasks) in enumerate(data.test):
            probs = [segment(params, f, config.get_float("alpha")) for f in tframes]
            for k, p in enumerate(probs):
                write_png(p, out_dir / "test" / f"v{j}" / f"pred_n{n}_{k:03d}.png")
            if tmasks is not None:
                all_probs += probs
                all_truth += list(tmasks)
        if all_truth:
            rep = f1_score(all_probs, all_truth, config.get_float("threshold"))
            results.append({"videos": n, "f1": rep.f1, "precision": rep.precision,
                            "recall": rep.recall, "true_pos": rep.true_pos,
                            "false_pos": rep.false_pos, "false_neg": rep.false_neg,
                            "per_frame": rep.per_frame})
        else:
            results.append({"videos": n, "f1": None})

    report = PipelineReport(config.snapshot(), config_digest(config), results, gesture_f1)
    report.write(out_dir)
    _log(f"pipeline finished in {time.perf_counter() - t0:.1f} s")
    return report
