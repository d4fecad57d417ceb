"""Stage two: the person-specific appearance network.

Trained on the user's own RGB frames against gesture-network pseudo-labels,
with the soft-sigmoid quadratic loss weighted by the per-pixel precision.
Also holds the augmentation suite (crop/rotate/flip, HSV brightness and
hand-free background frames).
"""
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InvalidInputError
from .gesture import PseudoLabel
from .imagecore import (crop, hflip, hsv_to_rgb, resize_bilinear, resize_nearest,
                        rgb_to_hsv, rotate_about_center)

APPEARANCE_DROPOUT = ("fc6", "conv5", "conv4")
# tuned on synthetic users; gradients are normalized by the pixel count
APPEARANCE_BASE_LR = 0.3

# Dropout placements compared in the dropout study, fc layers first.
DROPOUT_STUDY = (
    ("fc6",),
    ("fc6", "conv5"),
    ("fc6", "conv5", "conv4"),
    ("fc6", "conv5", "conv4", "conv3"),
    ("fc6", "conv5", "conv4", "conv3", "conv2"),
    ("fc6", "conv5", "conv4", "conv3", "conv2", "conv1"),
)


@dataclass(frozen=True)
class AugmentCfg:
    transform: bool = True
    brightness: bool = True
    background: bool = True
    crop_prob: float = 0.5
    crop_fraction: float = 0.8
    rotation_angles: tuple = (0.0, 15.0, -15.0, 30.0, -30.0)
    hflip_prob: float = 0.5
    brightness_prob: float = 0.5
    brightness_levels: tuple = (0.2, 0.3, 0.4, 0.5, 0.6)
    background_images: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise InvalidInputError("crop_fraction must lie in (0, 1]")
        if any(not 0 < b <= 1 for b in self.brightness_levels):
            raise InvalidInputError("brightness levels must lie in (0, 1]")

    @classmethod
    def none(cls):
        return cls(transform=False, brightness=False, background=False)


@dataclass(frozen=True)
class AppearanceTrainCfg:
    epochs: int = 20
    base_lr: float = APPEARANCE_BASE_LR
    lr_power: float = 0.9
    dropout: tuple = APPEARANCE_DROPOUT
    dropout_ratio: float = 0.4
    alpha: float = nn.DEFAULT_ALPHA
    use_precision: bool = True
    grad_clip: float = 0.1

    def __post_init__(self):
        if not 0 <= self.dropout_ratio < 1:
            raise InvalidInputError("dropout_ratio must lie in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidInputError("grad_clip must be > 0 or None")
        if not 0 < self.alpha < 1:
            raise InvalidInputError("alpha must lie in (0, 1)")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")


def appearance_spec(cfg=None):
    cfg = cfg or AppearanceTrainCfg()
    return nn.toy_spec(3, 1, dropout=cfg.dropout, ratio=cfg.dropout_ratio)


def crop_window(height, width, fraction):
    """Size of the random crop taken before resizing back."""
    return int(round(height * fraction)), int(round(width * fraction))


def scale_brightness(frame, level):
    """Scale the HSV value channel by ``level`` and clamp to [0, 1]."""
    hsv = rgb_to_hsv(frame)
    hsv[2] = np.clip(hsv[2] * level, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def input_stats(frames):
    """Per-channel mean and a single overall standard deviation of the
    user's (un-augmented) training frames, as float32 tensors."""
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in frames])
    mean = stack.mean(axis=(0, 2, 3))
    scale = max(float(stack.std()), 1e-3)
    return {"input.mean": mean.astype(np.float32).reshape(3, 1, 1),
            "input.scale": np.array([scale], dtype=np.float32)}


def net_input(frame, params):
    """Standardize a frame with the statistics stored in ``params``.

    Parameter sets without stored statistics only center around 0.5.
    """
    x = np.asarray(frame, dtype=np.float32)
    if "input.mean" not in params:
        return x - np.float32(0.5)
    return (x - params["input.mean"]) / params["input.scale"]


def _normalize(p):
    m = p.mean()
    return p / m if m > 0 else np.ones_like(p)


def augment_sample(frame, label, cfg, rng):
    """Randomly augment one ``(frame, PseudoLabel)`` pair.

    Geometric steps hit the frame, target and precision alike: the target
    is resampled nearest-neighbor so it stays binary, the precision
    bilinearly and then rescaled to unit mean.
    """
    frame = np.asarray(frame, dtype=np.float64)
    t = np.asarray(label.t, dtype=np.float64)
    p = np.asarray(label.precision, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[1:] != t.shape or t.shape != p.shape:
        raise InvalidInputError(
            f"frame {frame.shape}, target {t.shape} and precision {p.shape} disagree")
    h, w = t.shape
    geometric = False
    if cfg.transform:
        if rng.random() < cfg.crop_prob:
            ch, cw = crop_window(h, w, cfg.crop_fraction)
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            frame = resize_bilinear(crop(frame, top, left, ch, cw), h, w)
            t = resize_nearest(crop(t, top, left, ch, cw), h, w)
            p = resize_bilinear(crop(p, top, left, ch, cw), h, w)
            geometric = True
        angle = float(rng.choice(cfg.rotation_angles))
        if angle != 0.0:
            frame = rotate_about_center(frame, angle, fill=0.0)
            t = rotate_about_center(t, angle, fill=0.0, order=0)
            p = rotate_about_center(p, angle, fill=1.0)
            geometric = True
        if rng.random() < cfg.hflip_prob:
            frame, t, p = hflip(frame), hflip(t), hflip(p)
    if cfg.brightness and rng.random() < cfg.brightness_prob:
        frame = scale_brightness(frame, float(rng.choice(cfg.brightness_levels)))
    if geometric:
        p = _normalize(p)
    return frame, PseudoLabel(t, p)


def inject_background(samples, cfg, rng):
    """Mix hand-free frames into a sample list as all-background targets
    (t = 0, precision = 1) at random positions."""
    samples = list(samples)
    if not cfg.background or not cfg.background_images:
        return samples
    for img in cfg.background_images:
        img = np.asarray(img, dtype=np.float64)
        label = PseudoLabel(np.zeros(img.shape[1:]), np.ones(img.shape[1:]))
        samples.insert(int(rng.integers(0, len(samples) + 1)), (img, label))
    return samples


def train_appearance_net(frames, labels, cfg=None, aug_cfg=None, rng=None, history=None):
    """Fit the appearance network on RGB frames and their pseudo-labels.

    Augmentation draws are fresh every epoch. With ``cfg.use_precision``
    off, every precision map is replaced by ones (identity weighting) and
    training is otherwise unchanged. The summed loss is divided by the
    pixel count so the learning rate does not depend on frame size.

    Inputs are standardized with the statistics of ``frames`` (see
    :func:`input_stats`); those statistics are returned alongside the
    weights so :func:`segment` applies the same transform. Each step's
    gradient is clipped to a global L2 norm of ``cfg.grad_clip``, which
    keeps rare large steps from saturating the soft sigmoid.
    """
    cfg = cfg or AppearanceTrainCfg()
    aug_cfg = aug_cfg if aug_cfg is not None else AugmentCfg()
    rng = rng if rng is not None else np.random.default_rng(0)
    frames = list(frames)
    labels = list(labels)
    if not frames:
        raise InvalidInputError("need at least one training frame")
    if len(frames) != len(labels):
        raise InvalidInputError(f"{len(frames)} frames but {len(labels)} labels")
    if not cfg.use_precision:
        labels = [PseudoLabel(l.t, np.ones_like(np.asarray(l.precision, dtype=np.float64)))
                  for l in labels]

    spec = appearance_spec(cfg)
    params = nn.init_params(spec, rng)
    stats = input_stats(frames)
    base = list(zip(frames, labels))
    per_epoch = len(inject_background(base, aug_cfg, np.random.default_rng(0)))
    schedule = nn.PolyLrSchedule(cfg.base_lr, cfg.lr_power, cfg.epochs * per_epoch)
    it = 0
    for _ in range(cfg.epochs):
        stream = inject_background(base, aug_cfg, rng)
        for i in rng.permutation(len(stream)):
            frame, label = augment_sample(stream[i][0], stream[i][1], aug_cfg, rng)
            x = net_input(frame, stats)
            logits, cache = nn.forward(spec, params, x, True, rng)
            loss, grad = nn.precision_weighted_loss(
                logits, label.t[None].astype(np.float32),
                label.precision[None].astype(np.float32), cfg.alpha)
            scale = np.float32(1.0 / label.t.size)
            grads = nn.backward(spec, params, cache, grad * scale)
            grads, _ = nn.clip_grad_norm(grads, cfg.grad_clip)
            params = nn.sgd_step(params, grads, schedule, it)
            it += 1
            if history is not None:
                history.append(loss / label.t.size)
    return {**params, **stats}


def segment(params, frame, alpha=nn.DEFAULT_ALPHA):
    """Hand probability map for one RGB frame (dropout off)."""
    spec = nn.toy_spec(3, 1, dropout=())
    logits, _ = nn.forward(spec, params, net_input(frame, params))
    return nn.soft_sigmoid(logits[0].astype(np.float64), alpha)
