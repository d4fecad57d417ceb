"""Stage one: the motion-driven gesture network.

The network sees only motion stacks (foreground probability plus flow),
so one trained model transfers across users and scenes. At inference it
is run many times with dropout left on; the spread of the hand
probability across passes becomes a per-pixel confidence that weights
the pseudo-labels handed to the appearance network.
"""
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidInputError

GESTURE_DROPOUT = ("conv3", "conv4", "conv5")
# tuned on synthetic users; the loss is a per-pixel mean
GESTURE_BASE_LR = 0.05


@dataclass(frozen=True)
class GestureTrainCfg:
    dropout_ratio: float = 0.4
    dropout: tuple = GESTURE_DROPOUT
    w_hand: float = 5.0
    w_bg: float = 0.6
    epochs: int = 30
    base_lr: float = GESTURE_BASE_LR
    lr_power: float = 0.9
    mc_samples: int = 100

    def __post_init__(self):
        if not 0 <= self.dropout_ratio < 1:
            raise InvalidInputError("dropout_ratio must lie in [0, 1)")
        if self.mc_samples < 2:
            raise InvalidInputError("mc_samples must be >= 2 for a variance estimate")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")


@dataclass
class UncertaintyMap:
    mean: np.ndarray
    variance: np.ndarray
    samples: int


@dataclass
class PseudoLabel:
    t: np.ndarray
    precision: np.ndarray


def gesture_spec(cfg=None):
    cfg = cfg or GestureTrainCfg()
    return nn.toy_spec(3, 2, dropout=cfg.dropout, ratio=cfg.dropout_ratio)


def _check_examples(examples):
    if not examples:
        raise InvalidInputError("need at least one training example")
    shape = None
    for stack, mask in examples:
        stack = np.asarray(stack)
        if stack.ndim != 3 or stack.shape[0] != 3 or stack.shape[1:] != np.shape(mask):
            raise InvalidInputError(
                f"example stack {stack.shape} / mask {np.shape(mask)} are inconsistent")
        if shape is not None and stack.shape != shape:
            raise InvalidInputError("examples differ in size")
        shape = stack.shape


def train_gesture_net(examples, cfg=None, rng=None, history=None, init=None):
    """Fit the gesture network on ``(motion_stack, binary_mask)`` pairs.

    One example per SGD step (batch size 1), visited in a fresh random
    order each epoch; dropout is active throughout. If ``history`` is a
    list, the per-step training loss is appended to it.
    """
    cfg = cfg or GestureTrainCfg()
    rng = rng if rng is not None else np.random.default_rng(0)
    _check_examples(examples)
    spec = gesture_spec(cfg)
    params = init if init is not None else nn.init_params(spec, rng)
    stacks = [np.asarray(s, dtype=np.float32) for s, _ in examples]
    masks = [(np.asarray(m) > 0.5).astype(np.float32) for _, m in examples]
    schedule = nn.PolyLrSchedule(cfg.base_lr, cfg.lr_power, cfg.epochs * len(examples))
    it = 0
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(examples)):
            logits, cache = nn.forward(spec, params, stacks[i], True, rng)
            loss, grad = nn.weighted_softmax_loss(logits, masks[i], cfg.w_hand, cfg.w_bg)
            grads = nn.backward(spec, params, cache, grad)
            params = nn.sgd_step(params, grads, schedule, it)
            it += 1
            if history is not None:
                history.append(loss)
    return params


def hand_probability(logits):
    """Softmax probability of the hand channel (channel 1)."""
    d = logits[1].astype(np.float64) - logits[0]
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def predict(params, stack, cfg=None):
    """Deterministic (dropout-off) hand probability."""
    spec = gesture_spec(cfg)
    logits, _ = nn.forward(spec, params, np.asarray(stack, dtype=np.float32))
    return hand_probability(logits)


def mc_predict(params, stack, cfg=None, rng=None, samples=None):
    """Monte-Carlo dropout: ``samples`` stochastic passes (default
    ``cfg.mc_samples``) give the per-pixel mean and unbiased variance of
    the hand probability."""
    cfg = cfg or GestureTrainCfg()
    n = cfg.mc_samples if samples is None else samples
    if n < 2:
        raise InvalidInputError("need at least two Monte-Carlo samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = gesture_spec(cfg)
    x = np.asarray(stack, dtype=np.float32)
    draws = np.empty((n,) + x.shape[1:])
    for k in range(n):
        logits, _ = nn.forward(spec, params, x, True, rng)
        draws[k] = hand_probability(logits)
    return UncertaintyMap(draws.mean(axis=0), draws.var(axis=0, ddof=1), n)


def make_pseudo_label(umap, eps_var=1e-4, threshold=0.5, binary=True):
    """Turn an uncertainty map into a target and a diagonal precision.

    The precision ``1 / (variance + eps_var)`` is rescaled to unit spatial
    mean so that precision weighting keeps the same overall step size as
    identity weighting. With ``binary=False`` the mean probability itself
    is the target.
    """
    if not eps_var > 0:
        raise InvalidInputError("eps_var must be > 0")
    if not 0 < threshold < 1:
        raise InvalidInputError("threshold must lie in (0, 1)")
    mean = np.asarray(umap.mean, dtype=np.float64)
    t = (mean >= threshold).astype(np.float64) if binary else np.clip(mean, 0.0, 1.0)
    raw = 1.0 / (np.maximum(np.asarray(umap.variance, dtype=np.float64), 0.0) + eps_var)
    return PseudoLabel(t, raw / raw.mean())
