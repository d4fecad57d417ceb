"""A small fully-convolutional network engine with hand-written backprop.

Activations are ``(C, H, W)`` arrays (batch size is always one). A network
is described by a :class:`NetSpec` holding an ordered tuple of layers and
its weights live in a plain ``dict`` mapping ``"<layer>.weight"`` /
``"<layer>.bias"`` to arrays. Training runs in float32; passing float64
parameters gives the double-precision path used for gradient checks.
"""
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, ScheduleExhaustedError
from .imagecore import interp_matrix, read_blobs, write_blobs

# learning rate used at full 380x1030 resolution; desk-scale runs use DEFAULT_BASE_LR
FULL_SCALE_BASE_LR = 1e-8
DEFAULT_BASE_LR = 1e-2
DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class Conv:
    name: str
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = None

    def padding(self):
        return self.kernel // 2 if self.pad is None else self.pad


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    name: str
    ratio: float = 0.4


@dataclass(frozen=True)
class Upsample:
    """Bilinear resize back to the network's input resolution."""

    factor: int = 4


_LAYER_TYPES = {"conv": Conv, "relu": ReLU, "dropout": Dropout, "upsample": Upsample}


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    input_channels: int
    output_channels: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        channels = self.input_channels
        seen = set()
        for layer in self.layers:
            if isinstance(layer, Conv):
                if layer.name in seen:
                    raise InvalidInputError(f"duplicate layer name {layer.name!r}")
                seen.add(layer.name)
                if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1:
                    raise InvalidInputError(f"bad conv geometry in {layer}")
                channels = layer.out_channels
            elif isinstance(layer, Dropout):
                if not 0 <= layer.ratio < 1:
                    raise InvalidInputError(f"dropout ratio must lie in [0, 1), got {layer.ratio}")
            elif not isinstance(layer, (ReLU, Upsample)):
                raise InvalidInputError(f"unknown layer {layer!r}")
        if channels != self.output_channels:
            raise InvalidInputError(
                f"last conv emits {channels} channels, spec promises {self.output_channels}")

    def convs(self):
        return [l for l in self.layers if isinstance(l, Conv)]

    def to_dict(self):
        kinds = {v: k for k, v in _LAYER_TYPES.items()}
        return {
            "input_channels": self.input_channels,
            "output_channels": self.output_channels,
            "layers": [{"type": kinds[type(l)], **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(_LAYER_TYPES[entry.pop("type")](**entry))
        return cls(tuple(layers), d["input_channels"], d["output_channels"])


DROPOUT_SLOTS = ("conv1", "conv2", "conv3", "conv4", "conv5", "fc6")


def toy_spec(input_channels=3, output_channels=2, dropout=("conv3", "conv4", "conv5"),
             ratio=0.4, widths=(16, 32, 32, 64, 64, 64)):
    """Five 3x3 convolutions, two 1x1 "fully connected" layers and a x4
    bilinear upsample.

    ``dropout`` names the layers whose (post-ReLU) output is dropped.
    ``"fc7"`` is accepted as an alias for the single slot between the two
    fully connected layers.
    """
    places = {"fc6" if p == "fc7" else p for p in dropout}
    unknown = places - set(DROPOUT_SLOTS)
    if unknown:
        raise InvalidInputError(f"unknown dropout placement(s) {sorted(unknown)}")
    strides = (1, 2, 1, 2, 1)
    layers = []
    for i, (w, s) in enumerate(zip(widths[:5], strides), start=1):
        name = f"conv{i}"
        layers += [Conv(name, w, 3, s), ReLU()]
        if name in places:
            layers.append(Dropout(name, ratio))
    layers += [Conv("fc6", widths[5], 1, 1), ReLU()]
    if "fc6" in places:
        layers.append(Dropout("fc6", ratio))
    layers += [Conv("fc7", output_channels, 1, 1), Upsample(4)]
    return NetSpec(tuple(layers), input_channels, output_channels)


def init_params(spec, rng, dtype=np.float32):
    """Uniform Glorot initialisation; biases start at zero."""
    params = {}
    channels = spec.input_channels
    for conv in spec.convs():
        k = conv.kernel
        fan_in = channels * k * k
        fan_out = conv.out_channels * k * k
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{conv.name}.weight"] = rng.uniform(
            -s, s, size=(conv.out_channels, channels, k, k)).astype(dtype)
        params[f"{conv.name}.bias"] = np.zeros(conv.out_channels, dtype=dtype)
        channels = conv.out_channels
    return params


def zero_params(spec, dtype=np.float32):
    return {k: np.zeros_like(v) for k, v in init_params(spec, np.random.default_rng(0), dtype).items()}


def count_params(params):
    return int(sum(v.size for v in params.values()))


@lru_cache(maxsize=64)
def _interp(n_in, n_out, dtype):
    m = interp_matrix(n_in, n_out).astype(dtype)
    m.flags.writeable = False
    return m


def _im2col(x, k, stride, pad):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidInputError(f"input {h}x{w} too small for kernel {k} stride {stride}")
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo), ho, wo


def _col2im(dcols, shape, k, stride, pad, ho, wo):
    c, h, w = shape
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return dxp[:, pad:pad + h, pad:pad + w] if pad else dxp


def forward(spec, params, x, dropout_on=False, rng=None):
    """Run the network on one ``(C, H, W)`` input.

    Returns ``(logits, cache)`` where logits are ``(output_channels, H, W)``.
    With ``dropout_on`` every dropout layer zeroes units with probability
    ``ratio`` and rescales survivors by ``1 / (1 - ratio)``; ``rng`` (a
    ``numpy.random.Generator``) supplies the masks.
    """
    dtype = params[f"{spec.convs()[0].name}.weight"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or x.shape[0] != spec.input_channels:
        raise InvalidInputError(
            f"expected input of shape ({spec.input_channels}, H, W), got {x.shape}")
    if dropout_on and rng is None:
        raise InvalidInputError("dropout_on requires an rng")
    in_hw = x.shape[1:]
    records = []
    h = x
    for layer in spec.layers:
        if isinstance(layer, Conv):
            w = params[f"{layer.name}.weight"]
            b = params[f"{layer.name}.bias"]
            if w.shape[1] != h.shape[0]:
                raise InvalidInputError(f"{layer.name} expects {w.shape[1]} channels, got {h.shape[0]}")
            cols, ho, wo = _im2col(h, layer.kernel, layer.stride, layer.padding())
            out = (w.reshape(w.shape[0], -1) @ cols + b[:, None]).reshape(w.shape[0], ho, wo)
            records.append((layer, cols, h.shape, ho, wo))
            h = out
        elif isinstance(layer, ReLU):
            mask = h > 0
            records.append((layer, mask))
            h = h * mask
        elif isinstance(layer, Dropout):
            if dropout_on and layer.ratio > 0:
                keep = 1.0 - layer.ratio
                mask = (rng.random(h.shape) < keep).astype(dtype) * dtype.type(1.0 / keep)
                h = h * mask
            else:
                mask = None
            records.append((layer, mask))
        elif isinstance(layer, Upsample):
            ry = _interp(h.shape[1], in_hw[0], dtype)
            rx = _interp(h.shape[2], in_hw[1], dtype)
            records.append((layer, ry, rx))
            h = ry @ h @ rx.T
    cache = {"spec": spec, "params_id": id(params), "records": records}
    return h, cache


def backward(spec, params, cache, grad_logits, input_grad=False):
    """Backpropagate ``grad_logits`` through a cached forward pass.

    Returns a dict of parameter gradients keyed like ``params``; with
    ``input_grad=True`` returns ``(grads, d_input)``. Dropout masks drawn in
    the forward pass are reused.
    """
    if cache.get("spec") != spec or cache.get("params_id") != id(params):
        raise InvalidInputError("cache does not come from a forward pass with these params")
    g = np.asarray(grad_logits)
    grads = {}
    records = cache["records"]
    first_conv = next(i for i, r in enumerate(records) if isinstance(r[0], Conv))
    for idx in range(len(records) - 1, -1, -1):
        rec = records[idx]
        layer = rec[0]
        if isinstance(layer, Upsample):
            _, ry, rx = rec
            g = ry.T @ g @ rx
        elif isinstance(layer, Dropout):
            if rec[1] is not None:
                g = g * rec[1]
        elif isinstance(layer, ReLU):
            g = g * rec[1]
        elif isinstance(layer, Conv):
            _, cols, in_shape, ho, wo = rec
            w = params[f"{layer.name}.weight"]
            g2 = g.reshape(w.shape[0], -1)
            grads[f"{layer.name}.weight"] = (g2 @ cols.T).reshape(w.shape)
            grads[f"{layer.name}.bias"] = g2.sum(axis=1)
            if idx > first_conv or input_grad:
                dcols = w.reshape(w.shape[0], -1).T @ g2
                g = _col2im(dcols, in_shape, layer.kernel, layer.stride, layer.padding(), ho, wo)
    grads = {k: grads[k] for k in params}
    if input_grad:
        return grads, g
    return grads


def _check_same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise InvalidInputError(f"shape mismatch: {sorted(shapes)}")


def weighted_softmax_loss(logits, target, w_hand=5.0, w_bg=0.6):
    """Class-weighted two-class softmax cross-entropy, averaged over pixels.

    ``logits`` is ``(2, H, W)`` with channel 1 the hand class; ``target`` is
    a binary ``(H, W)`` mask. Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    if logits.ndim != 3 or logits.shape[0] != 2 or logits.shape[1:] != target.shape:
        raise InvalidInputError(f"logits {logits.shape} / target {target.shape} mismatch")
    if not np.all((target == 0) | (target == 1)):
        raise InvalidInputError("target mask must be binary")
    hand = target == 1
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    log_p = shifted - log_z
    weight = np.where(hand, w_hand, w_bg).astype(logits.dtype)
    n = target.size
    nll = -np.where(hand, log_p[1], log_p[0])
    loss = float((weight * nll).sum() / n)
    grad = np.exp(log_p)
    grad[1] -= hand
    grad[0] -= ~hand
    grad *= weight / n
    return loss, grad


def soft_sigmoid(x, alpha=DEFAULT_ALPHA):
    """``1 / (1 + exp(-alpha x))``; ``alpha < 1`` flattens the logistic."""
    if not 0 < alpha < 1:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    z = alpha * np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def precision_weighted_loss(x, t, precision, alpha=DEFAULT_ALPHA):
    """Quadratic pseudo-label loss with a diagonal precision matrix.

    ``loss = sum_i p_i (s_i - t_i)^2`` with ``s = soft_sigmoid(x, alpha)``,
    and ``d loss / d x_i = 2 alpha s_i (1 - s_i) p_i (s_i - t_i)``.
    Returns ``(loss, grad_x)``.
    """
    x = np.asarray(x)
    t = np.asarray(t, dtype=x.dtype)
    p = np.asarray(precision, dtype=x.dtype)
    _check_same_shape(x, t, p)
    if np.any(p < 0):
        raise InvalidInputError("precision must be non-negative")
    s = soft_sigmoid(x, alpha)
    r = s - t
    wr = p * r
    loss = float((wr * r).sum())
    grad = (2.0 * alpha) * s * (1.0 - s) * wr
    return loss, grad.astype(x.dtype, copy=False)


def squared_loss(out, target):
    out = np.asarray(out)
    target = np.asarray(target, dtype=out.dtype)
    _check_same_shape(out, target)
    r = out - target
    return float((r * r).sum()), 2.0 * r


@dataclass(frozen=True)
class PolyLrSchedule:
    base_lr: float = DEFAULT_BASE_LR
    power: float = 0.9
    max_iter: int = 1000

    def __post_init__(self):
        if not self.base_lr > 0:
            raise InvalidInputError("base_lr must be > 0")
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be >= 1")

    def lr(self, it):
        if it < 0 or it >= self.max_iter:
            raise ScheduleExhaustedError(f"iteration {it} outside [0, {self.max_iter})")
        return self.base_lr * (1.0 - it / self.max_iter) ** self.power


def sgd_step(params, grads, schedule, it):
    """Plain SGD with a polynomially decaying rate; returns new params."""
    lr = schedule.lr(it)
    return {k: (v - v.dtype.type(lr) * grads[k]).astype(v.dtype, copy=False)
            for k, v in params.items()}


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm)`` with the pre-clipping norm. ``max_norm=None``
    leaves the gradients untouched.
    """
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * g.dtype.type(scale)) for k, g in grads.items()}, norm


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_skipped: int = 0
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


LOSS_KINDS = ("squared", "weighted_softmax", "precision_weighted")


def _loss_for(kind, spec, rng, shape):
    h, w = shape
    if kind == "squared":
        target = rng.normal(size=(spec.output_channels, h, w))
        return lambda out: squared_loss(out, target)
    if kind == "weighted_softmax":
        if spec.output_channels != 2:
            raise InvalidInputError("weighted softmax needs a 2-channel net")
        target = (rng.random((h, w)) < 0.4).astype(np.float64)
        return lambda out: weighted_softmax_loss(out, target)
    if kind == "precision_weighted":
        if spec.output_channels != 1:
            raise InvalidInputError("precision-weighted loss needs a 1-channel net")
        t = (rng.random((1, h, w)) < 0.4).astype(np.float64)
        p = rng.uniform(0.1, 3.0, size=(1, h, w))
        return lambda out: precision_weighted_loss(out, t, p)
    raise InvalidInputError(f"unknown loss kind {kind!r}; pick one of {LOSS_KINDS}")


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)


def _relu_pattern(cache):
    masks = [r[1].ravel() for r in cache["records"] if isinstance(r[0], ReLU)]
    return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


def grad_check(spec, loss_kind, tolerance, rng, input_shape=(8, 8), step=1e-4,
               dropout_on=True):
    """Compare analytic gradients with central finite differences.

    Runs in float64 on random parameters and a random input, perturbing
    every parameter and every input element. Dropout (if present) uses the
    same mask in all evaluations. Perturbations that flip any ReLU are
    not differentiable there and are skipped (counted in ``n_skipped``).
    Relative error is ``|a - n| / max(|a| + |n|, 1e-7)``.
    """
    params = init_params(spec, rng, dtype=np.float64)
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.uniform(-0.1, 0.1, size=params[k].shape)
    x = rng.random((spec.input_channels,) + tuple(input_shape))
    loss_fn = _loss_for(loss_kind, spec, rng, input_shape)
    mask_seed = int(rng.integers(2 ** 63))

    def evaluate(prm, inp):
        out, cache = forward(spec, prm, inp, dropout_on, np.random.default_rng(mask_seed))
        return loss_fn(out), cache

    (_, g_out), cache = evaluate(params, x)
    grads, gx = backward(spec, params, cache, g_out, input_grad=True)
    base = _relu_pattern(cache)

    worst, worst_name, n, skipped = 0.0, "", 0, 0
    per_tensor = {}
    analytic = dict(grads, input=gx)
    for name, arr in list(params.items()) + [("input", x)]:
        errs = []
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            (lp, _), cp = evaluate(params, x)
            flat[i] = old - step
            (lm, _), cm = evaluate(params, x)
            flat[i] = old
            if not (np.array_equal(_relu_pattern(cp), base)
                    and np.array_equal(_relu_pattern(cm), base)):
                skipped += 1
                continue
            errs.append(float(_rel_err(a_flat[i], (lp - lm) / (2 * step))))
            n += 1
        err = max(errs, default=0.0)
        per_tensor[name] = err
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(worst, tolerance, n, skipped, worst_name, per_tensor)


def save_params(params, spec, path):
    """Write params as a GBT1 blob sequence plus a ``.json`` sidecar
    manifest (sorted keys, so output is byte-stable)."""
    path = Path(path)
    names = list(params)
    write_blobs([params[k] for k in names], path)
    manifest = {
        "format": "GBT1",
        "tensors": [{"name": k, "shape": list(params[k].shape)} for k in names],
        "spec": spec.to_dict(),
    }
    Path(str(path) + ".json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, spec)``."""
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    blobs = read_blobs(path)
    tensors = manifest["tensors"]
    if len(blobs) != len(tensors):
        raise FormatError(f"{path}: manifest lists {len(tensors)} tensors, file has {len(blobs)}")
    params = {}
    for entry, arr in zip(tensors, blobs):
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{path}: shape mismatch for {entry['name']}")
        params[entry["name"]] = arr
    return params, NetSpec.from_dict(manifest["spec"])
