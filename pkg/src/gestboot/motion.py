"""Motion cues for the gesture network.

Two cues are extracted per frame:

* dense optical flow from a dual TV-L1 solver (coarse-to-fine, with
  per-level image warping and primal-dual inner iterations), and
* a per-pixel foreground probability from a Bayesian background model
  built on quantized color histograms.

They are packed into a 3-channel ``(3, H, W)`` motion stack by
:func:`build_motion_stack`.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .errors import InvalidInputError
from .imagecore import resize_bilinear, sample_bilinear, to_gray

# channel masks over (fg_prob, flow_x, flow_y)
INPUT_VARIANTS = {
    "bgsub": (1, 0, 0),
    "opt": (0, 1, 1),
    "bgsub+optx": (1, 1, 0),
    "bgsub+opty": (1, 0, 1),
    "bgsub+optx+opty": (1, 1, 1),
}


@dataclass(frozen=True)
class TvL1Params:
    """Solver settings. ``lam`` weights the L1 data term against total
    variation; smaller values give smoother fields."""

    lam: float = 0.15
    epsilon: float = 0.01
    max_iters: int = 300
    pyramid_levels: int = 4
    pyramid_scale: float = 0.5
    warps_per_level: int = 3
    tau: float = 0.125
    theta: float = 0.3

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidInputError("lam must be > 0")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be > 0")
        if self.max_iters < 1 or self.warps_per_level < 1 or self.pyramid_levels < 1:
            raise InvalidInputError("iteration, warp and level counts must be >= 1")
        if not 0 < self.pyramid_scale < 1:
            raise InvalidInputError("pyramid_scale must lie in (0, 1)")
        if not (0 < self.tau <= 0.125 and self.theta > 0):
            raise InvalidInputError("need 0 < tau <= 0.125 and theta > 0 for a stable dual step")


def _forward_grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _divergence(px, py):
    # negative adjoint of _forward_grad
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    div[:, -1] = -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] += -py[-2, :]
    return div


def _central_grad(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return gx, gy


def _warp(img, u, v):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(img, yy + v, xx + u)


def tvl1_energy(i0, i1, u, v, lam):
    """Nonlinear TV-L1 energy ``sum |grad u| + |grad v| + lam |I1(x+w) - I0(x)|``."""
    ux, uy = _forward_grad(u)
    vx, vy = _forward_grad(v)
    tv = np.sqrt(ux ** 2 + uy ** 2).sum() + np.sqrt(vx ** 2 + vy ** 2).sum()
    data = np.abs(_warp(i1, u, v) - i0).sum()
    return float(tv + lam * data)


def _solve_level(i0, i1, u, v, params, log, level):
    lt = params.lam * params.theta
    taut = params.tau / params.theta
    pux = np.zeros_like(u)
    puy = np.zeros_like(u)
    pvx = np.zeros_like(u)
    pvy = np.zeros_like(u)
    energy = tvl1_energy(i0, i1, u, v, params.lam)
    for warp in range(params.warps_per_level):
        saved = (u, v, pux, puy, pvx, pvy)
        i1w = _warp(i1, u, v)
        ix, iy = _central_grad(i1w)
        grad2 = ix ** 2 + iy ** 2
        flat = grad2 <= 1e-10
        inv_grad2 = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, grad2))
        rho_c = i1w - ix * u - iy * v - i0
        iters = 0
        for iters in range(1, params.max_iters + 1):
            rho = rho_c + ix * u + iy * v
            # thresholding step for the auxiliary field
            coef = np.where(rho < -lt * grad2, lt,
                            np.where(rho > lt * grad2, -lt, -rho * inv_grad2))
            du = coef * ix
            dv = coef * iy
            au = u + du
            av = v + dv

            u_new = au + params.theta * _divergence(pux, puy)
            v_new = av + params.theta * _divergence(pvx, pvy)
            change = 0.5 * (np.abs(u_new - u).mean() + np.abs(v_new - v).mean())
            u, v = u_new, v_new

            ux, uy = _forward_grad(u)
            vx, vy = _forward_grad(v)
            nu = 1.0 + taut * np.sqrt(ux ** 2 + uy ** 2)
            nv = 1.0 + taut * np.sqrt(vx ** 2 + vy ** 2)
            pux = (pux + taut * ux) / nu
            puy = (puy + taut * uy) / nu
            pvx = (pvx + taut * vx) / nv
            pvy = (pvy + taut * vy) / nv
            if change < params.epsilon:
                break
        new_energy = tvl1_energy(i0, i1, u, v, params.lam)
        if new_energy > energy:
            # the linearized step overshot; keep the previous warp's field
            u, v, pux, puy, pvx, pvy = saved
            break
        energy = new_energy
        if log is not None:
            log.append({"level": level, "warp": warp, "iters": iters, "energy": energy})
    return u, v


def _pyramid(img, params):
    levels = [img]
    sigma = 0.6 * np.sqrt(1.0 / params.pyramid_scale ** 2 - 1.0)
    for _ in range(params.pyramid_levels - 1):
        prev = levels[-1]
        h = int(round(prev.shape[0] * params.pyramid_scale))
        w = int(round(prev.shape[1] * params.pyramid_scale))
        if min(h, w) < 8:
            break
        levels.append(resize_bilinear(ndi.gaussian_filter(prev, sigma, mode="nearest"), h, w))
    return levels


def tvl1_flow(prev, next, params=None, log=None):
    """Dense optical flow from ``prev`` to ``next``.

    Returns a ``(2, H, W)`` array ``(u, v)`` in pixels/frame such that
    ``next(y + v, x + u) ~ prev(y, x)``. RGB input is converted to luminance.
    Intensities are rescaled to the 0..255 range the default ``lam`` is
    calibrated for.

    A warp whose result raises the nonlinear energy is discarded and the
    solver moves on to the next level, so the energy never increases
    across accepted warps. If ``log`` is a list, one record per accepted
    warp is appended with the level, warp index, inner-iteration count and
    energy.
    """
    params = params or TvL1Params()
    i0 = to_gray(prev)
    i1 = to_gray(next)
    if i0.shape != i1.shape:
        raise InvalidInputError(f"frame shapes differ: {i0.shape} vs {i1.shape}")
    i0 = ndi.gaussian_filter(i0 * 255.0, 0.8, mode="nearest")
    i1 = ndi.gaussian_filter(i1 * 255.0, 0.8, mode="nearest")

    pyr0 = _pyramid(i0, params)
    pyr1 = _pyramid(i1, params)
    u = np.zeros_like(pyr0[-1])
    v = np.zeros_like(pyr0[-1])
    for level in range(len(pyr0) - 1, -1, -1):
        a, b = pyr0[level], pyr1[level]
        if u.shape != a.shape:
            sy = a.shape[0] / u.shape[0]
            sx = a.shape[1] / u.shape[1]
            u = resize_bilinear(u, *a.shape) * sx
            v = resize_bilinear(v, *a.shape) * sy
        u, v = _solve_level(a, b, u, v, params, log, level)
    return np.stack([u, v])


@dataclass(frozen=True)
class ForegroundConfig:
    prior_background: float = 0.8
    learning_rate: float = 0.6
    smoothing: float = 0.0
    num_bins: int = 16
    init_frames: int = 1
    max_features: int = 8
    decision_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.prior_background < 1:
            raise InvalidInputError("prior_background must lie in (0, 1)")
        if not 0 <= self.learning_rate <= 1:
            raise InvalidInputError("learning_rate must lie in [0, 1]")
        if not 0 <= self.smoothing <= 1:
            raise InvalidInputError("smoothing must lie in [0, 1]")
        if self.num_bins < 1 or self.init_frames < 1 or self.max_features < 1:
            raise InvalidInputError("bin, feature and init-frame counts must be >= 1")


@dataclass
class ForegroundModel:
    """Per-pixel sparse color histogram of the background.

    ``features`` holds quantized color ids (-1 marks an empty slot) and
    ``weights`` their normalized frequencies, both shaped ``(H, W, K)``.
    ``posterior`` is the previous foreground map, used only when
    ``cfg.smoothing > 0``.
    """

    cfg: ForegroundConfig
    features: np.ndarray
    weights: np.ndarray
    posterior: np.ndarray = field(default=None)

    @property
    def shape(self):
        return self.features.shape[:2]

    def likelihood(self, ids):
        hit = self.features == ids[..., None]
        return (self.weights * hit).sum(axis=-1)

    def classify(self, frame):
        """Foreground posterior for ``frame`` without touching the model."""
        ids = quantize(frame, self.cfg.num_bins)
        if ids.shape != self.shape:
            raise InvalidInputError(f"frame shape {ids.shape} does not match model {self.shape}")
        h = np.clip(self.likelihood(ids), 0.0, 1.0)
        pb = self.cfg.prior_background
        bg = h * pb
        fg = (1.0 - h) * (1.0 - pb)
        post = fg / (fg + bg)
        return ids, post

    def observe(self, ids, mask=None):
        """Blend color ids into the histograms with exponential forgetting,
        restricted to ``mask`` when given."""
        lr = self.cfg.learning_rate
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        w = self.weights[mask]
        f = self.features[mask]
        new = ids[mask]
        w *= 1.0 - lr
        hit = f == new[:, None]
        has = hit.any(axis=1)
        rows = np.nonzero(has)[0]
        w[rows, hit[rows].argmax(axis=1)] += lr
        # unseen colors evict the weakest slot
        rows = np.nonzero(~has)[0]
        slot = w[rows].argmin(axis=1)
        f[rows, slot] = new[rows]
        w[rows, slot] = lr
        total = w.sum(axis=1, keepdims=True)
        np.divide(w, total, out=w, where=total > 0)
        self.weights[mask] = w
        self.features[mask] = f

    def update(self, frame):
        """Classify ``frame`` then learn from its background pixels.

        Returns the ``(H, W)`` foreground probability map.
        """
        ids, post = self.classify(frame)
        s = self.cfg.smoothing
        if s > 0 and self.posterior is not None:
            post = s * self.posterior + (1.0 - s) * post
        self.posterior = post
        self.observe(ids, post < self.cfg.decision_threshold)
        return post


def quantize(frame, num_bins):
    """Map each pixel's color to a single integer bin id."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.size == 0:
        raise InvalidInputError(f"expected a non-empty (C, H, W) frame, got shape {frame.shape}")
    q = np.clip((frame * num_bins).astype(np.intp), 0, num_bins - 1)
    ids = np.zeros(frame.shape[1:], dtype=np.intp)
    for ch in q:
        ids = ids * num_bins + ch
    return ids


def fg_init(frames, cfg=None):
    """Seed a background model from hand-free frames.

    ``frames`` is one frame or a list; at most ``cfg.init_frames`` of the
    list are averaged into the histograms.
    """
    cfg = cfg or ForegroundConfig()
    seq = list(frames) if isinstance(frames, (list, tuple)) else [frames]
    if not seq:
        raise InvalidInputError("need at least one initialization frame")
    ids = quantize(seq[0], cfg.num_bins)
    h, w = ids.shape
    features = np.full((h, w, cfg.max_features), -1, dtype=np.intp)
    weights = np.zeros((h, w, cfg.max_features))
    features[..., 0] = ids
    weights[..., 0] = 1.0
    model = ForegroundModel(cfg, features, weights)
    for k, frame in enumerate(seq[1:cfg.init_frames], start=2):
        # running mean over the init window
        ids = quantize(frame, cfg.num_bins)
        if ids.shape != (h, w):
            raise InvalidInputError("initialization frames differ in shape")
        saved = model.cfg
        model.cfg = ForegroundConfig(**{**saved.__dict__, "learning_rate": 1.0 / k})
        model.observe(ids)
        model.cfg = saved
    return model


def fg_update(model, frame):
    """Functional form of :meth:`ForegroundModel.update`."""
    prob = model.update(frame)
    return model, prob


def build_motion_stack(fg_prob, flow, flow_norm_max=8.0, channels=(1, 1, 1)):
    """Pack foreground probability and flow into a ``(3, H, W)`` stack in [0, 1].

    Flow components are encoded as ``clip(c / flow_norm_max, -1, 1) / 2 + 0.5``.
    ``channels`` zeroes the cues an ablation variant leaves out (see
    :data:`INPUT_VARIANTS`).
    """
    fg_prob = np.asarray(fg_prob, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != (2,) + fg_prob.shape:
        raise InvalidInputError(
            f"flow shape {flow.shape} does not match probability map {fg_prob.shape}")
    if not flow_norm_max > 0:
        raise InvalidInputError("flow_norm_max must be > 0")
    enc = np.clip(flow / flow_norm_max, -1.0, 1.0) * 0.5 + 0.5
    stack = np.concatenate([np.clip(fg_prob, 0.0, 1.0)[None], enc])
    stack *= np.asarray(channels, dtype=np.float64)[:, None, None]
    return stack


def sequence_motion_stacks(frames, tvl1_params=None, fg_cfg=None, flow_norm_max=8.0,
                           init_frames=None):
    """Motion stacks for every frame of a sequence.

    The background model is seeded with ``init_frames`` (default: the first
    frame) and updated frame by frame. Flow at frame ``t`` is computed from
    ``t`` toward ``t - 1`` so that it lives on frame ``t``'s pixel grid;
    frame 0 uses frame 1.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise InvalidInputError("need at least two frames for flow")
    model = fg_init(init_frames if init_frames is not None else frames[0], fg_cfg)
    stacks = []
    for t, frame in enumerate(frames):
        prob = model.update(frame)
        if t == 0:
            flow = tvl1_flow(frame, frames[1], tvl1_params)
        else:
            # flow toward t-1 points against the motion
            flow = -tvl1_flow(frame, frames[t - 1], tvl1_params)
        stacks.append(build_motion_stack(prob, flow, flow_norm_max))
    return stacks
