"""Procedural egocentric desk scenes with ground-truth hand masks.

A calibration sequence shows both hands sliding in from the frame edges
with open palms, then sliding back out as fists. A test sequence shows
the same hands (same colors, texture and scene) following free 2-D paths:
circles, diagonals and in-place scale changes.

Appearance is fixed by ``SynthCfg`` plus ``scene_seed``; the ``rng``
passed to the sequence functions only drives noise, jitter and paths.
"""
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage as ndi

VARIANTS = ("normal", "dark", "glove")


@dataclass(frozen=True)
class SynthCfg:
    height: int = 96
    width: int = 128
    phase1_frames: int = 30
    phase2_frames: int = 30
    test_frames: int = 40
    palm_color: tuple = (0.88, 0.68, 0.56)
    dorsal_color: tuple = (0.74, 0.52, 0.40)
    arm_color: tuple = (0.80, 0.59, 0.47)
    glove: bool = False
    glove_color: tuple = (0.16, 0.36, 0.78)
    brightness: float = 1.0
    jitter: float = 0.0
    noise: float = 0.01
    hand_scale: float = 1.0
    scene_seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("frames must be at least 32x32")
        if self.phase1_frames < 5 or self.phase2_frames < 5:
            raise ValueError("each gesture phase needs at least 5 frames")


def variant_cfg(variant, **overrides):
    """Preset appearance for the normal, dark-room and gloved conditions."""
    if variant == "normal":
        cfg = SynthCfg()
    elif variant == "dark":
        cfg = SynthCfg(brightness=0.3)
    elif variant == "glove":
        cfg = SynthCfg(glove=True)
    else:
        raise ValueError(f"unknown variant {variant!r}; pick one of {VARIANTS}")
    return replace(cfg, **overrides)


def random_user_cfg(rng, **overrides):
    """A random person/scene: skin tone, optional glove, lighting, scene."""
    tone = rng.uniform(0.35, 1.0)
    base = np.array([0.55 + 0.35 * tone, 0.33 + 0.37 * tone, 0.22 + 0.36 * tone])
    base = np.clip(base + rng.normal(0, 0.03, 3), 0.05, 0.98)
    palm = np.clip(base * 1.08 + 0.02, 0, 1)
    dorsal = np.clip(base * 0.9, 0, 1)
    glove = bool(rng.random() < 0.2)
    cfg = SynthCfg(
        palm_color=tuple(palm), dorsal_color=tuple(dorsal), arm_color=tuple(base),
        glove=glove, glove_color=tuple(rng.uniform(0.05, 0.9, 3)),
        brightness=float(rng.choice([1.0, 1.0, 0.8, 0.45])),
        hand_scale=float(rng.uniform(0.85, 1.15)),
        scene_seed=int(rng.integers(2 ** 31)))
    return replace(cfg, **overrides)


def _smooth_noise(rng, shape, sigma):
    field = ndi.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def render_background(cfg):
    """Static textured desk scene for ``cfg.scene_seed``, ``(3, H, W)``."""
    rng = np.random.default_rng(cfg.scene_seed)
    h, w = cfg.height, cfg.width
    palette = np.array([[0.45, 0.47, 0.50], [0.30, 0.32, 0.36], [0.55, 0.52, 0.46],
                        [0.25, 0.30, 0.42], [0.62, 0.64, 0.66], [0.38, 0.44, 0.34]])
    c0, c1 = palette[rng.choice(len(palette), 2, replace=False)]
    blend = 0.5 + 0.5 * np.tanh(_smooth_noise(rng, (h, w), 14))
    img = c0[:, None, None] * blend + c1[:, None, None] * (1 - blend)
    # a few desk objects
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(3, 7))):
        oh, ow = rng.integers(h // 10, h // 3), rng.integers(w // 10, w // 3)
        top, left = rng.integers(0, h - oh), rng.integers(0, w - ow)
        col = palette[rng.integers(len(palette))] * rng.uniform(0.6, 1.4)
        inside = (yy >= top) & (yy < top + oh) & (xx >= left) & (xx < left + ow)
        img[:, inside] = np.clip(col, 0, 1)[:, None]
    img = img * (1.0 + 0.08 * _smooth_noise(rng, (h, w), 1.0))
    return np.clip(img, 0.0, 1.0)


def _hand_texture(cfg):
    rng = np.random.default_rng(cfg.scene_seed + 7919)
    h, w = cfg.height, cfg.width
    skin = 1.0 + 0.07 * _smooth_noise(rng, (2 * h, 2 * w), 1.5)
    if not cfg.glove:
        return skin, skin
    yy = np.arange(2 * h)[:, None]
    return skin, skin * (1.0 + 0.12 * np.sign(np.sin(yy * 2 * np.pi / 6.0)))


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _capsule(yy, xx, p0, p1, radius):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx)
    t = np.clip(t, 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= radius ** 2


def hand_masks(cfg, cy, cx, pose, scale, side):
    """Boolean ``(hand, arm)`` masks for one hand centered at ``(cy, cx)``.

    ``side`` is -1 for the left hand (arm toward the lower left) and +1
    for the right; ``pose`` is ``"open"`` or ``"fist"``.
    """
    h, w = cfg.height, cfg.width
    u = 1.25 * h * scale * cfg.hand_scale
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if pose == "open":
        hand = _ellipse(yy, xx, cy, cx, 0.12 * u, 0.09 * u)
        for k in range(4):
            fx = cx + (k - 1.5) * 0.05 * u
            hand |= _ellipse(yy, xx, cy - 0.16 * u, fx, 0.075 * u, 0.017 * u)
        # thumb points toward the body midline
        hand |= _ellipse(yy, xx, cy - 0.01 * u, cx - side * 0.11 * u, 0.028 * u, 0.06 * u)
    elif pose == "fist":
        hand = _ellipse(yy, xx, cy, cx, 0.10 * u, 0.095 * u)
        hand |= _ellipse(yy, xx, cy - 0.07 * u, cx, 0.045 * u, 0.08 * u)
    else:
        raise ValueError(f"unknown pose {pose!r}")
    wrist = (cy + 0.1 * u, cx)
    elbow = (h + 0.45 * u, cx + side * 0.5 * u)
    arm = _capsule(yy, xx, wrist, elbow, 0.075 * u) & ~hand
    return hand, arm


def render_frame(cfg, background, texture, hands, rng):
    """Compose one frame; ``hands`` is a list of ``(cy, cx, pose, scale, side)``
    and ``texture`` the ``(skin, hand)`` pair of texture fields.

    Returns ``(frame, mask)`` with mask covering hand and arm pixels.
    """
    h, w = cfg.height, cfg.width
    img = background.copy()
    mask = np.zeros((h, w), dtype=bool)
    for cy, cx, pose, scale, side in hands:
        hand, arm = hand_masks(cfg, cy, cx, pose, scale, side)
        oy, ox = int(round(h - cy)), int(round(w - cx))
        oy, ox = min(max(oy, 0), h), min(max(ox, 0), w)
        skin = texture[0][oy:oy + h, ox:ox + w]
        tex = texture[1][oy:oy + h, ox:ox + w]
        if cfg.glove:
            hand_col = np.asarray(cfg.glove_color)
        else:
            hand_col = np.asarray(cfg.palm_color if pose == "open" else cfg.dorsal_color)
        img[:, arm] = np.clip(np.asarray(cfg.arm_color)[:, None] * skin[arm], 0, 1)
        img[:, hand] = np.clip(hand_col[:, None] * tex[hand], 0, 1)
        mask |= hand | arm
    img = img * cfg.brightness
    if cfg.jitter > 0:
        a = int(np.ceil(cfg.jitter))
        dy, dx = (int(v) for v in rng.integers(-a, a + 1, size=2))
        img = np.stack([ndi.shift(c, (dy, dx), order=0, mode="nearest") for c in img])
        mask = ndi.shift(mask.astype(np.uint8), (dy, dx), order=0, mode="constant") > 0
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise * cfg.brightness, img.shape)
    return _quantize8(img), mask.astype(np.float64)


def _quantize8(img):
    # 8-bit camera levels, so frames survive a PNG round trip exactly
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _smoothstep(s):
    return s * s * (3.0 - 2.0 * s)


def gesture_track(cfg, height_offset=0.0):
    """Per-frame left-hand ``(cy, cx, pose)`` for the calibration gesture.

    Phase one slides an open palm from outside the frame edge to near the
    middle; phase two slides a fist back out. The right hand mirrors it.
    ``height_offset`` shifts the hands vertically, as a fraction of the
    frame height.
    """
    h, w = cfg.height, cfg.width
    cy = (0.55 + height_offset) * h
    start, stop = -0.22 * w, 0.36 * w
    track = []
    n1, n2 = cfg.phase1_frames, cfg.phase2_frames
    for k in range(n1):
        s = _smoothstep(k / (n1 - 1))
        track.append((cy, start + (stop - start) * s, "open"))
    for k in range(n2):
        s = _smoothstep(k / (n2 - 1))
        track.append((cy, stop + (start - stop) * s, "fist"))
    return track


def synth_gesture_sequence(cfg, rng):
    """Render a calibration gesture. Returns ``(frames, masks)`` lists.

    Each call performs the gesture at a slightly different height, so
    repeated demonstrations are not identical.
    """
    background = render_background(cfg)
    texture = _hand_texture(cfg)
    offset = rng.uniform(-0.07, 0.07)
    frames, masks = [], []
    for cy, cx, pose in gesture_track(cfg, offset):
        hands = [(cy, cx, pose, 1.0, -1), (cy, cfg.width - 1 - cx, pose, 1.0, 1)]
        frame, mask = render_frame(cfg, background, texture, hands, rng)
        frames.append(frame)
        masks.append(mask)
    return frames, masks


def _free_path(kind, n, h, w, side, rng):
    t = np.linspace(0.0, 1.0, n)
    home_x = (0.3 if side < 0 else 0.7) * w
    if kind == "circle":
        r = rng.uniform(0.12, 0.2) * h
        turns = rng.uniform(1.2, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * turns * t
        cy = 0.5 * h + r * np.sin(ang)
        cx = home_x + r * np.cos(ang)
        scale = np.ones(n)
    elif kind == "diagonal":
        amp = rng.uniform(0.12, 0.2)
        tri = 2.0 * np.abs((t * rng.uniform(1.5, 2.5) + rng.uniform(0.25, 0.75)) % 1.0 - 0.5) * 2.0 - 1.0
        cy = 0.5 * h + amp * h * tri
        cx = home_x + side * amp * w * tri * 0.7
        scale = np.ones(n)
    elif kind == "scale":
        cy = 0.5 * h + 0.05 * h * np.cos(2 * np.pi * t)
        cx = home_x + 0.05 * w * np.sin(2 * np.pi * t)
        scale = 1.0 + 0.25 * np.sin(2 * np.pi * rng.uniform(1.0, 2.0) * t)
    else:
        raise ValueError(kind)
    return cy, cx, scale


PATH_KINDS = ("circle", "diagonal", "scale")


def test_tracks(cfg, rng):
    """Per-hand free-motion tracks: lists of ``(cy, cx, pose, scale)``."""
    n = cfg.test_frames
    tracks = []
    for side in (-1, 1):
        kind = PATH_KINDS[int(rng.integers(len(PATH_KINDS)))]
        cy, cx, scale = _free_path(kind, n, cfg.height, cfg.width, side, rng)
        switch = int(rng.integers(n // 4, 3 * n // 4))
        first = "open" if rng.random() < 0.5 else "fist"
        other = "fist" if first == "open" else "open"
        poses = [first if k < switch else other for k in range(n)]
        tracks.append([(cy[k], cx[k], poses[k], scale[k]) for k in range(n)])
    return tracks


def synth_test_sequence(cfg, rng):
    """Held-out frames of the same user and scene moving freely."""
    background = render_background(cfg)
    texture = _hand_texture(cfg)
    left, right = test_tracks(cfg, rng)
    frames, masks = [], []
    for (ly, lx, lp, ls), (ry, rx, rp, rs) in zip(left, right):
        hands = [(ly, lx, lp, ls, -1), (ry, rx, rp, rs, 1)]
        frame, mask = render_frame(cfg, background, texture, hands, rng)
        frames.append(frame)
        masks.append(mask)
    return frames, masks


def background_frames(cfg, n, rng):
    """Hand-free views of the same scene, panned by a few pixels each, used
    for background augmentation."""
    background = render_background(cfg)
    out = []
    for _ in range(n):
        dy, dx = rng.integers(-6, 7, size=2)
        img = np.stack([ndi.shift(c, (int(dy), int(dx)), order=0, mode="reflect")
                        for c in background])
        img = img * cfg.brightness
        if cfg.noise > 0:
            img = img + rng.normal(0.0, cfg.noise * cfg.brightness, img.shape)
        out.append(_quantize8(img))
    return out


def mask_centroids(masks):
    """Centroid ``(y, x)`` per mask (NaN for empty masks)."""
    out = []
    for m in masks:
        ys, xs = np.nonzero(np.asarray(m) > 0.5)
        out.append((ys.mean(), xs.mean()) if ys.size else (np.nan, np.nan))
    return np.array(out)


def trajectory_correlation(track_a, track_b):
    """Mean per-axis Pearson correlation between two ``(n, 2)`` trajectories
    after resampling both to a common length.

    Axes are correlated separately so the offset between the y and x ranges
    does not count as agreement.
    """
    a = np.asarray(track_a, dtype=np.float64)
    b = np.asarray(track_b, dtype=np.float64)
    n = max(len(a), len(b))
    ta = np.linspace(0, 1, len(a))
    tb = np.linspace(0, 1, len(b))
    t = np.linspace(0, 1, n)
    corr = []
    for k in range(a.shape[1]):
        ra = np.interp(t, ta, a[:, k])
        rb = np.interp(t, tb, b[:, k])
        if ra.std() == 0 or rb.std() == 0:
            corr.append(0.0)
        else:
            corr.append(np.corrcoef(ra, rb)[0, 1])
    return float(np.mean(corr))
