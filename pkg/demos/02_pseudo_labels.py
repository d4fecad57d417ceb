"""Pseudo-labels with uncertainty.

Trains a small gesture network on two synthetic users, then runs
Monte-Carlo dropout on a third user's gesture. The mean map becomes the
target; the inverse variance becomes a per-pixel precision that tells the
appearance network where to trust the label.

    python3 demos/02_pseudo_labels.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from gestboot.gesture import GestureTrainCfg, make_pseudo_label, mc_predict, train_gesture_net
from gestboot.harness import synth
from gestboot.harness.metrics import f1_score
from gestboot.imagecore import write_png
from gestboot.motion import sequence_motion_stacks

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/02")
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(0)
geometry = dict(height=48, width=64, phase1_frames=10, phase2_frames=10)
users = [synth.random_user_cfg(rng, **geometry) for _ in range(3)]
sequences = [synth.synth_gesture_sequence(u, rng) for u in users]
stacks = [sequence_motion_stacks(f) for f, _ in sequences]

examples = [(s, m) for (_, masks), st in zip(sequences[:2], stacks[:2]) for s, m in zip(st, masks)]
print(f"training the gesture network on {len(examples)} frames from 2 users")
params = train_gesture_net(examples, GestureTrainCfg(epochs=15), np.random.default_rng(1))

_, masks = sequences[2]
cfg = GestureTrainCfg(mc_samples=30)
umaps = [mc_predict(params, s, cfg, np.random.default_rng([2, k])) for k, s in enumerate(stacks[2])]
labels = [make_pseudo_label(u) for u in umaps]
print(f"unseen user: gesture-net F1 {f1_score([u.mean for u in umaps], masks).f1:.3f}")

# where is the network unsure? mostly along the hand boundary
k = 8
edge = np.zeros_like(masks[k], dtype=bool)
edge[1:-1, 1:-1] = masks[k][1:-1, 1:-1] != masks[k][:-2, 1:-1]
p = labels[k].precision
print(f"frame {k}: mean precision on boundary pixels {p[edge].mean():.2f}, elsewhere {p[~edge].mean():.2f}")

for k in (4, 8, 12):
    write_png(umaps[k].mean, out / f"mean_{k:03d}.png")
    write_png(umaps[k].variance / max(umaps[k].variance.max(), 1e-12), out / f"variance_{k:03d}.png")
    write_png(labels[k].t, out / f"target_{k:03d}.png")
print(f"wrote mean, variance and target maps to {out}")
