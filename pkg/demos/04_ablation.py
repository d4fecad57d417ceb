"""An ablation study on a shared synthetic dataset.

Compares identity weighting against precision weighting when the
pseudo-label boundaries are corrupted. Both arms see the same frames and
labels; only the loss weighting differs.

    python3 demos/04_ablation.py [out_dir]
"""
import sys
from pathlib import Path

from gestboot.harness import ablation
from gestboot.harness.config import Config

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/04")
out.mkdir(parents=True, exist_ok=True)
config = Config.from_text(f"""\
height = 48
width = 64
phase_frames = 20
test_frames = 20
test_videos = 1
gesture_users = 4
gesture_epochs = 15
mc_samples = 20
appearance_epochs = 25
background_frames = 10
out_dir = {out / "work"}
""")

results = ablation.run_ablation("uncertainty", config, seeds=[0, 1, 2])
print(ablation.format_table("uncertainty", results))
a, b = results[0].config, results[1].config
print("configs of the two arms differ only in:", ablation.config_diff(a, b))
