"""End to end: from a calibration gesture to a personal hand detector.

Runs the full pipeline through a config file, exactly as the CLI does
(`gestboot pipeline --config run.cfg`). A reduced frame size keeps the
demo to a few minutes; drop the geometry lines for the 96x128 default.

    python3 demos/03_pipeline.py [out_dir]
"""
import sys
from pathlib import Path

from gestboot.harness.config import Config
from gestboot.harness.pipeline import run_pipeline

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/03")
out.mkdir(parents=True, exist_ok=True)
(out / "run.cfg").write_text(f"""\
# a gloved user, two calibration videos
seed = 0
variant = glove
height = 64
width = 96
phase_frames = 30
test_frames = 20
test_videos = 1
gesture_users = 4
gesture_epochs = 15
mc_samples = 30
background_frames = 20
videos = 1,2
out_dir = {out / "run"}
""", encoding="utf-8")

report = run_pipeline(Config.load(out / "run.cfg"))
print(report.to_text())
print(f"artifacts (frames, pseudo-labels, weights, predictions) are under {out / 'run'}")
