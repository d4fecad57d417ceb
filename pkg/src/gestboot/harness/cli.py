"""Command-line entry point: ``gestboot <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or malformed inputs), 3 failed ``eval --assert`` check.
``GESTBOOT_SEED`` in the environment overrides every seed (``--seed``
options and the ``seed`` key of config files).
"""
import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .. import nn
from ..appearance import segment
from ..errors import ConfigError, FormatError, InvalidInputError
from ..imagecore import read_png, write_blob, write_png
from ..motion import ForegroundConfig, TvL1Params, fg_init, tvl1_flow
from . import ablation, pipeline, synth
from .config import DEFAULTS, SEED_ENV, Config
from .metrics import f1_score

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ASSERT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args):
    env = os.environ.get(SEED_ENV, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV}={env!r} is not an integer") from None
    return args.seed


def _cli_config(args, **values):
    """A pipeline Config for commands that take their settings as options."""
    values = {k: str(v) for k, v in values.items()}
    values["seed"] = str(_seed(args))
    return Config(values, DEFAULTS)


def _read_rgb(path):
    img = read_png(path)
    return np.stack([img] * 3) if img.ndim == 2 else img


def _expand(path, prefix=""):
    path = Path(path)
    if path.is_dir():
        files = pipeline.list_pngs(path, prefix)
        if not files:
            raise InvalidInputError(f"no PNG files in {path}")
        return files
    if not path.is_file():
        raise InvalidInputError(f"{path} does not exist")
    return [path]


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    seed = _seed(args)
    phase = args.frames if args.kind == "gesture" else synth.SynthCfg.phase1_frames
    try:
        cfg = synth.variant_cfg(args.variant, height=args.height, width=args.width,
                                phase1_frames=phase, phase2_frames=phase,
                                test_frames=args.frames,
                                jitter=args.jitter, scene_seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.kind == "gesture":
        frames, masks = synth.synth_gesture_sequence(cfg, pipeline.stage_rng(seed, pipeline.CALIB, 0))
    elif args.kind == "test":
        frames, masks = synth.synth_test_sequence(cfg, pipeline.stage_rng(seed, pipeline.TEST, 0))
    else:
        frames = synth.background_frames(cfg, args.frames, pipeline.stage_rng(seed, pipeline.BACKGROUND))
        masks = None
    pipeline.write_sequence(args.out, frames, masks)
    print(f"wrote {len(frames)} {args.kind} frames to {args.out}")


def cmd_flow(args):
    params = TvL1Params(lam=args.lam, epsilon=args.epsilon, max_iters=args.max_iters)
    flow = tvl1_flow(read_png(args.prev), read_png(args.next), params)
    write_blob(flow, args.out)
    mag = np.hypot(flow[0], flow[1])
    print(f"flow {flow.shape[1]}x{flow.shape[2]}: mean |w| = {mag.mean():.4f} px, max {mag.max():.4f} px")


def cmd_bgsub(args):
    files = _expand(args.frames, "frame_")
    frames = [_read_rgb(p) for p in files]
    cfg = ForegroundConfig(prior_background=args.prior, learning_rate=args.learning_rate,
                           smoothing=args.smoothing, num_bins=args.bins)
    model = fg_init(frames[0], cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        write_png(model.update(frame), out / f"prob_{k:03d}.png")
    print(f"wrote {len(frames)} foreground maps to {out}")


def _sequence_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"data directory {root} does not exist")
    dirs = [root] if pipeline.list_pngs(root, "frame_") else sorted(p for p in root.iterdir() if p.is_dir())
    dirs = [d for d in dirs if pipeline.list_pngs(d, "frame_")]
    if not dirs:
        raise InvalidInputError(f"no frame_*.png sequences under {root}")
    return dirs


def cmd_train_gesture(args):
    config = _cli_config(args, gesture_epochs=args.epochs, gesture_lr=args.lr,
                         gesture_inputs=args.inputs)
    user_stacks = []
    for d in _sequence_dirs(args.data):
        frames = pipeline.read_frame_dir(d, prefix="frame_")
        masks = pipeline.read_mask_dir(d, prefix="mask_")
        if len(masks) != len(frames):
            raise InvalidInputError(f"{d}: {len(frames)} frames but {len(masks)} masks")
        user_stacks.append((pipeline.motion_stacks(frames), masks))
    params = pipeline.train_reference_gesture_net(config, user_stacks)
    nn.save_params(params, nn.toy_spec(3, 2, dropout=pipeline.gesture_cfg(config).dropout), args.out)
    print(f"trained gesture network on {len(user_stacks)} sequence(s); saved to {args.out}")


def cmd_pseudo_label(args):
    config = _cli_config(args, mc_samples=args.samples, eps_var=args.eps_var,
                         gesture_inputs=args.inputs)
    params, _ = nn.load_params(args.params)
    frames = pipeline.read_frame_dir(args.frames, prefix="frame_")
    stacks = pipeline.motion_stacks(frames, pipeline.input_channels(config))
    labels, umaps = pipeline.pseudo_labels(params, stacks, config, args.video)
    pipeline.write_labels(args.out, labels, umaps)
    print(f"wrote {len(labels)} pseudo-labels to {args.out}")


def cmd_train_appearance(args):
    config = _cli_config(args, appearance_epochs=args.epochs, appearance_lr=args.lr,
                         use_precision=str(not args.no_precision).lower(),
                         augment=args.aug or "none", appearance_dropout=args.dropout,
                         dropout_ratio=args.ratio)
    frames = pipeline.read_frame_dir(args.frames, prefix="frame_")
    labels = pipeline.read_labels(args.labels)
    if len(labels) != len(frames):
        raise InvalidInputError(f"{len(frames)} frames but {len(labels)} labels")
    background = pipeline.read_frame_dir(args.background) if args.background else []
    params = pipeline.train_appearance(frames, labels, config, background, 1)
    nn.save_params(params, nn.toy_spec(3, 1, dropout=pipeline.appearance_cfg(config).dropout), args.out)
    print(f"trained appearance network on {len(frames)} frames; saved to {args.out}")


def cmd_segment(args):
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    params, _ = nn.load_params(args.params)
    inputs = _expand(args.input, "frame_")
    out = Path(args.out)
    if len(inputs) > 1 or Path(args.input).is_dir():
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / p.name.replace("frame_", "mask_") for p in inputs]
    else:
        targets = [out]
    for src, dst in zip(inputs, targets):
        prob = segment(params, _read_rgb(src))
        write_png(prob if args.prob else (prob >= args.threshold).astype(np.float64), dst)
    print(f"segmented {len(inputs)} frame(s)")


def cmd_eval(args):
    preds = [read_png(p) for p in _expand(args.pred, args.pred_prefix)]
    truths = [read_png(p) for p in _expand(args.truth, args.truth_prefix)]
    preds = [p if p.ndim == 2 else p.mean(axis=0) for p in preds]
    truths = [(t if t.ndim == 2 else t.mean(axis=0)) > 0.5 for t in truths]
    rep = f1_score(preds, truths, args.threshold)
    print(f"frames {len(preds)}  precision {rep.precision:.4f}  recall {rep.recall:.4f}  F1 {rep.f1:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    if args.assert_f1 is not None and not rep.f1 >= args.assert_f1:
        print(f"FAIL: F1 {rep.f1:.4f} < {args.assert_f1}", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_ablate(args):
    config = Config.load(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    if seeds is not None and os.environ.get(SEED_ENV, "").strip():
        seeds = [config.get_int("seed")]
    results = ablation.run_ablation(args.study, config, seeds)
    table = ablation.format_table(args.study, results)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table, encoding="utf-8")
        with open(out.with_suffix(".jsonl"), "w", encoding="utf-8") as fh:
            for r in results:
                fh.write(json.dumps({"study": args.study, "variant": r.variant, "seed": r.seed,
                                     "report": r.report.to_dict(), "config": r.config},
                                    sort_keys=True) + "\n")


def cmd_pipeline(args):
    report = pipeline.run_pipeline(Config.load(args.config))
    print(report.to_text(), end="")


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="gestboot", description="Gesture-bootstrapped hand segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=0, help=f"random seed ({SEED_ENV} overrides)")
        return sp

    s = seeded(sub.add_parser("synth", help="render a synthetic sequence with truth masks"))
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("gesture", "test", "background"), default="gesture")
    s.add_argument("--variant", choices=synth.VARIANTS, default="normal")
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--frames", type=int, default=30,
                   help="frames per gesture phase, or total frames for test/background")
    s.add_argument("--jitter", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("flow", help="TV-L1 optical flow between two frames")
    s.add_argument("--prev", required=True)
    s.add_argument("--next", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lam", type=float, default=0.15)
    s.add_argument("--epsilon", type=float, default=0.01)
    s.add_argument("--max-iters", type=int, default=300)
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("bgsub", help="foreground probability maps for a frame sequence")
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--prior", type=float, default=0.8)
    s.add_argument("--learning-rate", type=float, default=0.6)
    s.add_argument("--smoothing", type=float, default=0.0)
    s.add_argument("--bins", type=int, default=16)
    s.set_defaults(func=cmd_bgsub)

    s = seeded(sub.add_parser("train-gesture", help="train the gesture network on annotated gestures"))
    s.add_argument("--data", required=True, help="frame_/mask_ PNG sequence dir, or a dir of them")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=int(DEFAULTS["gesture_epochs"]))
    s.add_argument("--lr", type=float, default=float(DEFAULTS["gesture_lr"]))
    s.add_argument("--inputs", default=DEFAULTS["gesture_inputs"])
    s.set_defaults(func=cmd_train_gesture)

    s = seeded(sub.add_parser("pseudo-label", help="MC-dropout pseudo-labels for a calibration video"))
    s.add_argument("--params", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int, default=int(DEFAULTS["mc_samples"]))
    s.add_argument("--eps-var", type=float, default=float(DEFAULTS["eps_var"]))
    s.add_argument("--inputs", default=DEFAULTS["gesture_inputs"])
    s.add_argument("--video", type=int, default=0, help="video index (selects the random stream)")
    s.set_defaults(func=cmd_pseudo_label)

    s = seeded(sub.add_parser("train-appearance", help="train the person-specific appearance network"))
    s.add_argument("--frames", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-precision", action="store_true", help="identity instead of precision weighting")
    s.add_argument("--aug", default="", help="comma list of brightness,transform,background")
    s.add_argument("--background", help="directory of hand-free frames")
    s.add_argument("--epochs", type=int, default=int(DEFAULTS["appearance_epochs"]))
    s.add_argument("--lr", type=float, default=float(DEFAULTS["appearance_lr"]))
    s.add_argument("--dropout", default=DEFAULTS["appearance_dropout"])
    s.add_argument("--ratio", type=float, default=float(DEFAULTS["dropout_ratio"]))
    s.set_defaults(func=cmd_train_appearance)

    s = sub.add_parser("segment", help="hand masks from a trained appearance network")
    s.add_argument("--params", required=True)
    s.add_argument("--in", dest="input", required=True, help="PNG file or directory of frame_*.png")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--prob", action="store_true", help="write probabilities instead of binary masks")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("eval", help="pixel F1 of predictions against truth masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--pred-prefix", default="")
    s.add_argument("--truth-prefix", default="")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--assert", dest="assert_f1", type=float, metavar="MIN_F1",
                   help="exit with status 3 unless F1 >= MIN_F1")
    s.add_argument("--out", help="write the report as JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run one ablation study")
    s.add_argument("--study", required=True, help=", ".join(ablation.STUDIES))
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    s.add_argument("--out", help="write the table here (records go next to it as .jsonl)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("pipeline", help="run the full two-stage pipeline from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except (UsageError, ConfigError, ablation.UnknownStudyError) as exc:
        print(f"gestboot {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, FormatError, OSError) as exc:
        print(f"gestboot {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
