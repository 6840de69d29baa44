"""Command-line entry point.

Exit codes: 0 success, 2 configuration or argument error, 3 missing or
inconsistent state (an upstream stage has not run), 4 runtime failure
including a non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .errors import ArgumentError, ConfigError, CranisynthError, NaNLossError, StateError

EXIT_OK, EXIT_CONFIG, EXIT_STATE, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("cranisynth")


def _globals(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML/JSON experiment config")
    parser.add_argument("--seed", type=int, default=default, help="override the experiment and network seed")
    parser.add_argument("--out", default=default, help="override out_dir")
    parser.add_argument("--data", default=default, help="override data_dir")
    parser.add_argument("--device", choices=("cpu", "gpu"), default=default)
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="cranisynth", description=__doc__.splitlines()[0])
    _globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("phantom", "generate the phantom cohort"),
        ("preprocess", "bed removal, registration, bias correction, split and atlas"),
        ("train-synth", "train the MRI-to-CT synthesis model"),
        ("train-seg", "train the atlas-guided segmentation model"),
        ("finetune-seg", "fine-tune the segmentation model on synthetic CTs"),
        ("evaluate", "test-split metrics, statistics and figures"),
        ("run", "every stage in order"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    p = sub.add_parser("infer", parents=[common], help="sCT, suture heatmap and labels for one MRI volume")
    p.add_argument("mri", help="path to a preprocessed MRI .vol")
    p.add_argument("--dest", required=True, help="output directory")
    p.add_argument("--no-ft", action="store_true", help="use the stage-2 model instead of the fine-tuned one")
    p.add_argument("--suture-threshold", type=float, default=0.5)
    p.add_argument("--force-suture", action="store_true")
    p = sub.add_parser("stats", parents=[common], help="paired Wilcoxon/TOST panel from two metrics.csv files")
    p.add_argument("reference", help="metrics.csv of the reference condition")
    p.add_argument("candidate", help="metrics.csv of the compared condition")
    p.add_argument("--dest", required=True, help="stats.json path")
    p.add_argument("--dice-bound", type=float, default=P.DEFAULT_BOUNDS["dice"])
    p.add_argument("--hd95-bound", type=float, default=P.DEFAULT_BOUNDS["hd95_mm"])
    p = sub.add_parser("report", parents=[common], help="plain-text summary of a finished evaluation")
    p.add_argument("--dest", help="write the report here instead of stdout")
    return parser


def resolve_config(args):
    cfg = P.load_config(args.config) if getattr(args, "config", None) else P.ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
        changes["network"] = {**cfg.network.to_dict(), "seed": args.seed}
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "data", None):
        changes["data_dir"] = args.data
    if getattr(args, "device", None):
        changes["device"] = args.device
    return cfg.replace(**changes) if changes else cfg


def _stats_from_csv(args):
    from .metrics import read_metrics_csv
    from .stats import format_panel

    panel = P.panel_from_rows(read_metrics_csv(args.reference), read_metrics_csv(args.candidate),
                              {"dice": args.dice_bound, "hd95_mm": args.hd95_bound})
    P.write_json(args.dest, panel)
    print(format_panel(panel))


def _report(cfg, dest):
    from .stats import format_panel

    out = P.eval_stage(cfg).require(cfg.out_dir)
    metrics = json.loads((out / "metrics.json").read_text())
    panels = json.loads((out / "stats.json").read_text())
    lines = [f"evaluation {out}", ""]
    for cond, s in metrics["summary"].items():
        lines.append(f"{cond:<8} n={s['n']}  ssim {s['ssim']:.4f}  mean bone dice {s['mean_bone_dice']:.4f}"
                     f"  suture dice {s['suture_dice']:.4f}")
    for name, panel in panels.items():
        lines += ["", name, format_panel(panel)]
    text = "\n".join(lines) + "\n"
    if dest:
        Path(dest).write_text(text)
    else:
        sys.stdout.write(text)


def _infer(cfg, args):
    from .models import load_checkpoint
    from .volume import Modality, Volume, load_volume, save_volume

    mri = load_volume(args.mri)
    if getattr(mri, "modality", None) is not Modality.MRI:
        raise ArgumentError(f"{args.mri} is not an MRI volume")
    data = P.load_prepared(cfg)
    synth, _ = load_checkpoint(P.synth_stage(cfg).require(cfg.out_dir) / "best")
    stage = P.seg_stage(cfg) if args.no_ft else P.finetune_stage(cfg)
    seg, _ = load_checkpoint(stage.require(cfg.out_dir) / "best")
    sct, probs, labels = P.infer(mri, data.atlas, synth, seg, args.suture_threshold, args.force_suture)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    save_volume(sct, dest / "sct")
    # the float volume format has no probability modality; the heatmap rides on the sCT tag
    save_volume(Volume(probs.suture_heatmap, mri.spacing_mm, Modality.SCT), dest / "suture_heatmap")
    save_volume(labels, dest / "labels")
    print(dest)


def dispatch(args):
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "stats":
        _stats_from_csv(args)
        return
    if cmd == "report":
        _report(cfg, args.dest)
        return
    if cmd == "infer":
        _infer(cfg, args)
        return
    steps = {
        "phantom": P.run_phantom,
        "preprocess": P.run_preprocess,
        "train-synth": P.train_synthesis,
        "train-seg": P.train_segmentation,
        "finetune-seg": P.finetune_segmentation,
        "evaluate": P.run_full_evaluation,
        "run": P.run_all,
    }
    print(steps[cmd](cfg))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        dispatch(args)
    except (ConfigError, ArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except NaNLossError as exc:
        print(f"aborted: {exc} (batch {exc.batch_id})", file=sys.stderr)
        return EXIT_RUNTIME
    except (CranisynthError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
