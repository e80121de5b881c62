"""Command-line entry point.

One JSON config drives every command; ``--set key=value`` overrides single
entries so ablation scripts differ in one key only. Exit codes: 0 success,
1 validation/usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import eval_viz, trainer
from .checkpoint import inspect_checkpoint
from .errors import ConfigError, MtvsslError
from .video_data import generate_corpus, load_frame_directory, write_frame_directory

logger = logging.getLogger(__name__)


class _UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _add_common(sub):
    sub.add_argument("--config", help="path to the JSON config document")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-key override, e.g. trainer.variant=no_kd (repeatable)",
    )
    sub.add_argument("--out", default="runs/out", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="mtvssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate-data", "render the synthetic corpus to frame directories"),
        ("pretrain", "run multi-task pre-training"),
        ("probe", "linear-probe a pre-trained checkpoint"),
        ("ablate", "train and probe all three variants"),
        ("visualize", "render CAM overlays for a checkpoint"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    insp = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary")
    insp.add_argument("checkpoint", help="checkpoint file to inspect")
    return parser


def _resolve(args) -> tuple[dict, "config_mod.ExperimentConfig", Path]:
    overrides = config_mod.merge_overrides(args.overrides)
    doc = config_mod.load_config(args.config, overrides)
    exp = config_mod.build_experiment(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = dict(doc)
    snapshot["config_hash"] = config_mod.config_hash(doc)
    (out / "resolved_config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True), encoding="utf-8"
    )
    return doc, exp, out


def _load_corpus(exp, need_test: bool = True):
    data = exp.data_options
    if data["source"] == "synthetic":
        train = generate_corpus(exp.scene, data["train_videos_per_action"], exp.seed, "train")
        test = generate_corpus(exp.scene, data["test_videos_per_action"], exp.seed, "test")
        return train, test
    if data["source"] == "directory":
        if not data["data_dir"]:
            raise ConfigError("data.source=directory requires data.data_dir")
        train = load_frame_directory(data["data_dir"], data["manifest"])
        test = []
        if data["test_manifest"]:
            test = load_frame_directory(data["data_dir"], data["test_manifest"])
        elif need_test:
            raise ConfigError("this command needs data.test_manifest for the test split")
        return train, test
    raise ConfigError(f"unknown data.source {data['source']!r}")


def _eval_geometry(exp) -> tuple[int, tuple[int, int]]:
    return exp.trainer.clip_len, (exp.augment.out_height, exp.augment.out_width)


def cmd_generate_data(args) -> int:
    _, exp, out = _resolve(args)
    train, test = _load_corpus(exp)
    train_manifest = write_frame_directory(train, out / "train")
    test_manifest = write_frame_directory(test, out / "test")
    print(f"wrote {len(train)} train videos ({train_manifest})")
    print(f"wrote {len(test)} test videos ({test_manifest})")
    return 0


def cmd_pretrain(args) -> int:
    doc, exp, out = _resolve(args)
    train, _ = _load_corpus(exp, need_test=False)
    result = trainer.pretrain(
        train,
        exp.model,
        exp.loss,
        exp.trainer,
        exp.augment,
        exp.teacher,
        out,
        resolved_config=doc,
    )
    print(
        f"pretrained variant={exp.trainer.variant} steps={result.steps} "
        f"final_total={result.final_total:.4f} checkpoint={result.checkpoint_path}"
    )
    return 0


def cmd_probe(args) -> int:
    doc, exp, out = _resolve(args)
    ckpt = doc["eval"]["checkpoint"]
    if not ckpt:
        raise ConfigError("probe requires eval.checkpoint")
    model, _ = trainer.load_pretrained(ckpt)
    train, test = _load_corpus(exp)
    clip_len, out_size = _eval_geometry(exp)
    if doc["eval"]["mode"] == "finetune":
        result = eval_viz.finetune_probe(
            model,
            train,
            test,
            clip_len,
            out_size,
            seed=exp.seed,
            epochs=doc["eval"]["finetune_epochs"],
            lr=doc["eval"]["finetune_lr"],
        )
    else:
        result = eval_viz.probe_videos(
            model,
            train,
            test,
            clip_len,
            out_size,
            seed=exp.seed,
            max_iter=doc["eval"]["max_iter"],
            l2_reg=doc["eval"]["l2_reg"],
        )
    eval_viz.emit_report([result], out)
    print(f"variant={result.variant} acc@1={result.acc_at_1:.4f} acc@5={result.acc_at_5:.4f}")
    return 0


def cmd_ablate(args) -> int:
    doc, exp, out = _resolve(args)
    train, test = _load_corpus(exp)
    report = trainer.run_ablation_suite(
        train,
        test,
        exp.model,
        exp.loss,
        exp.trainer,
        exp.augment,
        exp.teacher,
        out,
        resolved_config=doc,
        probe_max_iter=doc["eval"]["max_iter"],
    )
    print((out / "ablation_report.txt").read_text(encoding="utf-8"))
    print(f"report rows: {len(report['results'])}")
    return 0


def cmd_visualize(args) -> int:
    doc, exp, out = _resolve(args)
    ckpt = doc["eval"]["checkpoint"]
    if not ckpt:
        raise ConfigError("visualize requires eval.checkpoint")
    model, _ = trainer.load_pretrained(ckpt)
    train, test = _load_corpus(exp)
    clip_len, out_size = _eval_geometry(exp)
    weights = eval_viz.train_cam_probe(
        model, train, clip_len, out_size, seed=exp.seed, max_iter=doc["eval"]["max_iter"]
    )
    overlay_dir = out / "overlays"
    count = min(doc["eval"]["num_overlays"], len(test))
    for video in test[:count]:
        clip = eval_viz.eval_clip(video, clip_len, out_size)
        cam = eval_viz.cam_heatmap(model, weights, clip, video.action_label)
        mid = clip.frames[clip.clip_len // 2]
        eval_viz.render_overlay(mid, cam, overlay_dir / eval_viz.overlay_name(cam))
    focus = eval_viz.cam_focus_fraction(model, weights, test, clip_len, out_size)
    (out / "focus_stats.json").write_text(json.dumps(focus, indent=2), encoding="utf-8")
    print(
        f"wrote {count} overlays; actor-focus fraction "
        f"{focus['fraction']:.3f} ({focus['focused']}/{focus['total']})"
    )
    return 0


def cmd_inspect_checkpoint(args) -> int:
    summary = inspect_checkpoint(args.checkpoint)
    print(f"checkpoint: {summary['path']}")
    print(f"variant: {summary['variant']}  step: {summary['step']}  seed: {summary['seed']}")
    print(f"config_hash: {summary['config_hash']}")
    print(f"total parameters: {summary['total_parameters']}")
    for name, shape in summary["arrays"].items():
        print(f"  {name}  {tuple(shape)}")
    return 0


_HANDLERS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except MtvsslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return dispatch(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse -h/--help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
