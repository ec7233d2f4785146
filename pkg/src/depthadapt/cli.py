"""Command-line entry point: ``depthadapt <command> [options] [key=value ...]``.

Exit status 0 on success, 2 when the configuration is rejected, 1 on any
other failure. Errors are one line on stderr: ``error: <Kind>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .dataset import generate_toy_domain_pair, load_manifest
from .exceptions import ConfigurationError
from .metrics import METRIC_NAMES, EvalConfig, evaluate_batch
from .model import init_model, load_checkpoint, predict
from .trainer import TrainConfig, Trainer, _source_arrays, checkpoint_file, latest_checkpoint
from .uncertainty import uncertainty_score

log = logging.getLogger("depthadapt")

COMMANDS = ("gen-data", "pretrain", "adapt", "evaluate", "uncertainty", "report")


def runs_root():
    return Path(os.environ.get("DEPTHADAPT_RUNS_DIR", "runs"))


def _key_help():
    return "config keys (set in --config or as key=value):\n  " + "\n  ".join(config_mod.describe_keys())


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file")
    common.add_argument("positional", nargs="*", metavar="key=value", help="config overrides, applied last")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="depthadapt", description="Toy-scale depth domain adaptation.",
                                     epilog=_key_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="write the toy source/target pair",
                       epilog=_key_help(), formatter_class=fmt)
    p.add_argument("--seed", type=int, help="same as data.seed")
    p.add_argument("--root", help="same as data.root")

    for name, text in (("pretrain", "supervised CutMix pretraining on the source manifest"),
                       ("adapt", "joint source/target adaptation")):
        p = sub.add_parser(name, parents=[common], help=text, epilog=_key_help(), formatter_class=fmt)
        p.add_argument("--name", help="same as train.name")
        p.add_argument("--resume", action="store_true", help="continue from the run's latest checkpoint")
        if name == "adapt":
            p.add_argument("--init", help="pretrained checkpoint (same as train.init)")

    p = sub.add_parser("evaluate", parents=[common], help="print the seven metrics as one TSV row",
                       epilog=_key_help(), formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="ckpt-* directory or model file")
    p.add_argument("--manifest", help="labelled manifest (default: data.eval)")
    p.add_argument("--cap", type=float, help="same as metrics.cap")
    p.add_argument("--crop", choices=("garg", "none"), help="same as metrics.crop")
    p.add_argument("--json", action="store_true", help="print named values as JSON instead")

    p = sub.add_parser("uncertainty", parents=[common], help="print the flip-consistency uncertainty score",
                       epilog=_key_help(), formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", help="manifest whose images are scored (default: data.target)")

    p = sub.add_parser("report", parents=[common], help="side-by-side metrics of several runs",
                       usage="depthadapt report [options] RUN [RUN ...] [key=value ...]",
                       description="RUN is a run directory (latest checkpoint is used) or a checkpoint.",
                       epilog=_key_help(), formatter_class=fmt)
    p.add_argument("--manifest", help="labelled manifest (default: data.eval)")
    p.add_argument("--grid", help="write an input/GT/prediction PNG grid here")
    p.add_argument("--grid-rows", type=int, default=4)
    return parser


def _split_positional(args):
    """``key=value`` items are overrides; anything else is a run (report only)."""
    args.overrides = [p for p in args.positional if "=" in p]
    args.runs = [p for p in args.positional if "=" not in p]
    if args.runs and args.command != "report":
        raise ConfigurationError(f"expected key=value, got {args.runs[0]!r}")
    if args.command == "report" and not args.runs:
        raise ConfigurationError("report needs at least one run")
    return args.overrides


def resolve_config(args):
    extra = []
    for flag, key in (("seed", "data.seed"), ("root", "data.root"), ("name", "train.name"),
                      ("init", "train.init"), ("cap", "metrics.cap"), ("crop", "metrics.crop")):
        value = getattr(args, flag, None)
        if value is not None:
            extra.append(f"{key}={value}")
    return RunConfig.resolve(args.config, _split_positional(args) + extra)


def _eval_config(cfg):
    return EvalConfig(cap=cfg["metrics.cap"], crop=cfg["metrics.crop"], min_depth=cfg["metrics.min_depth"],
                      accuracy=cfg["metrics.accuracy"], sqrel=cfg["metrics.sqrel"])


def _load_net(path, cfg):
    net, _ = load_checkpoint(checkpoint_file(path))
    return net


def cmd_gen_data(args, cfg):
    root = Path(cfg["data.root"])
    generate_toy_domain_pair(cfg["data.seed"], cfg["data.n_source"], cfg["data.n_target"],
                             (cfg["data.height"], cfg["data.width"]), root, n_test=cfg["data.n_test"])
    print(root)


def _train(args, cfg, stage):
    tcfg = TrainConfig.from_run_config(cfg, stage).validate()
    run_dir = runs_root() / cfg["train.name"]
    source = _source_arrays(load_manifest(cfg.path("data.source", "source")))
    target = None
    if stage == "adapt":
        tm = load_manifest(cfg.path("data.target", "target"))
        target = (tm.images(), np.asarray(tm.ids))

    if args.resume:
        trainer = Trainer.resume(latest_checkpoint(run_dir), tcfg, source, target, run_dir)
    else:
        if stage == "adapt":
            if not cfg["train.init"]:
                raise ConfigurationError("adapt needs train.init (or --init) pointing at a pretrained checkpoint")
            net, _ = load_checkpoint(checkpoint_file(cfg["train.init"]), tcfg.model)
        else:
            net = init_model(tcfg.model, tcfg.seed_model)
        if (run_dir / "log.tsv").exists():
            raise ConfigurationError(f"run directory {run_dir} already has a log; use --resume or another name")
        trainer = Trainer(net, tcfg, source, target, run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.dump())
    trainer.run()
    print(latest_checkpoint(run_dir))


def cmd_evaluate(args, cfg):
    net = _load_net(args.checkpoint, cfg)
    manifest = load_manifest(args.manifest or cfg.path("data.eval", "target_test"))
    images, depths = manifest.arrays()
    report = evaluate_batch(predict(net, images), depths, _eval_config(cfg))
    if args.json:
        print(json.dumps(report.as_dict()))
    else:
        print(report.row())


def cmd_uncertainty(args, cfg):
    net = _load_net(args.checkpoint, cfg)
    manifest = load_manifest(args.images or cfg.path("data.target", "target"))
    print(f"{uncertainty_score(net, manifest.images()).value:.6g}")


def _run_checkpoint(path):
    path = Path(path)
    if path.is_dir() and not (path / "model.pt").exists():
        return latest_checkpoint(path)
    return path


def cmd_report(args, cfg):
    manifest = load_manifest(args.manifest or cfg.path("data.eval", "target_test"))
    images, depths = manifest.arrays()
    ecfg = _eval_config(cfg)
    print("\t".join(["run", *METRIC_NAMES]))
    preds = []
    for run in args.runs:
        net = _load_net(_run_checkpoint(run), cfg)
        pred = predict(net, images)
        preds.append(pred)
        print(f"{run}\t{evaluate_batch(pred, depths, ecfg).row()}")
    if args.grid:
        write_grid(args.grid, images, depths, preds, args.grid_rows, cfg["metrics.cap"])


def write_grid(path, images, depths, preds, rows, cap):
    """Rows of input | ground truth | one prediction per run; depth drawn as inverse-depth gray."""
    from PIL import Image

    def gray(d):
        d = np.asarray(d, np.float64).reshape(d.shape[0], d.shape[1])
        v = np.where(d > 0, 1.0 / np.clip(d, 1.0, cap), 0.0)
        return np.repeat(v[..., None], 3, axis=-1)

    rows = min(rows, len(images))
    tiles = [np.concatenate([images[i], gray(depths[i])] + [gray(p[i]) for p in preds], axis=1)
             for i in range(rows)]
    grid = np.concatenate(tiles, axis=0)
    Image.fromarray(np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)).save(path)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": lambda a, c: _train(a, c, "pretrain"),
    "adapt": lambda a, c: _train(a, c, "adapt"),
    "evaluate": cmd_evaluate,
    "uncertainty": cmd_uncertainty,
    "report": cmd_report,
}


def _fail(kind, exc):
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](args, cfg)
    except ConfigurationError as exc:
        _fail("ConfigurationError", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level error contract
        log.debug("failure", exc_info=True)
        _fail(exc.__class__.__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
