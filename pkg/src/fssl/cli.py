"""Command line entry point: ``fssl <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment as ex
from .errors import FsslError

SUBCOMMANDS = ("datagen", "preprocess", "pretrain", "retrain", "evaluate", "run", "compare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fssl", description="Federated semi-supervised traffic classification")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(ex.PRESETS), default="paper",
                        help="defaults to start from before --config and flags (default: paper)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--mode", choices=ex.MODES)
    common.add_argument("--sampling", choices=["simple", "incremental", "both"],
                        help="'both' only makes sense for compare")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set federation.R=5")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "datagen": "generate synthetic flow records",
        "preprocess": "sample subflows, compute flow features, shard clients",
        "pretrain": "federated (or centralized) pretraining",
        "retrain": "server-side supervised retraining",
        "evaluate": "evaluate the classifier on the server test split",
        "run": "full pipeline",
        "compare": "FSSL vs centralized on identical preprocessing",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "run" or name == "compare":
            p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ex.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out:
        overrides["out"] = args.out
    if args.mode:
        overrides["mode"] = args.mode
    if args.sampling == "both":
        overrides["compare.methods"] = "simple,incremental"
    elif args.sampling:
        overrides["sampling.method"] = args.sampling
    return ex.load_config(args.config, overrides, args.preset)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if getattr(args, "print_config", False):
            sys.stdout.write(ex.dump_config(cfg))
            return 0
        cmd = args.command
        if cmd == "datagen":
            unl, lab = ex.stage_datagen(cfg)
            print(f"wrote {len(unl)} unlabelled and {len(lab)} labelled flows under {cfg.out}/data")
        elif cmd == "preprocess":
            part = ex.stage_preprocess(cfg)
            print(json.dumps(part.meta, sort_keys=True))
        elif cmd == "pretrain":
            _, records = ex.stage_pretrain(cfg)
            print(f"pretrained ({cfg.mode}); checkpoint {ex.run_dir(cfg) / 'pretrain.ckpt'}")
        elif cmd == "retrain":
            ex.stage_retrain(cfg)
            print(f"classifier {ex.run_dir(cfg) / 'classifier.ckpt'}")
        elif cmd == "evaluate":
            m = ex.stage_evaluate(cfg)
            print(f"accuracy {m.accuracy:.4f}  macro F1 {m.macro.f1:.4f}  ({ex.run_dir(cfg) / 'metrics.json'})")
        elif cmd == "run":
            m, _ = ex.run_pipeline(cfg)
            print(f"accuracy {m.accuracy:.4f}  macro F1 {m.macro.f1:.4f}  ({ex.run_dir(cfg) / 'metrics.json'})")
        elif cmd == "compare":
            report = ex.compare_modes(cfg)
            for b in report["blocks"]:
                print(f"{b['sampling']:<12} {b['mode']:<12} accuracy {b['metrics']['accuracy']:.4f}")
            for method, gap in report["accuracy_gap"].items():
                print(f"{method:<12} centralized - fssl = {100 * gap:+.2f} points")
    except (FsslError, OSError) as exc:
        print(f"fssl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
