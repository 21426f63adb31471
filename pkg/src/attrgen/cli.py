"""Command-line driver.

Verbs mirror the pipeline stages; every verb takes --config plus optional
--seed / --out overrides. Exit code 0 on success; on failure a single
machine-readable JSON error line goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ExperimentConfig
from . import pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrgen",
                                     description="attribute-controlled adversarial text pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="experiment config JSON")
        cmd.add_argument("--seed", type=int, default=None, help="override config seed")
        cmd.add_argument("--out", default=None, help="override output directory")
        return cmd

    add("synth", "generate the synthetic dataset splits and vocabulary")
    clf = add("train-classifier", "train the task or attribute classifier")
    clf.add_argument("--role", choices=("task", "attribute"), required=True)
    add("pretrain", "stage 1: reconstruction pre-training of the generator")
    add("train-attr", "stage 2: attribute-transfer training of the generator")
    add("attack", "attribute-search attacks with the stage-2 generator")
    add("baseline-attack", "greedy word-substitution attacks")
    add("eval", "metrics, transferability and adversarial-training experiments")
    gen = add("generate", "rewrite a dataset split under a target attribute")
    gen.add_argument("--input-split", default="attack_pool")
    gen.add_argument("--target-attribute", type=int, default=None)
    add("all", "full pipeline end to end")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "synth":
            result = pipeline.run_synth(cfg)
        elif args.command == "train-classifier":
            result = pipeline.run_train_classifier(cfg, args.role)
        elif args.command == "pretrain":
            result = pipeline.run_pretrain(cfg)
        elif args.command == "train-attr":
            result = pipeline.run_train_attr(cfg)
        elif args.command == "attack":
            result = pipeline.run_attack(cfg)
        elif args.command == "baseline-attack":
            result = pipeline.run_baseline_attack(cfg)
        elif args.command == "eval":
            result = pipeline.run_eval(cfg)
        elif args.command == "generate":
            result = pipeline.run_generate(cfg, input_split=args.input_split,
                                           target_attribute=args.target_attribute)
        elif args.command == "all":
            result = pipeline.run_all(cfg)
        else:  # pragma: no cover
            raise ValueError(f"unknown command {args.command!r}")
    except Exception as err:  # single machine-readable error line
        print(json.dumps({"error": str(err), "type": type(err).__name__,
                          "command": args.command}), file=sys.stderr)
        return 1
    summary = {k: v for k, v in result.items()} if isinstance(result, dict) else {"ok": True}
    print(json.dumps({"command": args.command, "ok": True,
                      "run_dir": str(cfg.run_dir()),
                      "summary": _shorten(summary)}))
    return 0


def _shorten(summary: dict) -> dict:
    out = {}
    for key, value in summary.items():
        if isinstance(value, list) and len(value) > 6:
            out[key] = value[-1]
        else:
            out[key] = value
    return out


if __name__ == "__main__":
    sys.exit(main())
