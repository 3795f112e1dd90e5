"""Command-line entry point: ``langembed <subcommand> --out RUN_DIR``.

Exit status: 0 success, 2 missing upstream artifact, 3 config error,
4 numerical abort, 5 run directory locked, 1 anything else. Failures print
one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, TrainConfig, config_keys_help
from .tensor import NumericalError
from .training import NaNLossError

EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC, EXIT_LOCKED = 2, 3, 4, 5


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (JSON file, all optional) and defaults:\n" + config_keys_help()
    epilog += "\n\nenvironment: LD_RUN_SEED overrides the config seed."
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="run directory")
    common.add_argument("--config", type=Path, help="JSON config (default: RUN_DIR/config.json, else defaults)")
    common.add_argument("--seed", type=int)
    common.add_argument("--sat", type=_on_off, metavar="{on,off}", help="speaker-adversarial training")
    common.add_argument("--grl-lambda", type=float, help="gradient reversal scale")
    common.add_argument("--projection", type=_on_off, metavar="{on,off}", help="projection layer")
    common.add_argument("--budget", type=int, help="low-resource utterance budget for stage 2")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="langembed", description=__doc__, epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="render the synthetic corpus", epilog=epilog, formatter_class=fmt)
    sub.add_parser("pretrain-encoder", parents=[common], help="pretrain the language encoder", epilog=epilog, formatter_class=fmt)
    p = sub.add_parser("train", parents=[common], help="stage 1 or stage 2 training", epilog=epilog, formatter_class=fmt)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--from-scratch", action="store_true", help="stage 2 baseline without pretraining")
    sub.add_parser("eval", parents=[common], help="evaluate one condition", epilog=epilog, formatter_class=fmt)
    sub.add_parser("ablation", parents=[common], help="evaluate the SAT x projection grid", epilog=epilog, formatter_class=fmt)
    sub.add_parser("plot", parents=[common], help="PCA scatter plots from eval reports", epilog=epilog, formatter_class=fmt)
    sub.add_parser("run-all", parents=[common], help="full pipeline including every ablation condition",
                   epilog=epilog, formatter_class=fmt)
    return parser


def resolve_config(args, run: pipeline.RunDir) -> TrainConfig:
    if args.config is not None:
        if not args.config.exists():
            raise pipeline.MissingArtifactError(f"missing config file: {args.config}")
        config = TrainConfig.load(args.config)
    else:
        config = run.load_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    env_seed = os.environ.get("LD_RUN_SEED")
    if env_seed:
        try:
            changes["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"LD_RUN_SEED must be an integer, got {env_seed!r}") from None
    if args.sat is not None:
        changes["sat_enabled"] = args.sat
    if args.grl_lambda is not None:
        changes["grl_lambda"] = args.grl_lambda
    if args.projection is not None:
        changes["projection_enabled"] = args.projection
    if args.budget is not None:
        changes["low_resource_budget"] = args.budget
    if getattr(args, "stage", None) is not None:
        changes["stage"] = args.stage
    return config.replace(**changes).validate()


def _dispatch(args, config: TrainConfig, run: pipeline.RunDir) -> dict:
    cmd = args.command
    if cmd == "datagen":
        m = pipeline.datagen(config, run)
        return {"utterances": len(m.utterances)}
    if cmd == "pretrain-encoder":
        return pipeline.pretrain_encoder(config, run)
    if cmd == "train":
        if args.stage == 1:
            return {"checkpoint_sha256": pipeline.train_stage1(config, run)}
        return {"checkpoint_sha256": pipeline.train_stage2(config, run, from_scratch=args.from_scratch)}
    if cmd == "eval":
        r = pipeline.evaluate(config, run)
        return {"token_error_rate_mean": r["token_error_rate_mean"], "unseen": r["unseen_token_error_rate"]}
    if cmd == "ablation":
        return {c: r["token_error_rate_mean"] for c, r in pipeline.ablation(config, run).items()}
    if cmd == "plot":
        return {"plots": [str(p) for p in pipeline.plot(config, run)]}
    if cmd == "run-all":
        reports = pipeline.run_all(config, run)
        return {c: r["token_error_rate_mean"] for c, r in reports.items()}
    raise AssertionError(cmd)


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "detail": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    run = pipeline.RunDir(args.out)
    run.root.mkdir(parents=True, exist_ok=True)
    with open(run.root / ".lock", "w") as lock:
        try:
            fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            return _fail(EXIT_LOCKED, "locked", exc)
        try:
            config = resolve_config(args, run)
            result = _dispatch(args, config, run)
        except ConfigError as exc:
            return _fail(EXIT_CONFIG, "config", exc)
        except FileNotFoundError as exc:
            return _fail(EXIT_MISSING, "missing_artifact", exc)
        except (NaNLossError, NumericalError) as exc:
            return _fail(EXIT_NUMERIC, "numerical", exc)
        except Exception as exc:  # noqa: BLE001
            return _fail(1, type(exc).__name__, exc)
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
