"""
rsjoint command line
==================

Subcommands::

    rsjoint gen-data     --out DIR [--seed N] [--k-classes K] [--n-natural N] [--n-rs N] [--n-scenes N] [--image-size S]
    rsjoint pretrain     --natural DIR --rs DIR --out FILE [--config cfg.json] [--resume FILE] [--dump-config FILE] [flags]
    rsjoint finetune     --data DIR (--checkpoint FILE | --from-scratch) [--report FILE] [--config eval.json] [flags]
    rsjoint probe        (same as finetune)
    rsjoint stage-probe  (same as finetune)
    rsjoint inspect      FILE

Every configuration leaf has one flag, ``--<section>-<field>`` for nested
fields (``--encoder-bn-groups``) and ``--<field>`` at the top level
(``--alpha``); flags override the ``--config`` file. ``--seed`` is the single
source of randomness for each command.

Exit codes: 0 success, 1 usage error (synopsis on stderr), 2 runtime error.
"""

import argparse
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

import torch
from rapidfuzz import fuzz, process

from .checkpoint import read_manifest
from .config import EvalProtocol, Record, SyntheticCorpusSpec, TrainingConfig, leaf_fields, with_overrides
from .data import load_labeled_dataset, load_unlabeled_dataset, write_corpus
from .errors import ConfigurationError, RsJointError
from .evaluation import evaluate
from .logs import configure_logging, default_log_file, default_log_level, worker_count
from .trainer import metrics_path_for, pretrain

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "probe", "stage-probe", "inspect")
EVAL_MODES = {"finetune": "finetune", "probe": "probe", "stage-probe": "stage_probe"}
_SKIP_TRAINING = {("seed",)}
_SKIP_EVAL = {("mode",), ("seed",), ("from_scratch",)}


class UsageError(Exception):
    """Bad command line; reported with the synopsis and exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> typing.NoReturn:
        raise UsageError(message)


# --------------------------------------------------------------------------
# Flag generation from configuration records
# --------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _list_of(item: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(text: str) -> List[Any]:
        try:
            return [item(part) for part in text.split(",") if part.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _flag_kwargs(annotation: Any) -> Dict[str, Any]:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Literal:
        return {"choices": list(args)}
    if origin in (list, tuple):
        return {"type": _list_of(args[0] if args else str), "metavar": "A,B,..."}
    if annotation is bool:
        return {"type": _parse_bool, "metavar": "BOOL"}
    if annotation in (int, float, str):
        return {"type": annotation}
    return {"type": str}


def flag_name(path: Tuple[str, ...]) -> str:
    return "--" + "-".join(path).replace("_", "-")


def _dest(path: Tuple[str, ...]) -> str:
    return "cfg__" + "__".join(path)


def add_record_flags(parser: argparse.ArgumentParser, model_cls: Type[Record], skip: set) -> None:
    group = parser.add_argument_group(f"{model_cls.__name__} fields")
    for path, annotation in leaf_fields(model_cls):
        if path in skip:
            continue
        group.add_argument(flag_name(path), dest=_dest(path), default=None, **_flag_kwargs(annotation))


def collect_overrides(args: argparse.Namespace) -> Dict[Tuple[str, ...], Any]:
    overrides = {}
    for dest, value in vars(args).items():
        if dest.startswith("cfg__") and value is not None:
            overrides[tuple(dest[len("cfg__") :].split("__"))] = value
    return overrides


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="rsjoint", description="Dual-branch remote-sensing pre-training and evaluation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    gen = sub.add_parser("gen-data", help="write the seeded synthetic corpus")
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--k-classes", type=int, default=None)
    gen.add_argument("--n-natural", type=int, default=None)
    gen.add_argument("--n-rs", type=int, default=None)
    gen.add_argument("--n-scenes", type=int, default=None)
    gen.add_argument("--image-size", type=int, default=None)

    train = sub.add_parser("pretrain", help="joint pre-training")
    train.add_argument("--config", type=Path)
    train.add_argument("--natural", type=Path, help="class-folder directory of labeled natural images")
    train.add_argument("--rs", type=Path, help="directory of unlabeled remote-sensing images")
    train.add_argument("--out", type=Path, help="checkpoint path")
    train.add_argument("--resume", type=Path, help="warm-start the student from this checkpoint")
    train.add_argument("--dump-config", type=Path, help="write the effective config and exit")
    train.add_argument("--seed", type=int, default=None)
    add_record_flags(train, TrainingConfig, _SKIP_TRAINING)

    for name in EVAL_MODES:
        ev = sub.add_parser(name, help=f"{name} evaluation")
        ev.add_argument("--config", type=Path, help="EvalProtocol JSON")
        ev.add_argument("--checkpoint", type=Path)
        ev.add_argument("--data", type=Path, help="class-folder directory of labeled images")
        ev.add_argument("--report", type=Path, help="write the EvalReport JSON here")
        ev.add_argument("--from-scratch", action="store_true", help="random-init backbone")
        ev.add_argument("--seed", type=int, default=None)
        add_record_flags(ev, EvalProtocol, _SKIP_EVAL)

    inspect = sub.add_parser("inspect", help="print and verify a checkpoint manifest")
    inspect.add_argument("path", type=Path)
    return parser


def suggest_command(name: str) -> Optional[str]:
    match = process.extractOne(name, SUBCOMMANDS, scorer=fuzz.ratio, score_cutoff=50)
    return match[0] if match else None


# --------------------------------------------------------------------------
# Handlers
# --------------------------------------------------------------------------


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required flags: " + ", ".join("--" + n.replace("_", "-") for n in missing))


def training_config(args: argparse.Namespace) -> TrainingConfig:
    """``--config`` file (or the desk preset) with flag overrides applied; invalid values are usage errors."""
    try:
        base = TrainingConfig.from_file(args.config) if args.config else TrainingConfig.desk()
        overrides = collect_overrides(args)
        if args.seed is not None:
            overrides[("seed",)] = args.seed
        return with_overrides(base, overrides) if overrides else base
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


def eval_protocol(args: argparse.Namespace, mode: str) -> EvalProtocol:
    try:
        base = EvalProtocol.from_file(args.config) if args.config else EvalProtocol.desk()
        overrides = collect_overrides(args)
        overrides[("mode",)] = mode
        if args.seed is not None:
            overrides[("seed",)] = args.seed
        if args.from_scratch:
            overrides[("from_scratch",)] = True
        return with_overrides(base, overrides)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


def cmd_gen_data(args: argparse.Namespace) -> int:
    values = {
        "seed": args.seed,
        "k_classes": args.k_classes,
        "n_natural": args.n_natural,
        "n_rs": args.n_rs,
        "n_scenes": args.n_scenes,
        "image_size": args.image_size,
    }
    try:
        spec = SyntheticCorpusSpec.build(**{k: v for k, v in values.items() if v is not None})
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    manifest = write_corpus(args.out, spec, concurrency=worker_count())
    print(json.dumps({"out": str(args.out), "counts": manifest["counts"]}, indent=2))
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = training_config(args)
    if args.dump_config:
        config.write(args.dump_config)
        logger.info("📝 Wrote effective config to %s", args.dump_config)
        return EXIT_OK
    _require(args, "natural", "rs", "out")
    labeled = load_labeled_dataset(args.natural)
    unlabeled = load_unlabeled_dataset(args.rs)
    checkpoint = pretrain(config, labeled, unlabeled, args.out, resume_from=args.resume)
    print(
        json.dumps(
            {
                "checkpoint": str(args.out),
                "metrics": str(metrics_path_for(args.out)),
                "content_checksum": checkpoint.content_checksum,
                "final_losses": checkpoint.metadata.get("final_losses"),
            },
            indent=2,
        )
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    protocol = eval_protocol(args, EVAL_MODES[args.command])
    _require(args, "data")
    if args.checkpoint is None and not protocol.from_scratch:
        raise UsageError("--checkpoint is required unless --from-scratch is given")
    dataset = load_labeled_dataset(args.data)
    report = evaluate(args.checkpoint, dataset, protocol)
    if args.report:
        report.write(args.report)
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    checkpoint = read_manifest(args.path)
    manifest = checkpoint.manifest()
    manifest["crc"] = "ok"
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


HANDLERS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_evaluate,
    "probe": cmd_evaluate,
    "stage-probe": cmd_evaluate,
    "inspect": cmd_inspect,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    configure_logging(default_log_level(), default_log_file())
    parser = build_parser()

    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        hint = suggest_command(argv[0])
        message = f"rsjoint: unknown command '{argv[0]}'"
        if hint:
            message += f" (did you mean '{hint}'?)"
        print(message, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        torch.set_num_threads(worker_count())
        return HANDLERS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"rsjoint: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (RsJointError, OSError) as exc:
        logger.error("❌ %s failed: %s", argv[0] if argv else "rsjoint", exc)
        return EXIT_RUNTIME


def main() -> None:
    """Entry point for the console script."""
    sys.exit(run())


if __name__ == "__main__":
    main()
