"""
Command-line entry point: synthetic data, search, retraining, scoring, EER
and the gradient-check suite.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Sequence

from pydantic import ValidationError

from .checkpoint import load_model, save_model
from .config import RunConfig, load_config_file, resolve_config
from .data import GENERATOR_VERSION, Dataset, gen_synthetic, load_manifest, resolve_feature_dim
from .evaluation import (
    attach_labels,
    compute_eer,
    det_points,
    dump_embeddings,
    format_eer,
    read_scores,
    score_dataset,
    write_det,
    write_scores,
)
from .exceptions import LightDartsError
from .genotype import format_genotype, load_genotype, save_genotype
from .gradcheck import run_suite
from .logging_utils import RunLogger, configure_logging
from .search import retrain_discrete, run_search, write_history

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_FILE_INPUTS = frozenset(
    {"train_manifest", "val_manifest", "genotype", "model", "manifest", "labels_manifest"}
)


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


def _write_provenance(
    out_dir: Path, command: str, config: RunConfig, paths: Mapping[str, object]
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = out_dir / f"{command}_run.txt"
    extra = {"command": command}
    extra.update({k: str(v) for k, v in paths.items() if v is not None})
    record.write_text(config.dump(extra), encoding="utf-8")
    return record


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _labeled_eer(records) -> Optional[float]:
    labeled = [r for r in records if r.label != "unknown"]
    if not {"bonafide", "spoof"} <= {r.label for r in labeled}:
        return None
    return compute_eer(labeled)[0]


def cmd_gen_synthetic(args: argparse.Namespace, config: RunConfig) -> int:
    _require(args, "out")
    if args.t is None or args.t < 8 or args.f is None or args.f < 8:
        raise UsageError(f"--t and --f must be at least 8, got --t {args.t} --f {args.f}")
    if args.n_per_split < 1:
        raise UsageError(f"--n-per-split must be positive, got {args.n_per_split}")
    out = Path(args.out)
    sizes: Dict[str, int] = {
        split: args.n_per_split if size is None else size
        for split, size in (
            ("train", args.train_size),
            ("val", args.val_size),
            ("eval", args.eval_size),
        )
    }
    if min(sizes.values()) < 1:
        raise UsageError(f"split sizes must be positive, got {sizes}")
    manifests = gen_synthetic(
        out,
        sizes,
        frames=args.t,
        dims=args.f,
        seed=config.seed,
        artifact_amplitude=args.artifact_amplitude,
        noise_sigma=args.noise_sigma,
    )
    _write_provenance(
        out,
        "gen_synthetic",
        config,
        {
            "generator_version": GENERATOR_VERSION,
            "t": args.t,
            "f": args.f,
            "train_size": sizes["train"],
            "val_size": sizes["val"],
            "eval_size": sizes["eval"],
            "artifact_amplitude": args.artifact_amplitude,
            "noise_sigma": args.noise_sigma,
        },
    )
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return EXIT_OK


def cmd_search(args: argparse.Namespace, config: RunConfig) -> int:
    _require(args, "train_manifest", "val_manifest")
    out = Path(args.out or "genotype.txt")
    history_path = Path(args.history) if args.history else out.with_name(f"{out.stem}_history.csv")
    train_set = Dataset.from_manifest(args.train_manifest, config.frames)
    val_set = Dataset.from_manifest(args.val_manifest, config.frames)

    run_logger = RunLogger(args.run_log) if args.run_log else None
    try:
        result = run_search(config.search_config(), train_set, val_set, run_logger)
    finally:
        if run_logger is not None:
            run_logger.close()

    out.parent.mkdir(parents=True, exist_ok=True)
    save_genotype(result.genotype, out)
    write_history(result.history, history_path)
    _write_provenance(
        out.parent,
        "search",
        config,
        {
            "train_manifest": args.train_manifest,
            "val_manifest": args.val_manifest,
            "out": out,
            "history": history_path,
        },
    )
    sys.stdout.write(format_genotype(result.genotype))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    _require(args, "genotype", "train_manifest")
    out = Path(args.out or "model.bin")
    genotype = load_genotype(args.genotype)
    train_set = Dataset.from_manifest(args.train_manifest, config.frames)
    dev_set = Dataset.from_manifest(args.val_manifest, config.frames) if args.val_manifest else None

    run_logger = RunLogger(args.run_log) if args.run_log else None
    try:
        result = retrain_discrete(genotype, config.search_config(), train_set, dev_set, run_logger)
    finally:
        if run_logger is not None:
            run_logger.close()

    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out, config.frames)
    _write_provenance(
        out.parent,
        "train",
        config,
        {
            "genotype": args.genotype,
            "train_manifest": args.train_manifest,
            "val_manifest": args.val_manifest,
            "out": out,
        },
    )
    last = result.history[-1]
    print(f"train_loss = {last.train_loss:.4f}, train_acc = {100 * last.train_acc:.2f}%")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    _require(args, "model", "manifest", "scores")
    model, header = load_model(args.model)
    frames = args.frames if args.frames is not None else header.frames
    dataset = Dataset.from_manifest(args.manifest, frames)

    records = score_dataset(model, dataset, config.eval_batch_size)
    scores_path = Path(args.scores)
    scores_path.parent.mkdir(parents=True, exist_ok=True)
    write_scores(records, scores_path)
    if args.embeddings:
        dump_embeddings(model, dataset, args.embeddings, config.eval_batch_size)

    labeled = [r for r in records if r.label != "unknown"]
    if args.det and {"bonafide", "spoof"} <= {r.label for r in labeled}:
        write_det(det_points(labeled), args.det)
    _write_provenance(
        scores_path.parent,
        "eval",
        config,
        {
            "model": args.model,
            "manifest": args.manifest,
            "scores": args.scores,
            "det": args.det,
            "embeddings": args.embeddings,
            "eval_frames": frames,
        },
    )

    eer = _labeled_eer(records)
    if eer is not None:
        print(format_eer(eer))
    else:
        logger.info("No labeled bonafide/spoof pairs; EER not computed")
    return EXIT_OK


def cmd_eer(args: argparse.Namespace, config: RunConfig) -> int:
    _require(args, "scores", "labels_manifest")
    records = attach_labels(read_scores(args.scores), load_manifest(args.labels_manifest))
    eer = _labeled_eer(records)
    if eer is None:
        raise LightDartsError("the labels manifest does not give both classes for these scores")
    if args.det:
        write_det(det_points([r for r in records if r.label != "unknown"]), args.det)
    print(format_eer(eer))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    reports = run_suite(instances=args.instances, epsilon=args.epsilon, seed=config.seed)
    failures = 0
    for report in reports:
        status = "ok" if report.max_error <= args.tolerance else "FAIL"
        failures += status == "FAIL"
        print(
            f"{report.name:32s} {status:4s} max_error={report.max_error:.3e} "
            f"checked={report.checked} skipped={report.skipped}"
        )
    print(f"{len(reports) - failures}/{len(reports)} cases passed")
    return EXIT_OK if failures == 0 else EXIT_FAILURE


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat key=value config file")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--log-file", dest="log_file", help="JSON-lines log file")
    common.add_argument("--seed", type=int)
    return common


def _search_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--cells", type=int, help="Stacked cells N (default 8)")
    parser.add_argument("--channels", dest="init_channels", type=int, help="Initial channels C")
    parser.add_argument("--nodes", type=int, help="Intermediate nodes per cell (default 4)")
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--frames", type=int, help="Frame-fixing target T (default 40)")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="lightdarts",
        description="Differentiable architecture search for fake audio detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", parents=[common], help="Write a synthetic corpus")
    gen.add_argument("--out")
    gen.add_argument("--n-per-split", dest="n_per_split", type=int, default=200)
    gen.add_argument("--train-size", dest="train_size", type=int)
    gen.add_argument("--val-size", dest="val_size", type=int)
    gen.add_argument("--eval-size", dest="eval_size", type=int)
    gen.add_argument("--t", type=int, default=40, help="Frames per utterance")
    gen.add_argument(
        "--f", type=resolve_feature_dim, default=16, help="Feature dimension or preset name"
    )
    gen.add_argument("--artifact-amplitude", dest="artifact_amplitude", type=float, default=1.0)
    gen.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.5)
    gen.set_defaults(handler=cmd_gen_synthetic, config_keys=())

    search = sub.add_parser("search", parents=[common], help="Run the bilevel search")
    search.add_argument("--train-manifest", dest="train_manifest")
    search.add_argument("--val-manifest", dest="val_manifest")
    search.add_argument("--epochs", type=int, help="Search epochs (default 50)")
    search.add_argument("--lr", type=float, help="Weight learning rate (default 1e-4)")
    search.add_argument("--arch-lr", dest="arch_lr", type=float, help="Alpha learning rate")
    search.add_argument("--order", choices=["first", "second"])
    search.add_argument("--unrolled-lr", dest="unrolled_lr", type=float, help="Second-order xi")
    search.add_argument("--primitives", help="light, darts or comma-separated op names")
    _search_options(search)
    search.add_argument("--out", help="Genotype file (default genotype.txt)")
    search.add_argument("--history", help="History CSV (default <out>_history.csv)")
    search.add_argument("--run-log", dest="run_log", help="Per-epoch JSON-lines record")
    search.set_defaults(
        handler=cmd_search,
        config_keys=(
            "epochs",
            "lr",
            "arch_lr",
            "order",
            "unrolled_lr",
            "primitives",
            "cells",
            "init_channels",
            "nodes",
            "batch_size",
            "frames",
        ),
    )

    train = sub.add_parser("train", parents=[common], help="Retrain a discrete genotype")
    train.add_argument("--genotype")
    train.add_argument("--train-manifest", dest="train_manifest")
    train.add_argument("--val-manifest", dest="val_manifest", help="Dev split for best-EER model")
    train.add_argument("--epochs", dest="retrain_epochs", type=int, help="Default 2x search epochs")
    train.add_argument("--lr", dest="retrain_lr", type=float, help="Default: search lr")
    _search_options(train)
    train.add_argument("--out", help="Model file (default model.bin)")
    train.add_argument("--run-log", dest="run_log", help="Per-epoch JSON-lines record")
    train.set_defaults(
        handler=cmd_train,
        config_keys=(
            "retrain_epochs",
            "retrain_lr",
            "cells",
            "init_channels",
            "nodes",
            "batch_size",
            "frames",
        ),
    )

    evaluate = sub.add_parser("eval", parents=[common], help="Score a manifest with a model")
    evaluate.add_argument("--model")
    evaluate.add_argument("--manifest")
    evaluate.add_argument("--scores")
    evaluate.add_argument("--det", help="DET CSV output")
    evaluate.add_argument("--embeddings", help="Penultimate embedding CSV output")
    evaluate.add_argument("--frames", type=int, help="Default: the model's frame target")
    evaluate.add_argument("--batch-size", dest="eval_batch_size", type=int)
    evaluate.set_defaults(handler=cmd_eval, config_keys=("eval_batch_size",))

    eer = sub.add_parser("eer", parents=[common], help="EER of a score file")
    eer.add_argument("--scores")
    eer.add_argument("--labels-manifest", dest="labels_manifest")
    eer.add_argument("--det", help="DET CSV output")
    eer.set_defaults(handler=cmd_eer, config_keys=())

    grad = sub.add_parser("gradcheck", parents=[common], help="Run the gradient-check suite")
    grad.add_argument("--instances", type=int, default=10)
    grad.add_argument("--epsilon", type=float, default=1e-3)
    grad.add_argument("--tolerance", type=float, default=1e-4)
    grad.set_defaults(handler=cmd_gradcheck, config_keys=())
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    # input paths left unset on the command line come from the config file
    for key, value in file_values.items():
        if key in _FILE_INPUTS and key in vars(args) and getattr(args, key) is None:
            setattr(args, key, value)
    overrides = {key: getattr(args, key, None) for key in args.config_keys}
    overrides["seed"] = args.seed
    overrides["log_level"] = args.log_level
    return resolve_config(overrides, file_values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        config = _resolve(args)
    except ValidationError as exc:
        print(f"lightdarts: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LightDartsError as exc:
        print(f"lightdarts: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"lightdarts: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    configure_logging(config.log_level, args.log_file)
    handler: Callable[[argparse.Namespace, RunConfig], int] = args.handler
    try:
        return handler(args, config)
    except UsageError as exc:
        print(f"lightdarts {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"lightdarts {args.command}: invalid value: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LightDartsError, OSError) as exc:
        logger.debug("Command failed", exc_info=True)
        print(f"lightdarts {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
