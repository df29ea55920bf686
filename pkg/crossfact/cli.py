"""Command-line front end.

Subcommands generate a synthetic corpus, train one scenario, evaluate accuracy,
measure calibration, and run the scenario x regularizer comparison matrix.
Exit codes: 0 success, 1 usage error, 2 data error, 3 partial matrix failure.
"""

import argparse
import asyncio
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from crossfact.calibration import (
    CalibrationReport,
    compute_ece,
    language_ece,
    macro_ece,
    records_from_distributions,
    reliability_dump,
)
from crossfact.config import get_settings
from crossfact.core import (
    ConfigurationError,
    CrossFactError,
    DataError,
    Regularizer,
    Scenario,
    UsageError,
    VocabularyError,
)
from crossfact.data import (
    CorpusSpec,
    Example,
    Vocabulary,
    build_vocabulary,
    generate_corpus,
    languages_of,
    load_corpus,
    write_corpus,
)
from crossfact.losses import LossSpec
from crossfact.model import ModelParams, load_params, predict, save_params
from crossfact.observability import configure_logging
from crossfact.reporting import ResultTable, render_markdown, render_text, write_tsv
from crossfact.trainer import TrainConfig, evaluate, load_config, save_report, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PARTIAL = 3

CHECKPOINT_FILE = "checkpoint.json"
REPORT_FILE = "train_report.json"
RELIABILITY_FILE = "reliability.csv"


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: error: {message}", error_code="usage")


# Experiment matrix

class MatrixCell(BaseModel):
    name: str
    loss_spec: LossSpec


class ExperimentMatrix(BaseModel):
    """Ordered comparison grid sharing one corpus and one seed."""

    cells: List[MatrixCell] = Field(default_factory=list)
    seed: int = 0

    @model_validator(mode="after")
    def _unique_names(self) -> "ExperimentMatrix":
        names = [cell.name for cell in self.cells]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate matrix cell names: {names}")
        return self

    @property
    def names(self) -> List[str]:
        return [cell.name for cell in self.cells]

    def select(self, names: Sequence[str]) -> "ExperimentMatrix":
        """Subset in matrix order; unknown names are a usage error."""
        unknown = [name for name in names if name not in self.names]
        if unknown:
            raise UsageError(f"unknown matrix cells {unknown}; available: {', '.join(self.names)}", error_code="usage")
        wanted = set(names)
        return ExperimentMatrix(cells=[cell for cell in self.cells if cell.name in wanted], seed=self.seed)


def default_matrix(
    seed: int = 0, with_combined: bool = False, confidence_penalty: Optional[float] = None
) -> ExperimentMatrix:
    """Zero-shot, non-parallel, unregularized parallel, then parallel with each regularizer."""
    cells = [
        MatrixCell(name="zero-shot", loss_spec=LossSpec(scenario=Scenario.ZERO_SHOT)),
        MatrixCell(name="non-parallel", loss_spec=LossSpec(scenario=Scenario.NON_PARALLEL)),
        MatrixCell(name="parallel", loss_spec=LossSpec(scenario=Scenario.PARALLEL)),
    ]
    for reg in Regularizer:
        if reg is not Regularizer.NONE:
            cells.append(
                MatrixCell(name=f"parallel-{reg.value}", loss_spec=LossSpec(scenario=Scenario.PARALLEL, regularizer=reg))
            )
    if with_combined:
        combined = LossSpec(
            scenario=Scenario.PARALLEL,
            regularizer=Regularizer.JS,
            lam=1.0,
            secondary_regularizer=Regularizer.MSE_FEATURE,
            secondary_lam=1.0,
        )
        cells.append(MatrixCell(name="parallel-js+mse-feat", loss_spec=combined))
    if confidence_penalty is not None:
        penalized = LossSpec(scenario=Scenario.ZERO_SHOT, confidence_penalty=confidence_penalty)
        cells.append(MatrixCell(name="zero-shot+cp", loss_spec=penalized))
    return ExperimentMatrix(cells=cells, seed=seed)


@dataclass
class CellResult:
    name: str
    accuracy: Optional[Dict[str, float]] = None
    ece: Optional[Dict[str, float]] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_cell(
    cell: MatrixCell,
    base: TrainConfig,
    corpus: Dict[str, List[Example]],
    vocab: Vocabulary,
    out_dir: Path,
    split: str = "test",
    n_bins: int = 20,
) -> CellResult:
    """Train, evaluate and calibrate one cell; failures are captured, not raised."""
    cell_dir = out_dir / "cells" / cell.name
    config = base.model_copy(update={"loss_spec": cell.loss_spec})
    try:
        params, report = train(config, corpus, vocab)
        report.checkpoint_path = str(save_params(params, cell_dir / CHECKPOINT_FILE))
        save_report(report, cell_dir / REPORT_FILE)

        examples = corpus[split]
        languages = languages_of(examples, config.source_lang)
        accuracy = evaluate(params, examples, languages)
        per_language = language_ece(params, examples, languages, n_bins, get_settings().eval_batch_size)
        reliability_dump(_pooled_calibration(params, examples, n_bins), cell_dir / RELIABILITY_FILE)
    except Exception as e:
        logger.error(f"Matrix cell {cell.name} failed: {e}")
        return CellResult(name=cell.name, error=str(e))
    logger.info(f"Matrix cell {cell.name}: macro accuracy {accuracy.macro_average:.4f}, macro ECE {macro_ece(per_language):.4f}")
    return CellResult(
        name=cell.name,
        accuracy=accuracy.per_language,
        ece={lang: rep.ece for lang, rep in per_language.items()},
    )


async def run_matrix(
    matrix: ExperimentMatrix, run: Callable[[MatrixCell], CellResult], workers: int = 1
) -> List[CellResult]:
    """Run cells on worker threads, at most ``workers`` at a time; results keep matrix order."""
    semaphore = asyncio.Semaphore(max(1, workers))

    async def guarded(cell: MatrixCell) -> CellResult:
        async with semaphore:
            return await asyncio.to_thread(run, cell)

    return list(await asyncio.gather(*(guarded(cell) for cell in matrix.cells)))


def matrix_tables(results: Sequence[CellResult], languages: Sequence[str], split: str) -> Tuple[ResultTable, ResultTable]:
    accuracy = ResultTable(title=f"Accuracy on {split} (%)", languages=list(languages))
    ece = ResultTable(title=f"ECE on {split} (%, lower is better)", languages=list(languages))
    for result in results:
        if result.failed or result.accuracy is None or result.ece is None:
            accuracy.add_failed(result.name, result.error or "failed")
            ece.add_failed(result.name, result.error or "failed")
            continue
        accuracy.add(result.name, result.accuracy)
        ece.add(result.name, result.ece)
    return accuracy, ece


# Shared helpers

def _pooled_calibration(params: ModelParams, examples: Sequence[Example], n_bins: int) -> CalibrationReport:
    dists = predict(params, examples, get_settings().eval_batch_size)
    return compute_ece(records_from_distributions(dists, [ex.label for ex in examples]), n_bins)


def _require_splits(corpus: Dict[str, List[Example]], names: Sequence[str]) -> None:
    missing = [name for name in names if not corpus.get(name)]
    if missing:
        raise DataError(f"corpus is missing split(s): {', '.join(missing)}", error_code="missing_split")


def _checkpoint_and_split(args: argparse.Namespace) -> Tuple[ModelParams, List[Example]]:
    params = load_params(args.checkpoint)
    corpus = load_corpus(args.data)
    _require_splits(corpus, [args.split])
    examples = corpus[args.split]
    missing = params.vocab.missing(examples)
    if missing:
        raise VocabularyError(
            f"{len(missing)} corpus token(s) are not in the checkpoint vocabulary, e.g. {missing[:5]}",
            error_code="vocabulary_mismatch",
            context={"missing": missing[:20]},
        )
    return params, examples


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else Path(args.checkpoint).parent


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise CrossFactError(f"cannot write {path}: {e}", error_code="unwritable") from e


def _overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> Dict[str, Any]:
    return {field: getattr(args, dest) for dest, field in mapping.items() if getattr(args, dest, None) is not None}


_TRAINING_FLAGS = {
    "seed": "seed",
    "epochs": "max_epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "patience": "patience",
    "early_stop": "early_stop_metric",
    "pair_sampling": "pair_sampling",
    "embed_dim": "embed_dim",
    "hidden_dim": "hidden_dim",
}

_LOSS_FLAGS = {
    "scenario": "scenario",
    "reg": "regularizer",
    "lam": "lam",
    "secondary_reg": "secondary_regularizer",
    "secondary_lam": "secondary_lam",
    "confidence_penalty": "confidence_penalty",
    "kl_direction": "kl_direction",
    "stop_gradient_on_p": "stop_gradient_on_p",
}


def train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    """Run configuration file (if any) overridden by explicit flags."""
    base = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    fields = base.model_dump()
    fields.update(_overrides(args, _TRAINING_FLAGS))

    loss_overrides = _overrides(args, _LOSS_FLAGS)
    if loss_overrides:
        spec_fields = base.loss_spec.model_dump()
        if "regularizer" in loss_overrides and "lam" not in loss_overrides:
            spec_fields.pop("lam")
        spec_fields.update(loss_overrides)
        scenario = Scenario(spec_fields["scenario"])
        regularized = Regularizer(spec_fields["regularizer"]) is not Regularizer.NONE
        if regularized and scenario is not Scenario.PARALLEL:
            raise UsageError(f"--reg needs --scenario parallel, got {scenario.value}", error_code="usage")
        fields["loss_spec"] = spec_fields
    return TrainConfig.model_validate(fields)


# Subcommands

def cmd_gendata(args: argparse.Namespace) -> int:
    fields = _overrides(
        args,
        {
            "train": "train_size",
            "dev": "dev_size",
            "test": "test_size",
            "vocab_size": "vocab_size",
            "topics": "n_topics",
            "cognate_ratio": "cognate_ratio",
            "noise": "noise_rate",
            "unverifiable_share": "unverifiable_share",
            "seed": "seed",
            "source_lang": "source_lang",
        },
    )
    if args.languages:
        fields["languages"] = [lang.strip() for lang in args.languages.split(",") if lang.strip()]
    spec = CorpusSpec(**fields)
    written = write_corpus(args.out, generate_corpus(spec))
    _write_text(Path(args.out) / "corpus_spec.json", spec.model_dump_json(indent=2))
    print(f"Wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = train_config_from_args(args)
    corpus = load_corpus(args.data)
    _require_splits(corpus, ["train", "dev"])
    out = Path(args.out)

    params, report = train(config, corpus, build_vocabulary(corpus.values()))
    report.checkpoint_path = str(save_params(params, out / CHECKPOINT_FILE))
    save_report(report, out / REPORT_FILE)
    _write_text(out / "run_config.json", config.model_dump_json(indent=2, by_alias=True))

    best = report.epochs[report.best_epoch - 1]
    table = ResultTable(title=f"Dev accuracy at best epoch {report.best_epoch} (%)", languages=list(best.dev_accuracy))
    table.add(config.loss_spec.describe(), best.dev_accuracy)
    print(render_text(table), end="")
    print(f"Checkpoint written to {report.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    params, examples = _checkpoint_and_split(args)
    accuracy = evaluate(params, examples)
    table = ResultTable(title=f"Accuracy on {args.split} (%)", languages=list(accuracy.per_language))
    table.add(args.name, accuracy.per_language)
    print(render_text(table), end="")
    write_tsv(table, _out_dir(args) / "accuracy.tsv")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    params, examples = _checkpoint_and_split(args)
    n_bins = args.bins or get_settings().ece_bins
    per_language = language_ece(params, examples, n_bins=n_bins, batch_size=get_settings().eval_batch_size)
    table = ResultTable(title=f"ECE on {args.split} (%, lower is better)", languages=list(per_language))
    table.add(args.name, {lang: report.ece for lang, report in per_language.items()})
    print(render_text(table), end="")

    out = _out_dir(args)
    write_tsv(table, out / "ece.tsv")
    reliability_dump(_pooled_calibration(params, examples, n_bins), out / RELIABILITY_FILE)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    settings = get_settings()
    base = train_config_from_args(args)
    matrix = default_matrix(base.seed, args.with_combined, args.confidence_penalty)
    if args.cells:
        matrix = matrix.select([name.strip() for name in args.cells.split(",") if name.strip()])

    corpus = load_corpus(args.data)
    _require_splits(corpus, ["train", "dev", args.split])
    vocab = build_vocabulary(corpus.values())
    out = Path(args.out)
    n_bins = args.bins or settings.ece_bins
    workers = args.workers or settings.compare_workers
    logger.info(f"Running {len(matrix.cells)} matrix cells with {workers} worker(s), seed {matrix.seed}")

    results = asyncio.run(
        run_matrix(matrix, lambda cell: run_cell(cell, base, corpus, vocab, out, args.split, n_bins), workers)
    )

    languages = languages_of(corpus[args.split], base.source_lang)
    accuracy, ece = matrix_tables(results, languages, args.split)
    write_tsv(accuracy, out / "accuracy.tsv")
    write_tsv(ece, out / "ece.tsv")
    notes = [f"seed: {matrix.seed}", f"cells: {len(matrix.cells)}", f"ECE bins: {n_bins}"]
    _write_text(out / "report.md", render_markdown([accuracy, ece], "Comparison matrix", notes))
    print(render_text(accuracy))
    print(render_text(ece), end="")

    failed = [result.name for result in results if result.failed]
    if failed:
        logger.error(f"{len(failed)} of {len(results)} matrix cells failed: {', '.join(failed)}")
        return EXIT_PARTIAL
    return EXIT_OK


# Parser

def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--seed", type=int, default=None)
    group.add_argument("--epochs", type=int, default=None, help="Maximum epochs (default 10).")
    group.add_argument("--batch-size", type=int, default=None)
    group.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-3).")
    group.add_argument("--patience", type=int, default=None)
    group.add_argument("--early-stop", choices=["macro", "source"], default=None)
    group.add_argument("--pair-sampling", choices=["sample", "exhaustive"], default=None)
    group.add_argument("--embed-dim", type=int, default=None)
    group.add_argument("--hidden-dim", type=int, default=None)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="crossfact", description="Cross-lingual fact verification training toolkit.")
    parser.add_argument("--log-level", default=None, help="Overrides CROSSFACT_LOG_LEVEL.")
    parser.add_argument("--log-format", choices=["text", "json"], default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    gendata = sub.add_parser("gendata", help="Generate a synthetic parallel corpus.")
    gendata.add_argument("--out", required=True)
    gendata.add_argument("--languages", default=None, help="Comma-separated language tags, source included.")
    gendata.add_argument("--source-lang", default=None)
    gendata.add_argument("--train", type=int, default=None)
    gendata.add_argument("--dev", type=int, default=None)
    gendata.add_argument("--test", type=int, default=None)
    gendata.add_argument("--vocab-size", type=int, default=None)
    gendata.add_argument("--topics", type=int, default=None)
    gendata.add_argument("--cognate-ratio", type=float, default=None)
    gendata.add_argument("--noise", type=float, default=None)
    gendata.add_argument("--unverifiable-share", type=float, default=None, help="Share of each topic kept for NEI claims.")
    gendata.add_argument("--seed", type=int, default=None)
    gendata.set_defaults(handler=cmd_gendata)

    reg_choices = [reg.value for reg in Regularizer]
    train_cmd = sub.add_parser("train", help="Train one scenario and write a checkpoint.")
    train_cmd.add_argument("--data", required=True)
    train_cmd.add_argument("--out", required=True)
    train_cmd.add_argument("--config", default=None, help="JSON run configuration; flags override it.")
    train_cmd.add_argument("--scenario", choices=[s.value for s in Scenario], default=None)
    train_cmd.add_argument("--reg", choices=reg_choices, default=None)
    train_cmd.add_argument("--lambda", dest="lam", type=float, default=None)
    train_cmd.add_argument("--secondary-reg", choices=reg_choices, default=None)
    train_cmd.add_argument("--secondary-lambda", dest="secondary_lam", type=float, default=None)
    train_cmd.add_argument("--confidence-penalty", type=float, default=None)
    train_cmd.add_argument(
        "--kl-direction", choices=["original_to_translated", "translated_to_original"], default=None
    )
    train_cmd.add_argument("--stop-gradient-on-p", action="store_true", default=None)
    _add_training_flags(train_cmd)
    train_cmd.set_defaults(handler=cmd_train)

    for name, handler, help_text in (
        ("eval", cmd_eval, "Per-language accuracy of a checkpoint."),
        ("calibrate", cmd_calibrate, "Per-language ECE and reliability bins of a checkpoint."),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--checkpoint", required=True)
        cmd.add_argument("--data", required=True)
        cmd.add_argument("--split", default="test", choices=["train", "dev", "test"])
        cmd.add_argument("--out", default=None, help="Output directory (default: the checkpoint's).")
        cmd.add_argument("--name", default="model", help="Row label in the table.")
        if name == "calibrate":
            cmd.add_argument("--bins", type=int, default=None)
        cmd.set_defaults(handler=handler)

    compare = sub.add_parser("compare", help="Train and score the scenario x regularizer matrix.")
    compare.add_argument("--data", required=True)
    compare.add_argument("--out", required=True)
    compare.add_argument("--config", default=None, help="JSON run configuration shared by every cell.")
    compare.add_argument("--cells", default=None, help="Comma-separated subset of cell names.")
    compare.add_argument("--with-combined", action="store_true", help="Append the JS + MSE-feature row.")
    compare.add_argument("--confidence-penalty", type=float, default=None, help="Append a zero-shot + penalty row.")
    compare.add_argument("--workers", type=int, default=None)
    compare.add_argument("--split", default="test", choices=["dev", "test"])
    compare.add_argument("--bins", type=int, default=None)
    _add_training_flags(compare)
    compare.set_defaults(handler=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e.message, file=sys.stderr)
        return EXIT_USAGE

    configure_logging(args.log_level, args.log_format)
    try:
        return int(args.handler(args))
    except (UsageError, ConfigurationError) as e:
        print(f"crossfact: {e.message}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as e:
        print(f"crossfact: invalid value: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CrossFactError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"crossfact: {e.message}", file=sys.stderr)
        return EXIT_DATA
