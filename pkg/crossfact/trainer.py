"""Mini-batch training for the zero-shot, non-parallel and parallel scenarios."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Collection, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from crossfact.config import get_settings
from crossfact.core import SOURCE_LANG, ConfigurationError, CrossFactError, DataError, Scenario
from crossfact.data import (
    Example,
    ParallelPair,
    Vocabulary,
    build_vocabulary,
    draw_parallel_epoch,
    languages_of,
    make_pairs,
    shuffle_epoch,
    split_by_language,
)
from crossfact.losses import LossSpec, batch_average, loss_parallel, loss_single, regularizer_term
from crossfact.model import GradientSet, ModelParams, backward, forward_batch, init_params, predict
from crossfact.observability import log_duration

logger = logging.getLogger(__name__)

TrainItem = Union[Example, ParallelPair]


class TrainConfig(BaseModel):
    """Run configuration; defaults follow the reference protocol (batch 32, <= 10 epochs, patience 2)."""

    loss_spec: LossSpec = Field(default_factory=LossSpec)
    batch_size: int = Field(default=32, ge=1)
    max_epochs: int = Field(default=10, ge=1)
    patience: int = Field(default=2, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = Field(default=0)
    embed_dim: int = Field(default=64, ge=1)
    hidden_dim: int = Field(default=64, ge=1)
    early_stop_metric: Literal["macro", "source"] = Field(default="macro")
    pair_sampling: Literal["sample", "exhaustive"] = Field(default="sample")
    source_lang: str = Field(default=SOURCE_LANG)
    frozen_params: List[str] = Field(default_factory=list, description="Parameter names excluded from updates.")


class AccuracyTable(BaseModel):
    per_language: Dict[str, float] = Field(default_factory=dict)
    counts: Dict[str, int] = Field(default_factory=dict)
    macro_average: float = 0.0


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    n_items: int
    dev_accuracy: Dict[str, float]
    dev_metric: float
    mean_regularizer: Optional[float] = None


class TrainReport(BaseModel):
    scenario: Scenario
    objective: str
    optimizer: str
    seed: int
    epochs: List[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    best_dev_metric: float = 0.0
    stopped_early: bool = False
    checkpoint_path: Optional[str] = None

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)


class Adam:
    """Adam over the named arrays of a ModelParams, updated in place."""

    def __init__(
        self,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        frozen: Collection[str] = (),
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.frozen = frozenset(frozen)
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def describe(self) -> str:
        return f"Adam(lr={self.lr:g}, beta1={self.beta1:g}, beta2={self.beta2:g}, eps={self.eps:g})"

    def step(self, params: ModelParams, grads: GradientSet) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads:
            if name in self.frozen:
                continue
            m = self._m.setdefault(name, np.zeros_like(grad))
            v = self._v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            getattr(params, name)[...] -= update


@dataclass
class BatchObjective:
    value: float
    grads: GradientSet
    regularizer: Optional[float] = None


def batch_objective(params: ModelParams, batch: Sequence[TrainItem], spec: LossSpec) -> BatchObjective:
    """Batch-mean loss and its gradient for a batch of examples or of parallel pairs."""
    if not batch:
        raise DataError("empty batch", error_code="empty_batch")
    scale = 1.0 / len(batch)

    if isinstance(batch[0], ParallelPair):
        pairs = [item for item in batch if isinstance(item, ParallelPair)]
        trace_o = forward_batch(params, [pair.original for pair in pairs])
        trace_t = forward_batch(params, [pair.translated for pair in pairs])
        values, up_o, up_t = loss_parallel(
            trace_o,
            trace_t,
            [pair.original.label for pair in pairs],
            spec,
            translated_labels=[pair.translated.label for pair in pairs],
        )
        up_o, up_t = up_o.scale(scale), up_t.scale(scale)
        grads = backward(params, trace_o, up_o.logits, up_o.feature, up_o.penultimate) + backward(
            params, trace_t, up_t.logits, up_t.feature, up_t.penultimate
        )
        regularizer = None
        if spec.terms():
            total = sum(regularizer_term(kind, trace_o, trace_t, spec)[0] for kind, _ in spec.terms())
            regularizer = batch_average(total)
        return BatchObjective(value=batch_average(values), grads=grads, regularizer=regularizer)

    examples = [item for item in batch if isinstance(item, Example)]
    trace = forward_batch(params, examples)
    values, up = loss_single(trace, [ex.label for ex in examples], spec)
    up = up.scale(scale)
    grads = backward(params, trace, up.logits, up.feature, up.penultimate)
    return BatchObjective(value=batch_average(values), grads=grads)


def evaluate(
    params: ModelParams,
    examples: Sequence[Example],
    languages: Optional[Sequence[str]] = None,
    batch_size: Optional[int] = None,
) -> AccuracyTable:
    """Accuracy per language plus their macro average.

    Languages listed in ``languages`` with no examples are omitted with a warning;
    languages present but not listed are reported with a warning.
    """
    batch_size = batch_size or get_settings().eval_batch_size
    groups = split_by_language(examples)
    order = list(languages) if languages is not None else languages_of(examples)
    for lang in groups:
        if lang not in order:
            logger.warning(f"Language {lang!r} is not among the expected languages; reporting it anyway")
            order.append(lang)

    table = AccuracyTable()
    for lang in order:
        group = groups.get(lang, [])
        if not group:
            logger.warning(f"No examples for language {lang!r}; omitted from the accuracy table")
            continue
        predictions = np.argmax(predict(params, group, batch_size), axis=-1)
        truth = np.array([ex.label.index for ex in group])
        table.per_language[lang] = float(np.mean(predictions == truth))
        table.counts[lang] = len(group)
    if table.per_language:
        table.macro_average = float(np.mean(list(table.per_language.values())))
    else:
        logger.warning("Accuracy table is empty")
    return table


def _dev_metric(table: AccuracyTable, config: TrainConfig) -> float:
    if config.early_stop_metric == "source" and config.source_lang in table.per_language:
        return table.per_language[config.source_lang]
    return table.macro_average


@log_duration("training run")
def _fit(
    config: TrainConfig,
    scenario: Scenario,
    params: ModelParams,
    epoch_items: Callable[[int], Sequence[TrainItem]],
    dev: Sequence[Example],
) -> Tuple[ModelParams, TrainReport]:
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps, frozen=config.frozen_params)
    spec = config.loss_spec
    report = TrainReport(scenario=scenario, objective=spec.describe(), optimizer=optimizer.describe(), seed=config.seed)
    dev_languages = languages_of(dev, config.source_lang)

    best = params.copy()
    best_metric = -math.inf
    since_best = 0
    epochs = tqdm(range(1, config.max_epochs + 1), desc=spec.describe(), disable=not get_settings().show_progress)
    for epoch in epochs:
        items = epoch_items(epoch)
        loss_sum = 0.0
        reg_sum = 0.0
        has_reg = False
        for start in range(0, len(items), config.batch_size):
            batch = items[start:start + config.batch_size]
            result = batch_objective(params, batch, spec)
            optimizer.step(params, result.grads)
            loss_sum += result.value * len(batch)
            if result.regularizer is not None:
                reg_sum += result.regularizer * len(batch)
                has_reg = True

        table = evaluate(params, dev, dev_languages)
        metric = _dev_metric(table, config)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(items),
            n_items=len(items),
            dev_accuracy=table.per_language,
            dev_metric=metric,
            mean_regularizer=reg_sum / len(items) if has_reg else None,
        )
        report.epochs.append(record)

        if metric > best_metric:
            best_metric, best, since_best = metric, params.copy(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
        logger.info(
            f"[{spec.describe()}] epoch {epoch}: loss={record.train_loss:.4f} "
            f"dev={metric:.4f} best_epoch={report.best_epoch} patience={since_best}/{config.patience}"
        )
        if since_best >= config.patience:
            report.stopped_early = epoch < config.max_epochs
            break

    report.best_dev_metric = best_metric
    return best, report


def _require(examples: Sequence[object], what: str) -> None:
    if not examples:
        raise DataError(f"{what} is empty", error_code="empty_split")


def _start_params(
    config: TrainConfig, splits: Sequence[Sequence[Example]], vocab: Optional[Vocabulary], params: Optional[ModelParams]
) -> ModelParams:
    if params is not None:
        return params.copy()
    return init_params(config.seed, vocab or build_vocabulary(splits), config.embed_dim, config.hidden_dim)


def train_zero_shot(
    config: TrainConfig,
    source_train: Sequence[Example],
    source_dev: Sequence[Example],
    vocab: Optional[Vocabulary] = None,
    params: Optional[ModelParams] = None,
) -> Tuple[ModelParams, TrainReport]:
    """Minimize the source-only cross-entropy; early stopping on source dev accuracy."""
    _require(source_train, "source training split")
    _require(source_dev, "source development split")
    foreign = {ex.lang for ex in (*source_train, *source_dev)} - {config.source_lang}
    if foreign:
        raise DataError(
            f"zero-shot training takes {config.source_lang!r} examples only, got {sorted(foreign)}",
            error_code="non_source_examples",
        )
    start = _start_params(config, [source_train, source_dev], vocab, params)
    return _fit(config, Scenario.ZERO_SHOT, start, lambda epoch: shuffle_epoch(source_train, config.seed, epoch), source_dev)


def train_non_parallel(
    config: TrainConfig,
    all_language_train: Sequence[Example],
    dev: Sequence[Example],
    vocab: Optional[Vocabulary] = None,
    params: Optional[ModelParams] = None,
) -> Tuple[ModelParams, TrainReport]:
    """Cross-entropy over the pooled source + translated examples, reshuffled each epoch."""
    _require(all_language_train, "training pool")
    _require(dev, "development split")
    start = _start_params(config, [all_language_train, dev], vocab, params)
    return _fit(
        config, Scenario.NON_PARALLEL, start, lambda epoch: shuffle_epoch(all_language_train, config.seed, epoch), dev
    )


def train_parallel(
    config: TrainConfig,
    pairs: Union[Sequence[ParallelPair], Mapping[str, Sequence[ParallelPair]]],
    dev: Sequence[Example],
    vocab: Optional[Vocabulary] = None,
    params: Optional[ModelParams] = None,
) -> Tuple[ModelParams, TrainReport]:
    """Pairs of (original, translation) with the configured consistency regularizer."""
    if config.loss_spec.scenario is not Scenario.PARALLEL:
        raise ConfigurationError(
            f"train_parallel needs a parallel loss spec, got {config.loss_spec.scenario.value}",
            error_code="scenario_mismatch",
        )
    if isinstance(pairs, Mapping):
        by_lang: Dict[str, List[ParallelPair]] = {lang: list(group) for lang, group in pairs.items()}
    else:
        by_lang = {}
        for pair in pairs:
            by_lang.setdefault(pair.translated.lang, []).append(pair)
    _require([p for group in by_lang.values() for p in group], "parallel training set")
    _require(dev, "development split")
    sizes = {lang: len(group) for lang, group in by_lang.items()}
    if config.pair_sampling == "sample" and len(set(sizes.values())) > 1:
        raise DataError(f"uneven pair counts per target language: {sizes}", error_code="uneven_pairs")

    examples = [ex for group in by_lang.values() for pair in group for ex in (pair.original, pair.translated)]
    start = _start_params(config, [examples, dev], vocab, params)
    exhaustive = config.pair_sampling == "exhaustive"
    return _fit(
        config,
        Scenario.PARALLEL,
        start,
        lambda epoch: draw_parallel_epoch(by_lang, config.seed, epoch, exhaustive=exhaustive),
        dev,
    )


def train(
    config: TrainConfig, corpus: Mapping[str, Sequence[Example]], vocab: Optional[Vocabulary] = None
) -> Tuple[ModelParams, TrainReport]:
    """Run the scenario named by ``config.loss_spec`` on a loaded corpus (split name -> examples)."""
    train_split = list(corpus.get("train", []))
    dev_split = list(corpus.get("dev", []))
    vocab = vocab or build_vocabulary(corpus.values())
    scenario = config.loss_spec.scenario
    source = config.source_lang

    if scenario is Scenario.ZERO_SHOT:
        return train_zero_shot(
            config,
            [ex for ex in train_split if ex.lang == source],
            [ex for ex in dev_split if ex.lang == source],
            vocab,
        )
    if scenario is Scenario.NON_PARALLEL:
        return train_non_parallel(config, train_split, dev_split, vocab)
    _require(train_split, "training split")
    return train_parallel(config, make_pairs(train_split, source), dev_split, vocab)


def save_report(report: TrainReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.model_dump(mode="json"), indent=2), encoding="utf-8")
    except OSError as e:
        raise CrossFactError(f"cannot write training report {path}: {e}", error_code="unwritable") from e
    return path


def load_config(path: Union[str, Path]) -> TrainConfig:
    """Parse a JSON run configuration mirroring TrainConfig field names."""
    try:
        return TrainConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigurationError(f"cannot read run configuration {path}: {e}", error_code="unreadable") from e
