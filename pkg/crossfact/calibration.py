"""Expected calibration error and reliability bins.

The confidence range is split into M equal-width bins; bin i (1-based) covers
((i-1)/M, i/M], so a confidence of exactly i/M belongs to bin i and a
confidence of 1.0 to bin M.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from crossfact.core import CalibrationError, CrossFactError, Label
from crossfact.data import Example, languages_of, split_by_language
from crossfact.model import ModelParams, predict

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20
CSV_COLUMNS = ("bin_low", "bin_high", "count", "mean_confidence", "accuracy", "gap")


@dataclass(frozen=True)
class PredictionRecord:
    confidence: float
    predicted: int
    true: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.true


class CalibrationBin(BaseModel):
    index: int = Field(..., ge=1)
    low: float
    high: float
    count: int = Field(default=0, ge=0)
    mean_confidence: float = Field(default=0.0)
    accuracy: float = Field(default=0.0)

    @property
    def gap(self) -> float:
        return abs(self.accuracy - self.mean_confidence) if self.count else 0.0


class CalibrationReport(BaseModel):
    n_bins: int
    n_records: int
    bins: List[CalibrationBin]
    ece: float = Field(..., ge=0.0, le=1.0)

    @property
    def ece_percent(self) -> float:
        return 100.0 * self.ece


def bin_bounds(i: int, n_bins: int) -> tuple:
    return (i - 1) / n_bins, i / n_bins


def bin_index(confidence: float, n_bins: int) -> int:
    """1-based bin holding ``confidence``, checked against the float boundaries i/M."""
    i = min(max(math.ceil(confidence * n_bins), 1), n_bins)
    if confidence <= (i - 1) / n_bins and i > 1:
        i -= 1
    elif confidence > i / n_bins and i < n_bins:
        i += 1
    return i


def _validate(records: Sequence[PredictionRecord]) -> None:
    for idx, record in enumerate(records):
        c = record.confidence
        if not (math.isfinite(c) and 0.0 < c <= 1.0):
            raise CalibrationError(
                f"record {idx} has confidence {c!r} outside (0, 1]",
                record_index=idx,
                error_code="confidence_range",
            )


def compute_ece(records: Sequence[PredictionRecord], n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    """ECE = sum_i |B_i|/n * |acc(B_i) - conf(B_i)|; empty bins contribute 0."""
    if n_bins < 1:
        raise CalibrationError(f"number of bins must be >= 1, got {n_bins}", error_code="bins")
    _validate(records)

    members: List[List[PredictionRecord]] = [[] for _ in range(n_bins)]
    for record in records:
        members[bin_index(record.confidence, n_bins) - 1].append(record)

    n = len(records)
    if n == 0:
        logger.warning("ECE requested for an empty record set; reporting 0")

    bins: List[CalibrationBin] = []
    ece = 0.0
    for i, group in enumerate(members, start=1):
        low, high = bin_bounds(i, n_bins)
        if not group:
            bins.append(CalibrationBin(index=i, low=low, high=high))
            continue
        conf = sum(r.confidence for r in group) / len(group)
        acc = sum(1.0 for r in group if r.correct) / len(group)
        bins.append(CalibrationBin(index=i, low=low, high=high, count=len(group), mean_confidence=conf, accuracy=acc))
        ece += (len(group) / n) * abs(acc - conf)
    return CalibrationReport(n_bins=n_bins, n_records=n, bins=bins, ece=min(ece, 1.0))


def records_from_distributions(
    distributions: np.ndarray, labels: Sequence[Union[Label, int]]
) -> List[PredictionRecord]:
    """Confidence is the max probability; ties resolve to the lowest class index."""
    dists = np.asarray(distributions, dtype=np.float64)
    if dists.shape[0] != len(labels):
        raise CalibrationError(f"{dists.shape[0]} predictions for {len(labels)} labels", error_code="length")
    predicted = np.argmax(dists, axis=-1)
    return [
        PredictionRecord(
            confidence=float(dists[i, predicted[i]]),
            predicted=int(predicted[i]),
            true=lab.index if isinstance(lab, Label) else int(lab),
        )
        for i, lab in enumerate(labels)
    ]


def reliability_dump(report: CalibrationReport, path: Union[str, Path]) -> Path:
    """Write the bins as CSV; an empty record set yields a header-only file."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            if report.n_records == 0:
                logger.warning(f"Writing header-only reliability file {path}: no records")
                return path
            for b in report.bins:
                writer.writerow([repr(b.low), repr(b.high), b.count, repr(b.mean_confidence), repr(b.accuracy), repr(b.gap)])
    except OSError as e:
        raise CrossFactError(f"cannot write reliability file {path}: {e}", error_code="unwritable") from e
    return path


def load_reliability(path: Union[str, Path]) -> List[CalibrationBin]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [
        CalibrationBin(
            index=i,
            low=float(row["bin_low"]),
            high=float(row["bin_high"]),
            count=int(row["count"]),
            mean_confidence=float(row["mean_confidence"]),
            accuracy=float(row["accuracy"]),
        )
        for i, row in enumerate(rows, start=1)
    ]


def language_ece(
    params: ModelParams,
    examples: Sequence[Example],
    languages: Optional[Sequence[str]] = None,
    n_bins: int = DEFAULT_BINS,
    batch_size: int = 256,
) -> Dict[str, CalibrationReport]:
    """One calibration report per language present, in ``languages`` order when given."""
    groups = split_by_language(examples)
    order = [lang for lang in (languages or languages_of(examples)) if lang in groups]
    order += [lang for lang in groups if lang not in order]
    reports: Dict[str, CalibrationReport] = {}
    for lang in order:
        group = groups[lang]
        records = records_from_distributions(predict(params, group, batch_size), [ex.label for ex in group])
        reports[lang] = compute_ece(records, n_bins)
    return reports


def macro_ece(reports: Dict[str, CalibrationReport]) -> float:
    if not reports:
        return 0.0
    return float(np.mean([report.ece for report in reports.values()]))
