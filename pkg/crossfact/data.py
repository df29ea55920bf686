"""Corpus types, FEVER-style JSONL ingestion, and the synthetic parallel corpus generator.

The generator guarantees the cross-lingual label-invariance hypothesis by
construction: every target language is a bijective token substitution of the
source language, bijections preserve token containment, and the negation
marker is never translated, so re-running ``label_rule`` on a noise-free
translation reproduces the original label.

Each topic's token block is split into fact tokens, which make up evidence and
verifiable claims, and unverifiable tokens, which only ever appear in NEI
claims. Telling NEI apart therefore takes per-language lexical knowledge, while
the negation marker alone separates SUP from REF.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, TypeVar, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from crossfact.core import SOURCE_LANG, DataError, Label, VocabularyError, TokenIds

logger = logging.getLogger(__name__)

SEP_TOKEN = "<sep>"
NEG_TOKEN = "<neg>"
RESERVED_TOKENS = (SEP_TOKEN, NEG_TOKEN)
SPLITS = ("train", "dev", "test")

T = TypeVar("T")


@dataclass(frozen=True)
class Example:
    """A claim-evidence pair with its verdict, in one language."""
    claim: Tuple[str, ...]
    evidence: Tuple[str, ...]
    label: Label
    lang: str
    pair_id: int


@dataclass(frozen=True)
class ParallelPair:
    """An original example bound to one of its translations."""
    original: Example
    translated: Example

    def __post_init__(self) -> None:
        if self.original.label != self.translated.label:
            raise DataError(
                f"label mismatch for pair_id {self.original.pair_id}: "
                f"{self.original.label.value} vs {self.translated.label.value}",
                error_code="label_mismatch",
                context={"pair_id": self.original.pair_id},
            )
        if self.original.pair_id != self.translated.pair_id:
            raise DataError(
                f"pair_id mismatch: {self.original.pair_id} vs {self.translated.pair_id}",
                error_code="pair_id_mismatch",
            )


class CorpusSpec(BaseModel):
    """Parameters of the synthetic parallel corpus."""

    languages: List[str] = Field(default_factory=lambda: [SOURCE_LANG, "xa", "xb", "xc"])
    source_lang: str = Field(default=SOURCE_LANG)
    train_size: int = Field(default=5000, ge=0)
    dev_size: int = Field(default=500, ge=0)
    test_size: int = Field(default=1000, ge=0)
    vocab_size: int = Field(default=400, ge=8, description="Source-language content vocabulary size.")
    n_topics: int = Field(default=20, ge=2)
    evidence_length: int = Field(default=6, ge=2)
    claim_length: int = Field(default=3, ge=1)
    cognate_ratio: float = Field(default=0.3)
    noise_rate: float = Field(default=0.02)
    unverifiable_share: float = Field(default=0.25, description="Share of each topic reserved for NEI claims.")
    seed: int = Field(default=13)

    @field_validator("cognate_ratio", "noise_rate", "unverifiable_share")
    @classmethod
    def _unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"must lie in [0, 1], got {value}")
        return value

    @model_validator(mode="after")
    def _check_layout(self) -> "CorpusSpec":
        if self.source_lang not in self.languages:
            raise ValueError(f"source language {self.source_lang!r} missing from languages")
        if len(set(self.languages)) != len(self.languages):
            raise ValueError("languages must be distinct")
        if self.claim_length > self.evidence_length:
            raise ValueError("claim_length cannot exceed evidence_length")
        n_facts = self.topic_size - self.unverifiable_per_topic
        if n_facts < self.evidence_length:
            raise ValueError(
                f"topics of {self.topic_size} tokens ({n_facts} fact tokens) cannot hold evidence "
                f"of {self.evidence_length} tokens"
            )
        return self

    @property
    def target_languages(self) -> List[str]:
        return [lang for lang in self.languages if lang != self.source_lang]

    @property
    def topic_size(self) -> int:
        return self.vocab_size // self.n_topics

    @property
    def unverifiable_per_topic(self) -> int:
        """Tokens at the end of each topic block that never occur in evidence."""
        return max(self.claim_length, int(round(self.unverifiable_share * self.topic_size)))


class ExampleRecord(BaseModel):
    """One JSONL line; tokens are space-separated strings."""

    claim: str
    evidence: str
    label: Label
    lang: str
    pair_id: int

    def to_example(self) -> Example:
        return Example(
            claim=tuple(self.claim.split()),
            evidence=tuple(self.evidence.split()),
            label=self.label,
            lang=self.lang,
            pair_id=self.pair_id,
        )

    @classmethod
    def from_example(cls, example: Example) -> "ExampleRecord":
        return cls(
            claim=" ".join(example.claim),
            evidence=" ".join(example.evidence),
            label=example.label,
            lang=example.lang,
            pair_id=example.pair_id,
        )


class Vocabulary:
    """Ordered token table; reserved tokens occupy the first ids."""

    def __init__(self, tokens: Sequence[str]) -> None:
        self.tokens: Tuple[str, ...] = tuple(tokens)
        self._index: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens", error_code="duplicate_token")
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise DataError(f"vocabulary must start with {RESERVED_TOKENS}", error_code="reserved_tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def missing(self, examples: Iterable[Example]) -> List[str]:
        """Tokens used by ``examples`` that the vocabulary lacks, sorted."""
        unknown = {tok for ex in examples for tok in (*ex.claim, *ex.evidence) if tok not in self._index}
        return sorted(unknown)

    @property
    def sep_id(self) -> int:
        return self._index[SEP_TOKEN]

    def encode(self, example: Example) -> TokenIds:
        """Claim ids ++ [sep] ++ evidence ids."""
        sequence = (*example.claim, SEP_TOKEN, *example.evidence)
        ids = np.empty(len(sequence), dtype=np.int64)
        for position, token in enumerate(sequence):
            idx = self._index.get(token)
            if idx is None:
                raise VocabularyError(
                    f"token {token!r} at position {position} of pair_id {example.pair_id} ({example.lang}) "
                    f"is not in the vocabulary",
                    position=position,
                    error_code="oov_token",
                    context={"token": token, "pair_id": example.pair_id, "lang": example.lang},
                )
            ids[position] = idx
        return ids


def build_vocabulary(splits: Iterable[Iterable[Example]]) -> Vocabulary:
    """Reserved tokens first, then every corpus token in sorted order."""
    seen = set()
    for examples in splits:
        for example in examples:
            seen.update(example.claim)
            seen.update(example.evidence)
    seen.difference_update(RESERVED_TOKENS)
    return Vocabulary([*RESERVED_TOKENS, *sorted(seen)])


# Labeling rule and generator

def label_rule(claim: Sequence[str], evidence: Sequence[str]) -> Label:
    """SUP iff every claim content token occurs in the evidence and the evidence
    carries no negation; REF iff the tokens occur and the evidence is negated;
    NEI otherwise."""
    content = [tok for tok in claim if tok not in RESERVED_TOKENS]
    evidence_set = set(evidence)
    if content and all(tok in evidence_set for tok in content):
        return Label.REF if NEG_TOKEN in evidence_set else Label.SUP
    return Label.NEI


@dataclass(frozen=True)
class Lexicon:
    """Bijective token substitution from the source language into ``lang``."""
    lang: str
    mapping: Mapping[str, str]

    def __post_init__(self) -> None:
        if len(set(self.mapping.values())) != len(self.mapping):
            raise DataError(f"lexicon for {self.lang!r} is not injective", error_code="lexicon_not_bijective")

    def translate(self, tokens: Sequence[str]) -> Tuple[str, ...]:
        return tuple(self.mapping.get(tok, tok) for tok in tokens)

    def inverse(self) -> "Lexicon":
        return Lexicon(lang=SOURCE_LANG, mapping={v: k for k, v in self.mapping.items()})


def _source_tokens(spec: CorpusSpec) -> List[str]:
    return [f"w{i:04d}" for i in range(spec.vocab_size)]


def build_lexicons(spec: CorpusSpec) -> Dict[str, Lexicon]:
    """One lexicon per target language; a ``cognate_ratio`` share of tokens stays shared."""
    source = _source_tokens(spec)
    n_shared = int(round(spec.cognate_ratio * len(source)))
    lexicons: Dict[str, Lexicon] = {}
    for offset, lang in enumerate(spec.target_languages, start=1):
        rng = np.random.default_rng([spec.seed, 7919, offset])
        order = rng.permutation(len(source))
        shared = {source[i] for i in order[:n_shared]}
        mapping = {tok: (tok if tok in shared else f"{lang}_{tok}") for tok in source}
        lexicons[lang] = Lexicon(lang=lang, mapping=mapping)
    return lexicons


def _make_source_example(rng: np.random.Generator, spec: CorpusSpec, label: Label, pair_id: int) -> Example:
    source = _source_tokens(spec)
    topic = int(rng.integers(spec.n_topics))
    block = source[topic * spec.topic_size:(topic + 1) * spec.topic_size]
    n_facts = spec.topic_size - spec.unverifiable_per_topic
    facts, unverifiable = block[:n_facts], block[n_facts:]
    evidence = [facts[i] for i in rng.choice(n_facts, size=spec.evidence_length, replace=False)]

    if label is Label.NEI:
        picks = rng.choice(len(unverifiable), size=spec.claim_length, replace=False)
        claim = [unverifiable[i] for i in picks]
        negated = bool(rng.random() < 0.5)
    else:
        claim = [evidence[i] for i in rng.choice(spec.evidence_length, size=spec.claim_length, replace=False)]
        negated = label is Label.REF

    if negated:
        evidence.insert(int(rng.integers(len(evidence) + 1)), NEG_TOKEN)
    example = Example(claim=tuple(claim), evidence=tuple(evidence), label=label, lang=spec.source_lang, pair_id=pair_id)
    return example


def _translate(
    example: Example, lexicon: Lexicon, noise_rate: float, noise_vocab: Sequence[str], rng: np.random.Generator
) -> Example:
    def noisy(tokens: Tuple[str, ...]) -> Tuple[str, ...]:
        translated = list(lexicon.translate(tokens))
        if noise_rate > 0.0:
            for i, tok in enumerate(translated):
                if tok != NEG_TOKEN and rng.random() < noise_rate:
                    translated[i] = noise_vocab[int(rng.integers(len(noise_vocab)))]
        return tuple(translated)

    return Example(
        claim=noisy(example.claim),
        evidence=noisy(example.evidence),
        label=example.label,
        lang=lexicon.lang,
        pair_id=example.pair_id,
    )


def generate_corpus(spec: CorpusSpec) -> Dict[str, List[Example]]:
    """Generate train/dev/test splits; each split lists source examples followed by
    every target language's translations, in language order.

    Labels cycle SUP, REF, NEI before a seeded shuffle, so class counts differ by
    at most one. Translation noise touches only the training split.
    """
    lexicons = build_lexicons(spec)
    rng = np.random.default_rng(spec.seed)
    sizes = {"train": spec.train_size, "dev": spec.dev_size, "test": spec.test_size}

    splits: Dict[str, List[Example]] = {}
    next_pair_id = 0
    for split in SPLITS:
        n = sizes[split]
        labels = [Label.from_index(i % 3) for i in range(n)]
        order = rng.permutation(n)
        originals = [
            _make_source_example(rng, spec, labels[int(j)], next_pair_id + i) for i, j in enumerate(order)
        ]
        next_pair_id += n

        examples = list(originals)
        for lang in spec.target_languages:
            lexicon = lexicons[lang]
            noise_vocab = sorted(set(lexicon.mapping.values()))
            noise = spec.noise_rate if split == "train" else 0.0
            examples.extend(_translate(ex, lexicon, noise, noise_vocab, rng) for ex in originals)
        splits[split] = examples
        logger.info(f"Generated {split} split: {n} originals x {len(spec.languages)} languages")
    return splits


# Storage

def split_path(root: Union[str, Path], split: str, lang: str) -> Path:
    return Path(root) / f"{split}.{lang}.jsonl"


def write_split(path: Union[str, Path], examples: Iterable[Example]) -> None:
    lines = [json.dumps(ExampleRecord.from_example(ex).model_dump(mode="json"), ensure_ascii=False) for ex in examples]
    try:
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}", error_code="unwritable") from e


def write_corpus(root: Union[str, Path], splits: Mapping[str, Sequence[Example]]) -> List[Path]:
    """Write ``<root>/<split>.<lang>.jsonl`` files; returns the paths written."""
    root_path = Path(root)
    try:
        root_path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create corpus directory {root_path}: {e}", error_code="unwritable") from e
    written: List[Path] = []
    for split, examples in splits.items():
        for lang, group in split_by_language(examples).items():
            path = split_path(root_path, split, lang)
            write_split(path, group)
            written.append(path)
    return written


def load_split(path: Union[str, Path]) -> List[Example]:
    """Parse one JSONL file; malformed lines are rejected with their line number."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}", error_code="unreadable_split") from e

    examples: List[Example] = []
    for line_no, raw_line in enumerate(raw.splitlines(), start=1):
        try:
            line = raw_line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(
                f"{path}:{line_no}: invalid UTF-8 at byte {e.start}",
                error_code="malformed_line",
                context={"path": str(path), "line": line_no},
            ) from e
        if not line.strip():
            continue
        try:
            record = ExampleRecord.model_validate_json(line)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(part) for part in first.get("loc", ())) or "record"
            raise DataError(
                f"{path}:{line_no}: invalid {where}: {first.get('msg', 'malformed record')}",
                error_code="malformed_line",
                context={"path": str(path), "line": line_no},
            ) from e
        examples.append(record.to_example())
    return examples


def load_corpus(root: Union[str, Path]) -> Dict[str, List[Example]]:
    """Load every ``<split>.<lang>.jsonl`` under ``root``; source language first per split."""
    root_path = Path(root)
    if not root_path.is_dir():
        raise DataError(f"corpus directory not found: {root_path}", error_code="missing_corpus")
    corpus: Dict[str, List[Example]] = {}
    for split in SPLITS:
        files = sorted(root_path.glob(f"{split}.*.jsonl"), key=lambda p: (_lang_of(p) != SOURCE_LANG, _lang_of(p)))
        if files:
            corpus[split] = [ex for path in files for ex in load_split(path)]
    if not corpus:
        raise DataError(f"no <split>.<lang>.jsonl files under {root_path}", error_code="empty_corpus")
    return corpus


def _lang_of(path: Path) -> str:
    return path.name.split(".")[1]


def split_by_language(examples: Iterable[Example]) -> Dict[str, List[Example]]:
    groups: Dict[str, List[Example]] = {}
    for ex in examples:
        groups.setdefault(ex.lang, []).append(ex)
    return groups


def languages_of(examples: Iterable[Example], source_lang: str = SOURCE_LANG) -> List[str]:
    """Languages present, source first, then in order of first appearance."""
    langs = list(dict.fromkeys(ex.lang for ex in examples))
    return sorted(langs, key=lambda lang: lang != source_lang)


def pair_up(originals: Sequence[Example], translations: Sequence[Example]) -> List[ParallelPair]:
    """Join on pair_id; every original needs exactly one counterpart and vice versa."""
    by_id: Dict[int, Example] = {}
    for ex in translations:
        if ex.pair_id in by_id:
            raise DataError(f"duplicate pair_id {ex.pair_id} among translations", error_code="duplicate_pair_id")
        by_id[ex.pair_id] = ex

    pairs: List[ParallelPair] = []
    for original in originals:
        translated = by_id.pop(original.pair_id, None)
        if translated is None:
            raise DataError(
                f"pair_id {original.pair_id} has no translated counterpart",
                error_code="missing_counterpart",
                context={"pair_id": original.pair_id},
            )
        pairs.append(ParallelPair(original=original, translated=translated))
    if by_id:
        orphan = min(by_id)
        raise DataError(
            f"pair_id {orphan} has no original counterpart",
            error_code="missing_counterpart",
            context={"pair_id": orphan},
        )
    return pairs


def make_pairs(examples: Sequence[Example], source_lang: str = SOURCE_LANG) -> Dict[str, List[ParallelPair]]:
    """All (original, translation) pairs of a split, keyed by target language."""
    groups = split_by_language(examples)
    originals = groups.get(source_lang)
    if not originals:
        raise DataError(f"no {source_lang!r} examples to pair with", error_code="missing_source")
    return {lang: pair_up(originals, group) for lang, group in groups.items() if lang != source_lang}


# Epoch shuffling

def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def shuffle_epoch(items: Sequence[T], seed: int, epoch: int) -> List[T]:
    """Deterministic permutation per (seed, epoch)."""
    order = epoch_rng(seed, epoch).permutation(len(items))
    return [items[int(i)] for i in order]


def draw_parallel_epoch(
    pairs_by_lang: Mapping[str, Sequence[ParallelPair]],
    seed: int,
    epoch: int,
    exhaustive: bool = False,
) -> List[ParallelPair]:
    """Pairs for one parallel-training epoch.

    By default each original is paired with one target language drawn uniformly
    for this epoch, so a full cycle over the target languages covers N x |T|
    pairs. ``exhaustive`` uses every pair every epoch.
    """
    langs = sorted(pairs_by_lang)
    if not langs:
        return []
    rng = epoch_rng(seed, epoch)
    if exhaustive:
        pool = [pair for lang in langs for pair in pairs_by_lang[lang]]
    else:
        n = len(pairs_by_lang[langs[0]])
        choice = rng.integers(len(langs), size=n)
        pool = [pairs_by_lang[langs[int(c)]][i] for i, c in enumerate(choice)]
    order = rng.permutation(len(pool))
    return [pool[int(i)] for i in order]


def class_counts(examples: Iterable[Example]) -> Dict[Label, int]:
    counts = Counter(ex.label for ex in examples)
    return {label: counts.get(label, 0) for label in Label}


def relabel_mismatches(examples: Iterable[Example]) -> List[Example]:
    """Examples whose stored label disagrees with ``label_rule`` on their own text."""
    return [ex for ex in examples if label_rule(ex.claim, ex.evidence) is not ex.label]

