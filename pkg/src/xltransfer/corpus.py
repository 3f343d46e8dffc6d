"""Dataset ingestion: MASSIVE-style JSONL, CoNLL NER files, pairing and splitting."""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .codec import ABSENT, LabeledSentence, LabelSet, parse_annotated, render_annotated

logger = logging.getLogger(__name__)

NER_TAGS = {"O", "B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC"}


class CorpusError(ValueError):
    pass


class MalformedRecord(CorpusError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class TokenMismatch(CorpusError):
    pass


class MalformedLine(CorpusError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class MissingGold(CorpusError):
    pass


@dataclass(frozen=True)
class Example:
    id: str
    locale: str
    plain: LabeledSentence
    gold: Optional[LabeledSentence] = None
    partition: Optional[str] = None

    def __post_init__(self):
        if self.plain.n_labeled:
            raise ValueError("plain sentence must be unlabeled")
        if self.gold is not None and self.gold.tokens != self.plain.tokens:
            raise TokenMismatch(f"example {self.id}: gold tokens differ from plain tokens")

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.plain.tokens

    def with_gold(self, gold: Optional[LabeledSentence]) -> "Example":
        return replace(self, gold=gold)

    def to_record(self) -> dict:
        rec = {"id": self.id, "locale": self.locale, "utt": " ".join(self.plain.tokens)}
        if self.gold is not None:
            rec["annot_utt"] = render_annotated(self.gold)
        if self.partition is not None:
            rec["partition"] = self.partition
        return rec


@dataclass(frozen=True)
class ParallelExample:
    id: str
    source: Example
    target: Example

    def __post_init__(self):
        if self.source.id != self.target.id:
            raise ValueError(f"id mismatch: {self.source.id} vs {self.target.id}")
        if self.source.locale == self.target.locale:
            raise ValueError(f"pair {self.id} has the same locale on both sides")

    def to_record(self) -> dict:
        return {"id": self.id, "source": self.source.to_record(), "target": self.target.to_record()}


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: Optional[int] = None

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def assignments(self) -> list[tuple[str, str]]:
        out = []
        for name in ("train", "validation", "test"):
            out.extend((ex.id, name) for ex in getattr(self, name))
        return out


def example_from_record(rec: dict, labels: Optional[LabelSet] = None, line_no: int = 0) -> Example:
    for key in ("id", "utt"):
        if key not in rec:
            raise MalformedRecord(line_no, f"missing field {key!r}")
    plain = LabeledSentence.unlabeled(str(rec["utt"]).split())
    gold = None
    if rec.get("annot_utt") is not None:
        gold = parse_annotated(rec["annot_utt"], labels, strict=labels is not None)
        if gold.tokens != plain.tokens:
            raise TokenMismatch(
                f"line {line_no}, id {rec['id']}: annot_utt has {len(gold.tokens)} tokens, "
                f"utt has {len(plain.tokens)}"
                + ("" if len(gold.tokens) != len(plain.tokens) else " (token strings differ)")
            )
    return Example(str(rec["id"]), str(rec.get("locale", "")), plain, gold, rec.get("partition"))


def load_massive(
    path: str | Path,
    locale: Optional[str] = None,
    labels: Optional[LabelSet] = None,
    strict: bool = True,
    diagnostics: Optional[list[str]] = None,
) -> list[Example]:
    """Read a MASSIVE-style JSONL file (fields id, locale, utt, annot_utt).

    Records for other locales are skipped when ``locale`` is given. A token
    mismatch between utt and annot_utt raises TokenMismatch, or with
    ``strict=False`` the record is dropped and reported in ``diagnostics``.
    """
    if diagnostics is None:
        diagnostics = []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise MalformedRecord(line_no, "record is not an object")
            if locale is not None and rec.get("locale", locale) != locale:
                continue
            try:
                ex = example_from_record(rec, labels, line_no)
            except TokenMismatch as exc:
                if strict:
                    raise
                diagnostics.append(str(exc))
                continue
            except ValueError as exc:
                if isinstance(exc, MalformedRecord):
                    raise
                raise MalformedRecord(line_no, str(exc)) from exc
            if locale is not None and not ex.locale:
                ex = replace(ex, locale=locale)
            out.append(ex)
    return out


def load_ner(
    path: str | Path,
    locale: str,
    warnings: Optional[list[str]] = None,
) -> list[Example]:
    """Read a two-column CoNLL file and collapse BIO tags to per-token labels.

    An I- tag that does not continue an entity of the same type is repaired
    to B- and reported in ``warnings``.
    """
    if warnings is None:
        warnings = []
    sentences: list[list[tuple[str, str]]] = []
    current: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                if current:
                    sentences.append(current)
                    current = []
                continue
            parts = line.split()
            if len(parts) != 2:
                raise MalformedLine(line_no, f"expected 'token tag', got {line.rstrip()!r}")
            token, tag = parts
            if tag not in NER_TAGS:
                raise MalformedLine(line_no, f"unknown tag {tag!r}")
            if tag.startswith("I-"):
                prev = current[-1][1] if current else "O"
                if prev[2:] != tag[2:]:
                    warnings.append(f"line {line_no}: dangling {tag} treated as B-{tag[2:]}")
                    tag = "B-" + tag[2:]
            current.append((token, tag))
    if current:
        sentences.append(current)

    out = []
    for idx, sent in enumerate(sentences):
        tokens = tuple(tok for tok, _ in sent)
        tags = tuple(ABSENT if tag == "O" else tag[2:] for _, tag in sent)
        out.append(Example(str(idx), locale, LabeledSentence.unlabeled(tokens), LabeledSentence(tokens, tags)))
    return out


def pair_parallel(
    source: Sequence[Example],
    target: Sequence[Example],
    diagnostics: Optional[list[str]] = None,
) -> list[ParallelExample]:
    """Inner join on id, in target order; unmatched ids go to ``diagnostics``."""
    if diagnostics is None:
        diagnostics = []
    by_id = {ex.id: ex for ex in source}
    target_ids = {ex.id for ex in target}
    pairs = []
    for ex in target:
        src = by_id.get(ex.id)
        if src is None:
            diagnostics.append(f"target id {ex.id} has no source")
            continue
        pairs.append(ParallelExample(ex.id, src, ex))
    for ex in source:
        if ex.id not in target_ids:
            diagnostics.append(f"source id {ex.id} has no target")
    return pairs


def split_sizes(n: int, ratio: Sequence[int] = (8, 1, 1)) -> tuple[int, int, int]:
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValueError(f"ratio parts must be three positive numbers, got {ratio}")
    total = sum(ratio)
    val = n * ratio[1] // total
    test = n * ratio[2] // total
    return n - val - test, val, test


def split_dataset(examples: Sequence, ratio: Sequence[int] = (8, 1, 1), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle then contiguous slicing; the rounding remainder goes to train."""
    items = list(examples)
    random.Random(seed).shuffle(items)
    n_train, n_val, _ = split_sizes(len(items), ratio)
    return DatasetSplit(
        train=items[:n_train],
        validation=items[n_train : n_train + n_val],
        test=items[n_train + n_val :],
        seed=seed,
    )


def split_by_partition(examples: Sequence, key=lambda ex: ex.partition) -> DatasetSplit:
    """Pass an upstream split through (partition names train/dev/validation/test)."""
    split = DatasetSplit([], [], [])
    names = {"train": "train", "dev": "validation", "validation": "validation", "test": "test"}
    for ex in examples:
        part = key(ex)
        if part not in names:
            raise CorpusError(f"example {ex.id} has unknown partition {part!r}")
        getattr(split, names[part]).append(ex)
    return split


def _gold_of(ex):
    if isinstance(ex, ParallelExample):
        return ex.target.gold
    return ex.gold


def filter_test_labeled(examples: Iterable) -> list:
    """Keep examples whose gold has at least one labeled token (target side for pairs)."""
    out = []
    for ex in examples:
        gold = _gold_of(ex)
        if gold is None:
            raise MissingGold(f"example {ex.id} has no gold labels")
        if gold.n_labeled:
            out.append(ex)
    return out


def write_split_manifest(split: DatasetSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex_id, name in split.assignments():
            fh.write(json.dumps({"id": ex_id, "split": name, "seed": split.seed}, ensure_ascii=False) + "\n")


def write_examples(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def write_pairs(pairs: Iterable[ParallelExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")


def read_pairs(path: str | Path) -> list[ParallelExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                src = example_from_record(rec["source"], line_no=line_no)
                tgt = example_from_record(rec["target"], line_no=line_no)
            except KeyError as exc:
                raise MalformedRecord(line_no, f"missing field {exc}") from exc
            out.append(ParallelExample(str(rec["id"]), src, tgt))
    return out
