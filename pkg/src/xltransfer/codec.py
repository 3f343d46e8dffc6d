"""Bracketed annotation format: ``will it be [weather_descriptor : sun] on [date : sunday]``.

Sentences are held in memory as parallel token/label tuples, with ``None``
standing for "no label". The surface text is the only encoding handed to or
read back from a language model.
"""
from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

ABSENT = None
SEPARATOR = " : "

_LOOSE_SEPARATOR = re.compile(r"\s*:\s*")


class TaskKind(str, enum.Enum):
    SLOT_FILLING = "slot_filling"
    NER = "ner"


class AnnotationError(ValueError):
    """Base class for malformed annotated text."""


class UnbalancedBrackets(AnnotationError):
    pass


class UnknownLabel(AnnotationError):
    pass


class EmptyGroup(AnnotationError):
    pass


class MalformedGroup(AnnotationError):
    """A bracket group without the ``label : tokens`` shape."""


@dataclass(frozen=True)
class LabelSet:
    task_kind: TaskKind
    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise ValueError("label set is empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("label names must be unique")

    def __contains__(self, name: object) -> bool:
        return name in self._names

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    @property
    def _names(self) -> frozenset[str]:
        return frozenset(self.labels)


_LABEL_FILES = {
    TaskKind.SLOT_FILLING: "massive_slots.txt",
    TaskKind.NER: "naamapadam_ner.txt",
}


def read_label_table(task_kind: TaskKind | str) -> list[str]:
    """Raw lines of a bundled label table, duplicates included."""
    name = _LABEL_FILES[TaskKind(task_kind)]
    text = resources.files("xltransfer").joinpath(f"resources/labels/{name}").read_text("utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_label_set(task_kind: TaskKind | str) -> LabelSet:
    """Load a bundled label table.

    The slot table is transcribed verbatim and repeats ``change_amount``;
    repeats are collapsed here so the set stays unique.
    """
    kind = TaskKind(task_kind)
    raw = read_label_table(kind)
    unique = tuple(dict.fromkeys(raw))
    if len(unique) != len(raw):
        logger.warning("label table %s has %d duplicate entries", kind.value, len(raw) - len(unique))
    return LabelSet(kind, unique)


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple[str, ...]
    labels: tuple[Optional[str], ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.tokens) != len(self.labels):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.labels)} labels")
        for tok in self.tokens:
            if not tok or any(ch.isspace() for ch in tok) or "[" in tok or "]" in tok:
                raise ValueError(f"invalid token {tok!r}")
        for lab in self.labels:
            if lab is not None and (not lab or any(ch.isspace() for ch in lab) or set(lab) & set("[]:")):
                raise ValueError(f"invalid label {lab!r}")

    @classmethod
    def unlabeled(cls, tokens: Iterable[str]) -> "LabeledSentence":
        tokens = tuple(tokens)
        return cls(tokens, (ABSENT,) * len(tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_labeled(self) -> int:
        return sum(lab is not None for lab in self.labels)

    def labeled_tokens(self) -> list[str]:
        return [tok for tok, lab in zip(self.tokens, self.labels) if lab is not None]

    def validate(self, labels: LabelSet) -> None:
        for lab in self.labels:
            if lab is not None and lab not in labels:
                raise UnknownLabel(lab)


def _split_group(body: str, strict: bool) -> tuple[str, str]:
    if SEPARATOR in body:
        label, _, rest = body.partition(SEPARATOR)
        return label.strip(), rest
    if not strict:
        m = _LOOSE_SEPARATOR.search(body)
        if m:
            return body[: m.start()].strip(), body[m.end():]
    raise MalformedGroup(f"missing ' : ' separator in [{body}]")


def _segments(text: str) -> list[tuple[bool, str]]:
    """Split text into (is_group, body) pieces; raises on unbalanced brackets."""
    out = []
    pos = 0
    while pos < len(text):
        open_at = text.find("[", pos)
        close_at = text.find("]", pos)
        if close_at != -1 and (open_at == -1 or close_at < open_at):
            raise UnbalancedBrackets(f"']' without '[' at offset {close_at}")
        if open_at == -1:
            out.append((False, text[pos:]))
            break
        out.append((False, text[pos:open_at]))
        end = text.find("]", open_at + 1)
        nested = text.find("[", open_at + 1)
        if end == -1:
            raise UnbalancedBrackets(f"'[' at offset {open_at} is never closed")
        if nested != -1 and nested < end:
            raise UnbalancedBrackets(f"nested '[' at offset {nested}")
        out.append((True, text[open_at + 1 : end]))
        pos = end + 1
    return out


def parse_annotated(
    text: str,
    labels: Optional[LabelSet] = None,
    strict: bool = False,
    warnings: Optional[list[str]] = None,
) -> LabeledSentence:
    """Parse bracketed annotated text into a LabeledSentence.

    With ``labels`` given, names outside the set raise UnknownLabel in strict
    mode and are dropped to ABSENT (with a message appended to ``warnings``)
    otherwise. Lenient mode also tolerates a loose ``label:tokens``
    separator and skips empty groups instead of raising.
    """
    if warnings is None:
        warnings = []
    tokens: list[str] = []
    tags: list[Optional[str]] = []
    for is_group, body in _segments(text):
        if not is_group:
            words = body.split()
            tokens.extend(words)
            tags.extend([ABSENT] * len(words))
            continue
        try:
            label, rest = _split_group(body, strict)
        except MalformedGroup:
            if strict:
                raise
            warnings.append(f"group without separator treated as plain text: [{body}]")
            words = body.split()
            tokens.extend(words)
            tags.extend([ABSENT] * len(words))
            continue
        words = rest.split()
        if not words:
            if strict:
                raise EmptyGroup(f"[{body}] has no tokens")
            warnings.append(f"empty group skipped: [{body}]")
            continue
        valid_name = bool(label) and not any(ch.isspace() for ch in label) and ":" not in label
        if not valid_name or (labels is not None and label not in labels):
            if strict:
                raise UnknownLabel(label)
            warnings.append(f"unknown label {label!r} mapped to ABSENT")
            label = ABSENT
        tokens.extend(words)
        tags.extend([label] * len(words))
    return LabeledSentence(tuple(tokens), tuple(tags))


def render_annotated(z: LabeledSentence) -> str:
    """Render with runs of the same label merged into one bracket group."""
    parts: list[str] = []
    i = 0
    n = len(z.tokens)
    while i < n:
        lab = z.labels[i]
        if lab is None:
            parts.append(z.tokens[i])
            i += 1
            continue
        j = i
        while j < n and z.labels[j] == lab:
            j += 1
        parts.append(f"[{lab}{SEPARATOR}{' '.join(z.tokens[i:j])}]")
        i = j
    return " ".join(parts)


def strip_labels(z: LabeledSentence) -> LabeledSentence:
    return LabeledSentence.unlabeled(z.tokens)


def relabel(z: LabeledSentence, tags: Sequence[Optional[str]]) -> LabeledSentence:
    return LabeledSentence(z.tokens, tuple(tags))
