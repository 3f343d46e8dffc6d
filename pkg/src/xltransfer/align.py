"""IBM Model 1 word alignment, target reordering and label projection.

Translation probabilities are stored as ``p[(target_word, source_word)]``
and normalised per source word: for each source word ``e``,
``sum_f p[(f, e)] == 1``.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .codec import ABSENT, LabeledSentence

NULL = "<NULL>"


class EmptySentence(ValueError):
    pass


@dataclass
class TranslationTable:
    p: dict[tuple[str, str], float]
    use_null: bool = False
    log_likelihoods: list[float] = field(default_factory=list)

    def prob(self, target_word: str, source_word: str) -> float:
        return self.p.get((target_word, source_word), 0.0)

    def row_sums(self) -> dict[str, float]:
        sums: dict[str, float] = defaultdict(float)
        for (_, e), v in self.p.items():
            sums[e] += v
        return dict(sums)

    def save_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for (f, e), v in sorted(self.p.items()):
                w.writerow([f, e, repr(v)])

    @classmethod
    def load_tsv(cls, path: str | Path) -> "TranslationTable":
        p = {}
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.reader(fh, delimiter="\t"):
                if row:
                    f, e, v = row
                    p[(f, e)] = float(v)
        return cls(p, use_null=any(e == NULL for _, e in p))


def _check_pairs(pairs):
    for k, (src, tgt) in enumerate(pairs):
        if not src or not tgt:
            raise EmptySentence(f"pair {k} has an empty side")


def _src_words(src: Sequence[str], use_null: bool) -> list[str]:
    return [NULL, *src] if use_null else list(src)


def corpus_log_likelihood(pairs, table: TranslationTable) -> float:
    """log P(targets | sources), with the uniform 1/(l+1)^m alignment prior."""
    ll = 0.0
    for src, tgt in pairs:
        words = _src_words(src, table.use_null)
        for f in tgt:
            s = sum(table.prob(f, e) for e in words)
            ll += math.log(s) - math.log(len(words))
    return ll


def train_ibm1(
    pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
    iterations: int = 5,
    use_null: bool = True,
) -> TranslationTable:
    """Fit IBM Model 1 translation probabilities with EM.

    Each source word starts uniform over the target words it co-occurs with.
    ``log_likelihoods[i]`` is the corpus log-likelihood before iteration
    ``i``; the final entry is measured after the last M-step.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not pairs:
        raise ValueError("no sentence pairs")
    pairs = [(list(s), list(t)) for s, t in pairs]
    _check_pairs(pairs)

    cooc: dict[str, set[str]] = defaultdict(set)
    for src, tgt in pairs:
        for e in _src_words(src, use_null):
            cooc[e].update(tgt)
    p = {}
    for e in sorted(cooc):
        fs = sorted(cooc[e])
        for f in fs:
            p[(f, e)] = 1.0 / len(fs)
    table = TranslationTable(p, use_null)

    for _ in range(iterations):
        table.log_likelihoods.append(corpus_log_likelihood(pairs, table))
        counts: dict[tuple[str, str], float] = defaultdict(float)
        totals: dict[str, float] = defaultdict(float)
        for src, tgt in pairs:
            words = _src_words(src, use_null)
            for f in tgt:
                z = sum(table.p[(f, e)] for e in words)
                for e in words:
                    c = table.p[(f, e)] / z
                    counts[(f, e)] += c
                    totals[e] += c
        table.p = {key: counts[key] / totals[key[1]] for key in table.p}
    table.log_likelihoods.append(corpus_log_likelihood(pairs, table))
    return table


@dataclass(frozen=True)
class Alignment:
    links: frozenset[tuple[int, int]]
    n_source: int
    n_target: int

    def __post_init__(self):
        object.__setattr__(self, "links", frozenset(self.links))
        for i, j in self.links:
            if not (0 <= i < self.n_source and 0 <= j < self.n_target):
                raise ValueError(f"link {i}-{j} out of range for {self.n_source}x{self.n_target}")

    @classmethod
    def identity(cls, n: int) -> "Alignment":
        return cls(frozenset((i, i) for i in range(n)), n, n)

    def to_pharaoh(self) -> str:
        return " ".join(f"{i}-{j}" for i, j in sorted(self.links))

    @classmethod
    def from_pharaoh(cls, line: str, n_source: int, n_target: int) -> "Alignment":
        links = set()
        for item in line.split():
            i, sep, j = item.partition("-")
            if not sep:
                raise ValueError(f"bad alignment link {item!r}")
            links.add((int(i), int(j)))
        return cls(frozenset(links), n_source, n_target)

    def sources_of(self, j: int) -> list[int]:
        return sorted(i for i, jj in self.links if jj == j)


def read_pharaoh(path: str | Path, sizes: Sequence[tuple[int, int]]) -> list[Alignment]:
    """Read one alignment per line; ``sizes`` gives (n_source, n_target) per line."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) != len(sizes):
        raise ValueError(f"{path}: {len(lines)} alignment lines for {len(sizes)} pairs")
    return [Alignment.from_pharaoh(line, ns, nt) for line, (ns, nt) in zip(lines, sizes)]


def write_pharaoh(alignments: Iterable[Alignment], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in alignments:
            fh.write(a.to_pharaoh() + "\n")


def _argmax_links(src, tgt, table: TranslationTable) -> set[tuple[int, int]]:
    links = set()
    for j, f in enumerate(tgt):
        best_i, best_p = -1, 0.0
        for i, e in enumerate(src):
            v = table.prob(f, e)
            if v > best_p:
                best_i, best_p = i, v
        if best_i < 0:
            continue
        if table.use_null and table.prob(f, NULL) > best_p:
            continue
        links.add((best_i, j))
    return links


def extract_alignment(
    source: Sequence[str],
    target: Sequence[str],
    table: TranslationTable,
    symmetrize: bool = False,
    reverse_table: Optional[TranslationTable] = None,
) -> Alignment:
    """Link each target word to its most probable source word.

    Ties go to the lowest source index; words the table does not cover, or
    whose best explanation is NULL, stay unaligned. ``symmetrize`` keeps
    only links also chosen in the other direction: by ``reverse_table``
    (trained with source and target swapped) when given, otherwise by
    each source word's most probable target word under ``table``.
    """
    forward = _argmax_links(source, target, table)
    if symmetrize:
        if reverse_table is not None:
            backward = {(i, j) for j, i in _argmax_links(target, source, reverse_table)}
        else:
            backward = set()
            for i, e in enumerate(source):
                best_j, best_p = -1, 0.0
                for j, f in enumerate(target):
                    v = table.prob(f, e)
                    if v > best_p:
                        best_j, best_p = j, v
                if best_j >= 0:
                    backward.add((i, best_j))
        forward &= backward
    return Alignment(frozenset(forward), len(source), len(target))


def reorder_permutation(alignment: Alignment) -> list[int]:
    """Target indices in source order.

    Aligned target words sort by (smallest linked source index, own index).
    An unaligned word travels with the nearest aligned word before it;
    unaligned words ahead of every aligned word stay in front.
    """
    n = alignment.n_target
    key: dict[int, int] = {}
    for i, j in alignment.links:
        key[j] = min(i, key.get(j, i))
    lead: list[int] = []
    units: list[tuple[tuple[int, int], list[int]]] = []
    for j in range(n):
        if j in key:
            units.append(((key[j], j), [j]))
        elif units:
            units[-1][1].append(j)
        else:
            lead.append(j)
    units.sort(key=lambda u: u[0])
    return lead + [j for _, members in units for j in members]


def reorder_target(target: Sequence[str], alignment: Alignment) -> list[str]:
    if len(target) != alignment.n_target:
        raise ValueError("alignment does not match target length")
    return [target[j] for j in reorder_permutation(alignment)]


def project_labels(source: LabeledSentence, target: Sequence[str], alignment: Alignment) -> LabeledSentence:
    """Copy labels across links; with several links the lowest source index wins."""
    if len(source) != alignment.n_source or len(target) != alignment.n_target:
        raise ValueError("alignment does not match sentence lengths")
    tags = []
    for j in range(len(target)):
        srcs = alignment.sources_of(j)
        tags.append(source.labels[srcs[0]] if srcs else ABSENT)
    return LabeledSentence(tuple(target), tuple(tags))
