"""Prompt construction for SFT records and few-shot ICL, plus exemplar retrieval."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .align import Alignment, reorder_target
from .codec import TaskKind, render_annotated
from .corpus import ParallelExample
from .translit import script_for_locale, transliterate_tokens


class PromptError(ValueError):
    pass


class MissingSourceLabels(PromptError):
    pass


class MissingTargetGold(PromptError):
    pass


class VariantMismatch(PromptError):
    pass


class MissingEmbedding(KeyError):
    pass


class Family(str, enum.Enum):
    SFT_HANDHOLDING = "sft_handholding"
    SFT_MONOLINGUAL = "sft_monolingual"
    ICL_HANDHOLDING = "icl_handholding"


class Variant(str, enum.Enum):
    HANDHOLDING = "handholding"
    REORDERED = "reordered"
    TRANSLITERATED = "transliterated"
    PSEUDO_SOURCE = "pseudo_source"


LANGUAGE_NAMES = {"en": "English", "hi": "Hindi", "bn": "Bengali", "ta": "Tamil"}

TASK_PHRASES = {
    TaskKind.SLOT_FILLING: "slot annotations",
    TaskKind.NER: "named entity annotations",
}


def language_name(locale: str) -> str:
    lang = locale.split("-")[0].split("_")[0].lower()
    return LANGUAGE_NAMES.get(lang, locale)


def as_tags(tags: Iterable) -> frozenset[Variant]:
    return frozenset(Variant(t) for t in tags)


@dataclass(frozen=True)
class PromptTemplate:
    family: Family
    target_language_name: str = "Hindi"
    source_language_name: str = "English"
    task_phrase: str = "slot annotations"

    def sft(self, target_line: str, source_line: Optional[str] = None) -> str:
        tgt, src = self.target_language_name, self.source_language_name
        if self.family is Family.SFT_HANDHOLDING:
            head = f"Reinsert the {self.task_phrase} into the following {tgt} sentence using the information in the {src} sentence."
            body = [f"### {tgt}: {target_line}", f"### {src}: {source_line}"]
        elif self.family is Family.SFT_MONOLINGUAL:
            head = f"Reinsert the {self.task_phrase} into the following {tgt} sentence."
            body = [f"### {tgt}: {target_line}"]
        else:
            raise PromptError(f"{self.family.value} is not an SFT family")
        return "\n".join([head, "", *body, "### Output:"])

    def icl_system(self) -> str:
        tgt, src = self.target_language_name, self.source_language_name
        return "\n".join(
            [
                f"<<SYS>> Add annotations for the corresponding tokens in {tgt} sentences using the annotation "
                f"information given in the {src} sentence. The annotations are marked in the format "
                "[annotation_type : token/value]",
                "Input will be provided in the following format",
                f"### {tgt}: {tgt} sentence",
                f"### {src}: {src} sentence",
                'Output should be printed after the string "### Output:"',
                f"The final output should be the {tgt} sentence with annotations inserted corresponding to the "
                f"annotations of the {src} sentence. Do not add any extra annotations to the {tgt} sentence, "
                f"which are not present in the {src} sentence input.<</SYS>>",
            ]
        )

    def icl_block(self, token_list: str, target_line: str, source_line: str, completion: Optional[str] = None) -> str:
        tgt, src = self.target_language_name, self.source_language_name
        out = "### Output:" if completion is None else f"### Output: {completion}"
        return "\n".join(
            [
                f"Add annotations for the given tokens {token_list} in {tgt} sentence using the annotation "
                f"information given in the {src} sentence",
                f"### {tgt}: {target_line}",
                f"### {src}: {source_line}",
                out,
            ]
        )

    def icl(self, demos: Sequence[tuple[str, str, str, str]], query: tuple[str, str, str]) -> str:
        if self.family is not Family.ICL_HANDHOLDING:
            raise PromptError(f"{self.family.value} is not an ICL family")
        blocks = [self.icl_system()]
        blocks.extend(self.icl_block(*d) for d in demos)
        blocks.append(self.icl_block(*query))
        return "\n\n".join(blocks)


def template_for(family: Family, pair: ParallelExample, task: TaskKind | str) -> PromptTemplate:
    return PromptTemplate(
        family,
        target_language_name=language_name(pair.target.locale),
        source_language_name=language_name(pair.source.locale),
        task_phrase=TASK_PHRASES[TaskKind(task)],
    )


def read_golden(name: str) -> str:
    return resources.files("xltransfer").joinpath(f"resources/prompts/golden/{name}.txt").read_text("utf-8")


@dataclass(frozen=True)
class PromptRecord:
    id: str
    prompt_text: str
    expected_completion: Optional[str] = None
    variant_tags: frozenset[Variant] = frozenset()
    metadata: Mapping[str, object] = field(default_factory=dict)

    def to_sft_json(self) -> dict:
        return {
            "id": self.id,
            "prompt": self.prompt_text,
            "completion": self.expected_completion,
            "variant_tags": sorted(t.value for t in self.variant_tags),
        }

    def to_json(self) -> dict:
        return {**self.to_sft_json(), "metadata": dict(self.metadata)}

    @classmethod
    def from_json(cls, rec: dict) -> "PromptRecord":
        return cls(
            str(rec["id"]),
            rec["prompt"],
            rec.get("completion"),
            as_tags(rec.get("variant_tags", ())),
            rec.get("metadata", {}),
        )


def masquerade_target(
    pair: ParallelExample,
    variant_tags: Iterable,
    alignment: Optional[Alignment] = None,
) -> list[str]:
    """Target tokens as shown in the prompt: reordered and/or transliterated."""
    tags = as_tags(variant_tags)
    tokens = list(pair.target.tokens)
    if Variant.REORDERED in tags:
        if alignment is None:
            raise PromptError(f"pair {pair.id}: reordering needs an alignment")
        tokens = reorder_target(tokens, alignment)
    if Variant.TRANSLITERATED in tags:
        tokens = transliterate_tokens(tokens, script_for_locale(pair.target.locale))
    return tokens


def _metadata(family: Family, task: TaskKind) -> dict:
    meta = {"family": family.value, "task": task.value}
    if task is TaskKind.NER:
        meta["deviation"] = "template wording adapted for named entities"
    return meta


def build_sft_record(
    pair: ParallelExample,
    variant_tags: Iterable,
    alignment: Optional[Alignment] = None,
    task: TaskKind | str = TaskKind.SLOT_FILLING,
) -> PromptRecord:
    tags = as_tags(variant_tags)
    task = TaskKind(task)
    if pair.target.gold is None:
        raise MissingTargetGold(pair.id)
    handholding = Variant.HANDHOLDING in tags
    family = Family.SFT_HANDHOLDING if handholding else Family.SFT_MONOLINGUAL
    source_line = None
    if handholding:
        if pair.source.gold is None:
            raise MissingSourceLabels(pair.id)
        source_line = render_annotated(pair.source.gold)
    target_line = " ".join(masquerade_target(pair, tags, alignment))
    text = template_for(family, pair, task).sft(target_line, source_line)
    return PromptRecord(pair.id, text, render_annotated(pair.target.gold), tags, _metadata(family, task))


def _icl_parts(pair: ParallelExample, tags, alignment) -> tuple[str, str, str]:
    if pair.source.gold is None:
        raise MissingSourceLabels(pair.id)
    return (
        ", ".join(pair.source.gold.labeled_tokens()),
        " ".join(masquerade_target(pair, tags, alignment)),
        render_annotated(pair.source.gold),
    )


def build_icl_prompt(
    query: ParallelExample,
    demos: Sequence[ParallelExample],
    variant_tags: Iterable,
    demo_tags: Optional[Sequence[Iterable]] = None,
    alignments: Optional[Mapping[str, Alignment]] = None,
    task: TaskKind | str = TaskKind.SLOT_FILLING,
    k: int = 8,
) -> PromptRecord:
    """Few-shot handholding prompt: system block, completed demos, open query block.

    ``demo_tags`` gives each demonstration's own variant tags (defaults to
    the query's); any difference raises VariantMismatch.
    """
    tags = as_tags(variant_tags)
    task = TaskKind(task)
    alignments = alignments or {}
    if Variant.HANDHOLDING not in tags:
        raise PromptError("ICL prompts require the handholding variant")
    if len(demos) > k:
        raise PromptError(f"{len(demos)} demonstrations exceed k={k}")
    if demo_tags is not None:
        if len(demo_tags) != len(demos):
            raise PromptError("demo_tags must parallel demos")
        for demo, dt in zip(demos, demo_tags):
            if as_tags(dt) != tags:
                raise VariantMismatch(f"demo {demo.id} tags differ from query {query.id}")
    blocks = []
    for demo in demos:
        if demo.id == query.id:
            raise PromptError(f"query {query.id} appears among its own demonstrations")
        if demo.target.gold is None:
            raise MissingTargetGold(demo.id)
        blocks.append((*_icl_parts(demo, tags, alignments.get(demo.id)), render_annotated(demo.target.gold)))
    text = template_for(Family.ICL_HANDHOLDING, query, task).icl(blocks, _icl_parts(query, tags, alignments.get(query.id)))
    meta = _metadata(Family.ICL_HANDHOLDING, task)
    meta["demos"] = [d.id for d in demos]
    return PromptRecord(query.id, text, None, tags, meta)


@dataclass
class RetrievalConfig:
    embeddings: Mapping[str, Sequence[float]]
    k: int = 8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        dims = {len(v) for v in self.embeddings.values()}
        if len(dims) > 1:
            raise ValueError(f"embeddings have mixed dimensions {sorted(dims)}")


def _vector(cfg: RetrievalConfig, key: str) -> np.ndarray:
    try:
        return np.asarray(cfg.embeddings[key], dtype=float)
    except KeyError:
        raise MissingEmbedding(key) from None


def retrieve_exemplars(query_id: str, pool: Iterable[str], cfg: RetrievalConfig) -> list[str]:
    """Top-k pool ids by cosine similarity to the query; ties by ascending id."""
    q = _vector(cfg, query_id)
    ids = sorted({p for p in pool if p != query_id})
    if not ids:
        return []
    mat = np.stack([_vector(cfg, p) for p in ids])
    norms = np.linalg.norm(mat, axis=1) * np.linalg.norm(q)
    dots = mat @ q
    sims = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    order = sorted(range(len(ids)), key=lambda n: (-sims[n], ids[n]))
    return [ids[n] for n in order[: cfg.k]]


def load_embeddings(path: str | Path) -> dict[str, list[float]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            vec = [float(x) for x in rec["vector"]]
            if not all(math.isfinite(x) for x in vec):
                raise ValueError(f"{path}:{line_no}: non-finite embedding value")
            out[str(rec["id"])] = vec
    return out


def write_records(records: Iterable[PromptRecord], path: str | Path, sft: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_sft_json() if sft else r.to_json(), ensure_ascii=False) + "\n")


def read_records(path: str | Path) -> list[PromptRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PromptRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def sft_config(task: TaskKind | str) -> dict:
    table = json.loads(resources.files("xltransfer").joinpath("resources/sft_config.json").read_text("utf-8"))
    return table["massive" if TaskKind(task) is TaskKind.SLOT_FILLING else "naamapadam"]
