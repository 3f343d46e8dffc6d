"""Experiment orchestration: ingest -> pseudo-label -> align -> masquerade -> prompts -> generate -> score.

Every stage writes JSONL artifacts under ``out_dir`` and records them in a
``manifest.json`` that is also written, marked failed, when a stage aborts.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .align import Alignment, extract_alignment, train_ibm1, write_pharaoh
from .backend import (
    MOCK_ENDPOINT,
    ORACLE,
    GenerationConfig,
    GenerationResult,
    LabelerConfig,
    MockProjector,
    generate_batch,
    lenient_parse,
    pseudo_label_batch,
)
from .codec import TaskKind, load_label_set
from .corpus import (
    ParallelExample,
    filter_test_labeled,
    load_massive,
    load_ner,
    pair_parallel,
    split_by_partition,
    split_dataset,
    write_examples,
    write_pairs,
    write_split_manifest,
)
from .metrics import RunReport, config_digest, evaluate_run
from .prompting import (
    RetrievalConfig,
    Variant,
    as_tags,
    build_icl_prompt,
    build_sft_record,
    language_name,
    load_embeddings,
    masquerade_target,
    retrieve_exemplars,
    sft_config,
    write_records,
)

logger = logging.getLogger(__name__)

STAGES = ("ingest", "pseudo-label", "align", "masquerade", "build-prompts", "generate", "score")


class Mode(str, enum.Enum):
    ICL = "ICL"
    SFT_EMIT = "SFT_EMIT"
    SCORE = "SCORE"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, manifest: "RunManifest"):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.manifest = manifest


@dataclass
class ExperimentConfig:
    source_corpus: str
    target_corpus: str
    out_dir: str
    task: TaskKind = TaskKind.SLOT_FILLING
    source_locale: str = "en-US"
    target_locale: str = "hi-IN"
    variant_tags: frozenset = frozenset({Variant.HANDHOLDING})
    mode: Mode = Mode.ICL
    corpus_format: Optional[str] = None
    alignments: Optional[str] = None
    ibm_iterations: int = 5
    symmetrize: bool = False
    embeddings: Optional[str] = None
    generations: Optional[str] = None
    mauve_pred_embeddings: Optional[str] = None
    mauve_ref_embeddings: Optional[str] = None
    oracle_source: bool = False
    generation: dict = field(default_factory=dict)
    retrieval_k: int = 8
    labeler_endpoint: str = ORACLE
    split_ratio: tuple = (8, 1, 1)
    seed: int = 0
    configuration: str = ""
    model: str = "Llama-2"
    allow_deviation: bool = False

    def __post_init__(self):
        self.task = TaskKind(self.task)
        self.mode = Mode(self.mode)
        self.variant_tags = as_tags(self.variant_tags)
        self.split_ratio = tuple(self.split_ratio)
        if self.corpus_format is None:
            self.corpus_format = "massive" if self.task is TaskKind.SLOT_FILLING else "conll"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text("utf-8"))
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, frozenset):
                v = sorted(t.value for t in v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @property
    def effective_tags(self) -> frozenset:
        """Variant tags after defaults: ICL handholding uses pseudo source labels unless oracle_source."""
        tags = set(self.variant_tags)
        if self.mode is Mode.ICL and Variant.HANDHOLDING in tags and not self.oracle_source:
            tags.add(Variant.PSEUDO_SOURCE)
        if self.oracle_source:
            tags.discard(Variant.PSEUDO_SOURCE)
        return frozenset(tags)

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig.for_task(self.task, **self.generation)

    def validate(self) -> None:
        for name in ("source_corpus", "target_corpus", "alignments", "embeddings", "generations",
                     "mauve_pred_embeddings", "mauve_ref_embeddings"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name}: {path} does not exist")
        tags = self.effective_tags
        if self.mode is Mode.SFT_EMIT and Variant.TRANSLITERATED in tags and not self.allow_deviation:
            raise ConfigError("transliterated SFT records are excluded by default; pass --allow-deviation")
        if self.mode is Mode.ICL and Variant.HANDHOLDING not in tags:
            raise ConfigError("ICL runs require the handholding variant")
        if Variant.PSEUDO_SOURCE in tags and self.labeler_endpoint == ORACLE:
            raise ConfigError("pseudo source labels need a labeler_endpoint (or set oracle_source)")
        if self.mode is Mode.SCORE and self.generations is None:
            raise ConfigError("SCORE mode needs a generations file")
        self.generation_config()


@dataclass
class RunManifest:
    config_digest: str
    started_at: str
    finished_at: str = ""
    status: str = "running"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    artifacts: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    tool_version: str = __version__
    task: str = ""
    language: str = ""
    configuration: str = ""
    model: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        data = json.loads(Path(path).read_text("utf-8"))
        return cls(**data)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def configuration_label(cfg: ExperimentConfig) -> str:
    if cfg.configuration:
        return cfg.configuration
    tags = cfg.variant_tags
    if Variant.HANDHOLDING not in tags:
        return "monolingual"
    label = "H"
    if Variant.REORDERED in tags:
        label += " + M (re-ordered)"
    if Variant.TRANSLITERATED in tags:
        label += " + M (transliterated)"
    return label


def _load_side(cfg: ExperimentConfig, path: str, locale: str, diagnostics: list):
    if cfg.corpus_format == "massive":
        return load_massive(path, locale, diagnostics=diagnostics, strict=False)
    if cfg.corpus_format == "conll":
        return load_ner(path, locale, warnings=diagnostics)
    raise ConfigError(f"unknown corpus_format {cfg.corpus_format!r}")


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_generations(path: str | Path, labels=None) -> list[GenerationResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            warnings: list[str] = []
            raw = rec.get("raw_text", rec.get("text", ""))
            failed = bool(rec.get("failed", False))
            parsed = None if failed else lenient_parse(raw, labels, warnings)
            out.append(GenerationResult(str(rec["id"]), raw, parsed, warnings, failed))
    return out


class Pipeline:
    """One experiment run; each stage method reads and extends ``self`` state."""

    def __init__(self, cfg: ExperimentConfig, client=None, labeler_client=None):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.client = client
        self.labeler_client = labeler_client
        self.tags = cfg.effective_tags
        self.labels = load_label_set(cfg.task)
        self.diagnostics: list[str] = []
        self.manifest = RunManifest(
            config_digest=config_digest({k: v for k, v in cfg.to_dict().items() if k != "out_dir"}),
            started_at=_now(),
            task=cfg.task.value,
            language=language_name(cfg.target_locale),
            configuration=configuration_label(cfg),
            model=cfg.model,
        )
        self.pairs: list[ParallelExample] = []
        self.train: list[ParallelExample] = []
        self.test: list[ParallelExample] = []
        self.validation: list[ParallelExample] = []
        self.alignments: dict[str, Alignment] = {}
        self.records = []
        self.results: list[GenerationResult] = []
        self.report: Optional[RunReport] = None

    def _artifact(self, stage: str, name: str) -> Path:
        path = self.out / name
        self.manifest.artifacts.setdefault(stage, []).append(name)
        return path

    # stages

    def ingest(self) -> None:
        cfg = self.cfg
        src = _load_side(cfg, cfg.source_corpus, cfg.source_locale, self.diagnostics)
        tgt = _load_side(cfg, cfg.target_corpus, cfg.target_locale, self.diagnostics)
        self.pairs = pair_parallel(src, tgt, self.diagnostics)
        if all(p.target.partition for p in self.pairs) and self.pairs:
            split = split_by_partition(self.pairs, key=lambda p: p.target.partition)
            split.seed = cfg.seed
        else:
            split = split_dataset(self.pairs, cfg.split_ratio, cfg.seed)
        self.train, self.validation = split.train, split.validation
        self.test = filter_test_labeled(split.test) if cfg.task is TaskKind.SLOT_FILLING else split.test
        write_examples(src, self._artifact("ingest", "examples.source.jsonl"))
        write_examples(tgt, self._artifact("ingest", "examples.target.jsonl"))
        write_pairs(self.pairs, self._artifact("ingest", "pairs.jsonl"))
        write_split_manifest(split, self._artifact("ingest", "split.jsonl"))
        self.manifest.counts.update(
            pairs=len(self.pairs), train=len(self.train), validation=len(self.validation),
            test=len(self.test), test_unfiltered=len(split.test),
        )

    def _in_use(self) -> list[ParallelExample]:
        if self.cfg.mode is Mode.SFT_EMIT:
            return self.train + self.validation + self.test
        pool = self.train if self.cfg.embeddings else []
        return pool + self.test

    def pseudo_label(self) -> None:
        if Variant.PSEUDO_SOURCE not in self.tags:
            return
        labeler = LabelerConfig(self.cfg.labeler_endpoint, self.cfg.task)
        wanted = self._in_use()
        got = pseudo_label_batch([p.source for p in wanted], labeler, self.labeler_client, self.diagnostics)

        def relabel(split):
            return [replace(p, source=p.source.with_gold(got[p.id])) for p in split if p.id in got]

        self.train, self.validation, self.test = relabel(self.train), relabel(self.validation), relabel(self.test)
        _write_jsonl(
            self._artifact("pseudo-label", "source_labels.jsonl"),
            [{"id": i, "tokens": list(lab.tokens), "labels": list(lab.labels)} for i, lab in got.items()],
        )
        self.manifest.counts["pseudo_labeled"] = len(got)
        self.manifest.counts["pseudo_dropped"] = len(wanted) - len(got)

    def align(self) -> None:
        cfg = self.cfg
        mock = cfg.mode is Mode.ICL and cfg.generation_config().endpoint == MOCK_ENDPOINT
        needed = Variant.REORDERED in self.tags or mock
        if not needed and cfg.alignments is None:
            return
        if cfg.alignments is not None:
            ids_path = Path(str(cfg.alignments) + ".ids")
            if ids_path.exists():
                ids = ids_path.read_text("utf-8").split()
            else:
                ids = [p.id for p in self.pairs]
            by_id = {p.id: p for p in self.pairs}
            lines = Path(cfg.alignments).read_text("utf-8").splitlines()
            if len(lines) != len(ids):
                raise ValueError(f"{cfg.alignments}: {len(lines)} lines for {len(ids)} ids")
            for i, line in zip(ids, lines):
                if i in by_id:  # pairs dropped at ingest keep their line but are skipped
                    p = by_id[i]
                    self.alignments[i] = Alignment.from_pharaoh(line, len(p.source.tokens), len(p.target.tokens))
        else:
            corpus = [(p.source.tokens, p.target.tokens) for p in self.pairs]
            table = train_ibm1(corpus, cfg.ibm_iterations, use_null=True)
            reverse = None
            if cfg.symmetrize:
                reverse = train_ibm1([(t, s) for s, t in corpus], cfg.ibm_iterations, use_null=True)
            table.save_tsv(self._artifact("align", "ibm1_table.tsv"))
            for p in self.pairs:
                self.alignments[p.id] = extract_alignment(
                    p.source.tokens, p.target.tokens, table, cfg.symmetrize, reverse
                )
        ordered = [p for p in self.pairs if p.id in self.alignments]
        write_pharaoh([self.alignments[p.id] for p in ordered], self._artifact("align", "alignments.pharaoh"))
        self._artifact("align", "alignments.pharaoh.ids").write_text(
            "".join(p.id + "\n" for p in ordered), "utf-8"
        )
        self.manifest.counts["aligned"] = len(self.alignments)

    def masquerade(self) -> None:
        if not self.tags & {Variant.REORDERED, Variant.TRANSLITERATED}:
            return
        rows = []
        for p in self._in_use():
            rows.append({"id": p.id, "target": masquerade_target(p, self.tags, self.alignments.get(p.id))})
        _write_jsonl(self._artifact("masquerade", "masquerade.jsonl"), rows)

    def build_prompts(self) -> None:
        cfg = self.cfg
        if cfg.mode is Mode.SFT_EMIT:
            for name, split in (("train", self.train), ("validation", self.validation), ("test", self.test)):
                recs = [build_sft_record(p, self.tags, self.alignments.get(p.id), cfg.task) for p in split]
                write_records(recs, self._artifact("build-prompts", f"sft_{name}.jsonl"), sft=True)
                if name == "test":
                    self.records = recs
            sidecar = {"task": cfg.task.value, "hyperparameters": sft_config(cfg.task)}
            self._artifact("build-prompts", "sft_config.json").write_text(
                json.dumps(sidecar, indent=2, sort_keys=True) + "\n", "utf-8"
            )
            return
        if cfg.mode is Mode.SCORE:
            return
        retrieval = None
        if cfg.embeddings:
            retrieval = RetrievalConfig(load_embeddings(cfg.embeddings), cfg.retrieval_k)
        train_by_id = {p.id: p for p in self.train}
        test_ids = {p.id for p in self.test}
        pool = [i for i in train_by_id if i not in test_ids]
        records = []
        for q in self.test:
            demo_ids = retrieve_exemplars(q.id, pool, retrieval) if retrieval else []
            demos = [train_by_id[i] for i in demo_ids]
            records.append(build_icl_prompt(q, demos, self.tags, alignments=self.alignments,
                                            task=cfg.task, k=cfg.retrieval_k))
        self.records = records
        write_records(records, self._artifact("build-prompts", "prompts.jsonl"))

    def generate(self) -> None:
        cfg = self.cfg
        if cfg.mode is Mode.SFT_EMIT:
            return
        if cfg.mode is Mode.SCORE:
            self.results = read_generations(cfg.generations, self.labels)
        else:
            gen = cfg.generation_config()
            mock = None
            if gen.endpoint == MOCK_ENDPOINT:
                mock = MockProjector({p.id: p for p in self.test}, self.alignments)
            self.results = generate_batch(self.records, gen, self.labels, mock=mock, client=self.client)
        _write_jsonl(self._artifact("generate", "generations.jsonl"), [r.to_json() for r in self.results])
        self.manifest.counts["generation_failures"] = sum(r.failed for r in self.results)

    def score(self) -> None:
        cfg = self.cfg
        if cfg.mode is Mode.SFT_EMIT:
            return
        refs = {p.id: p.target.gold for p in self.test}
        pred_emb = load_embeddings(cfg.mauve_pred_embeddings) if cfg.mauve_pred_embeddings else None
        ref_emb = load_embeddings(cfg.mauve_ref_embeddings) if cfg.mauve_ref_embeddings else None
        self.report = evaluate_run(self.results, refs, pred_emb, ref_emb, seed=cfg.seed,
                                   digest=self.manifest.config_digest)
        self.report.write(self._artifact("score", "report.jsonl"))
        self.manifest.counts["parse_failures"] = self.report.n_parse_failures

    def run(self, stop_after: Optional[str] = None) -> RunManifest:
        self.out.mkdir(parents=True, exist_ok=True)
        steps = [
            ("ingest", self.ingest),
            ("pseudo-label", self.pseudo_label),
            ("align", self.align),
            ("masquerade", self.masquerade),
            ("build-prompts", self.build_prompts),
            ("generate", self.generate),
            ("score", self.score),
        ]
        for name, step in steps:
            try:
                step()
            except Exception as exc:
                self.manifest.status = "failed"
                self.manifest.failed_stage = name
                self.manifest.error = f"{type(exc).__name__}: {exc}"
                self._finish()
                raise StageError(name, exc, self.manifest) from exc
            if name == stop_after:
                break
        if self.diagnostics:
            _write_jsonl(self._artifact("diagnostics", "diagnostics.jsonl"), [{"message": m} for m in self.diagnostics])
        self.manifest.status = "ok"
        self._finish()
        return self.manifest

    def _finish(self) -> None:
        self.manifest.finished_at = _now()
        self.manifest.write(self.out)


def run(cfg: ExperimentConfig, stop_after: Optional[str] = None, client=None, labeler_client=None) -> RunManifest:
    """Validate the config and execute stages in order, up to ``stop_after``."""
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"unknown stage {stop_after!r}")
    cfg.validate()
    return Pipeline(cfg, client, labeler_client).run(stop_after)


# report

METRIC_COLUMNS = ("F1", "EM", "chrF++", "MAUVE")


class UnreadableReport(RuntimeError):
    pass


def _fmt(value, digits: int) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def report_rows(manifest_paths: Sequence[str | Path]) -> list[dict]:
    rows = []
    for mpath in manifest_paths:
        mpath = Path(mpath)
        try:
            man = RunManifest.read(mpath)
            summary = None
            if "score" in man.artifacts:
                summary = RunReport.read_summary(mpath.parent / man.artifacts["score"][0])
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise UnreadableReport(f"{mpath}: {exc}") from exc
        summary = summary or {}
        rows.append({
            "task": man.task,
            "language": man.language,
            "configuration": f"{man.model} {man.configuration}".strip(),
            "F1": summary.get("micro_f1"),
            "EM": summary.get("em_rate"),
            "chrF++": summary.get("chrf_mean"),
            "MAUVE": summary.get("mauve"),
        })
    rows.sort(key=lambda r: (r["task"], r["language"], r["configuration"]))
    return rows


def render_table(rows: Sequence[dict]) -> str:
    header = ["Task", "Language", "Configuration", *METRIC_COLUMNS]
    body = [
        [r["task"], r["language"], r["configuration"],
         _fmt(r["F1"], 4), _fmt(r["EM"], 4), _fmt(r["chrF++"], 2), _fmt(r["MAUVE"], 4)]
        for r in rows
    ]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip() for line in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report(manifest_paths: Sequence[str | Path], out_dir: Optional[str | Path] = None) -> str:
    rows = report_rows(manifest_paths)
    table = render_table(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table, "utf-8")
        _write_jsonl(out / "report.jsonl", rows)
    return table
