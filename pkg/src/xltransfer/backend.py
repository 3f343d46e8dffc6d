"""Generation against a completion endpoint, and pseudo labels from a token classifier.

The endpoint value ``mock:project`` selects a deterministic stand-in that
projects source labels through a word alignment instead of calling a model.
"""
from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import httpx

from .align import Alignment, project_labels
from .codec import ABSENT, AnnotationError, LabeledSentence, LabelSet, TaskKind, parse_annotated, render_annotated
from .corpus import Example, ParallelExample
from .prompting import PromptRecord

logger = logging.getLogger(__name__)

MOCK_ENDPOINT = "mock:project"
ORACLE = "oracle"

MAX_NEW_TOKENS = {TaskKind.SLOT_FILLING: 512, TaskKind.NER: 768}


class BackendError(RuntimeError):
    pass


class EndpointError(BackendError):
    """Endpoint kept failing after all retries; carries the results gathered so far."""

    def __init__(self, message: str, partial: Optional[list] = None):
        super().__init__(message)
        self.partial = partial or []


class LengthMismatch(BackendError):
    pass


@dataclass
class GenerationConfig:
    endpoint: str = MOCK_ENDPOINT
    penalty_alpha: float = 0.6
    top_k: int = 4
    max_new_tokens: int = 512
    timeout: float = 60.0
    max_retries: int = 2
    max_in_flight: int = 4
    model: Optional[str] = None
    api_key: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.penalty_alpha <= 1.0:
            raise ValueError("penalty_alpha must lie in [0, 1]")
        for name in ("top_k", "max_new_tokens", "max_in_flight"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.timeout <= 0 or self.max_retries < 0:
            raise ValueError("timeout must be positive and max_retries non-negative")

    @classmethod
    def for_task(cls, task: TaskKind | str, **overrides) -> "GenerationConfig":
        overrides.setdefault("max_new_tokens", MAX_NEW_TOKENS[TaskKind(task)])
        return cls(**overrides)

    def request_body(self, prompt: str) -> dict:
        body = {
            "prompt": prompt,
            "max_new_tokens": self.max_new_tokens,
            "penalty_alpha": self.penalty_alpha,
            "top_k": self.top_k,
        }
        if self.model:
            body["model"] = self.model
        return body


@dataclass
class GenerationResult:
    id: str
    raw_text: str
    parsed: Optional[LabeledSentence] = None
    warnings: list[str] = field(default_factory=list)
    failed: bool = False

    def to_json(self) -> dict:
        return {"id": self.id, "raw_text": self.raw_text, "failed": self.failed, "warnings": self.warnings}


def lenient_parse(text: str, labels: Optional[LabelSet], warnings: list[str]) -> Optional[LabeledSentence]:
    try:
        return parse_annotated(text, labels, strict=False, warnings=warnings)
    except AnnotationError as exc:
        warnings.append(f"unparsable output: {exc}")
        return None


def mock_transfer(pair: ParallelExample, alignment: Alignment) -> str:
    if pair.source.gold is None:
        raise ValueError(f"pair {pair.id}: mock transfer needs source labels")
    return render_annotated(project_labels(pair.source.gold, pair.target.tokens, alignment))


class MockProjector:
    """Completion stand-in keyed by record id."""

    def __init__(self, pairs: Mapping[str, ParallelExample], alignments: Mapping[str, Alignment]):
        self.pairs = pairs
        self.alignments = alignments

    def __call__(self, record: PromptRecord) -> str:
        return mock_transfer(self.pairs[record.id], self.alignments[record.id])


class AttemptCounter:
    """Thread-safe count of HTTP attempts across a batch."""

    def __init__(self):
        self.count = 0
        self._lock = threading.Lock()

    def bump(self):
        with self._lock:
            self.count += 1


def _completion_text(payload: dict) -> str:
    choices = payload.get("choices")
    if isinstance(choices, list) and choices:
        first = choices[0]
        if isinstance(first, dict):
            if "text" in first:
                return str(first["text"])
            msg = first.get("message")
            if isinstance(msg, dict) and "content" in msg:
                return str(msg["content"])
    if "text" in payload:
        return str(payload["text"])
    raise EndpointError(f"response has no generated text: {sorted(payload)}")


def _headers(api_key: Optional[str]) -> dict:
    return {"Authorization": f"Bearer {api_key}"} if api_key else {}


def generate_batch(
    records: Sequence[PromptRecord],
    cfg: GenerationConfig,
    labels: Optional[LabelSet] = None,
    mock: Optional[Callable[[PromptRecord], str]] = None,
    client: Optional[httpx.Client] = None,
    attempts: Optional[AttemptCounter] = None,
) -> list[GenerationResult]:
    """One result per record, in input order.

    Up to ``cfg.max_in_flight`` requests run at once. A request that times
    out on every attempt yields a failed result; any other persistent
    failure raises EndpointError with the finished results attached.
    """
    if cfg.endpoint == MOCK_ENDPOINT:
        if mock is None:
            raise BackendError("mock endpoint selected but no mock projector supplied")
        results = []
        for rec in records:
            warnings: list[str] = []
            raw = mock(rec)
            results.append(GenerationResult(rec.id, raw, lenient_parse(raw, labels, warnings), warnings))
        return results

    attempts = attempts or AttemptCounter()
    own_client = client is None
    if own_client:
        client = httpx.Client(timeout=cfg.timeout)
    results: list[Optional[GenerationResult]] = [None] * len(records)

    def one(idx: int) -> None:
        rec = records[idx]
        last_exc: Optional[Exception] = None
        for _ in range(cfg.max_retries + 1):
            attempts.bump()
            try:
                resp = client.post(
                    cfg.endpoint,
                    json=cfg.request_body(rec.prompt_text),
                    headers=_headers(cfg.api_key),
                    timeout=cfg.timeout,
                )
                resp.raise_for_status()
                raw = _completion_text(resp.json())
            except httpx.TimeoutException as exc:
                last_exc = exc
                continue
            except (httpx.HTTPError, ValueError, EndpointError) as exc:
                last_exc = exc
                logger.warning("record %s: attempt failed: %s", rec.id, exc)
                continue
            warnings: list[str] = []
            results[idx] = GenerationResult(rec.id, raw, lenient_parse(raw, labels, warnings), warnings)
            return
        if isinstance(last_exc, httpx.TimeoutException):
            results[idx] = GenerationResult(rec.id, "", None, [f"timed out after {cfg.max_retries + 1} attempts"], failed=True)
            return
        raise EndpointError(f"record {rec.id}: {last_exc}")

    try:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            futures = [pool.submit(one, i) for i in range(len(records))]
            errors = [f.exception() for f in futures]
    finally:
        if own_client:
            client.close()
    for err in errors:
        if err is not None:
            raise EndpointError(str(err), [r for r in results if r is not None]) from err
    return results  # type: ignore[return-value]


@dataclass
class LabelerConfig:
    endpoint: str = ORACLE
    task_kind: TaskKind = TaskKind.SLOT_FILLING
    timeout: float = 30.0
    api_key: Optional[str] = None


def _collapse_bio(tag) -> Optional[str]:
    if tag is None or tag == "O" or tag == "":
        return ABSENT
    tag = str(tag)
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BIES":
        return tag[2:]
    return tag


def pseudo_label_batch(
    sentences: Sequence[Example],
    cfg: LabelerConfig,
    client: Optional[httpx.Client] = None,
    diagnostics: Optional[list[str]] = None,
) -> dict[str, LabeledSentence]:
    """Labels for each sentence, keyed by example id.

    Oracle mode returns the gold labels. Otherwise each token list is
    posted as ``{"tokens": [...]}`` and the reply's ``labels`` list must be
    token-aligned; examples with a wrong label count are dropped and
    reported in ``diagnostics``.
    """
    if diagnostics is None:
        diagnostics = []
    out: dict[str, LabeledSentence] = {}
    if cfg.endpoint == ORACLE:
        for ex in sentences:
            if ex.gold is None:
                raise ValueError(f"oracle labels requested but example {ex.id} has no gold")
            out[ex.id] = ex.gold
        return out
    own_client = client is None
    if own_client:
        client = httpx.Client(timeout=cfg.timeout)
    try:
        for ex in sentences:
            try:
                resp = client.post(cfg.endpoint, json={"tokens": list(ex.tokens)}, headers=_headers(cfg.api_key))
                resp.raise_for_status()
                tags = resp.json()["labels"]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise EndpointError(f"labeler failed on {ex.id}: {exc}") from exc
            if len(tags) != len(ex.tokens):
                msg = f"LengthMismatch: {ex.id} has {len(ex.tokens)} tokens, classifier returned {len(tags)} labels"
                logger.warning(msg)
                diagnostics.append(msg)
                continue
            out[ex.id] = LabeledSentence(ex.tokens, tuple(_collapse_bio(t) for t in tags))
    finally:
        if own_client:
            client.close()
    return out
