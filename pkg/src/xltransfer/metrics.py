"""Scoring of generated annotated text: micro-F1, exact match, chrF++ and MAUVE.

Micro-F1 is token level. Predicted and reference tokens are paired by a
longest common subsequence over the token strings, so a model that drops
or inserts a word only loses the labels it touched. Among LCS pairings of
equal length the one with the most label agreements is used.
"""
from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .codec import LabeledSentence, render_annotated


class DimensionMismatch(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class IdMismatch(ValueError):
    pass


def _lcs_pairs(a: Sequence[str], b: Sequence[str], agree) -> list[tuple[int, int]]:
    n, m = len(a), len(b)
    # score[i][j] = best (matches, agreements) for a[i:], b[j:]
    score = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = score[i], score[i + 1]
        for j in range(m - 1, -1, -1):
            best = max(nxt[j], row[j + 1])
            if a[i] == b[j]:
                diag = nxt[j + 1]
                cand = (diag[0] + 1, diag[1] + agree(i, j))
                if cand > best:
                    best = cand
            row[j] = best
    pairs = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            diag = score[i + 1][j + 1]
            if (diag[0] + 1, diag[1] + agree(i, j)) == score[i][j]:
                pairs.append((i, j))
                i += 1
                j += 1
                continue
        if score[i + 1][j] == score[i][j]:
            i += 1
        else:
            j += 1
    return pairs


def micro_f1(pred: LabeledSentence, ref: LabeledSentence) -> tuple[int, int, int]:
    """(tp, fp, fn) for one sentence."""
    def agree(i, j):
        return int(pred.labels[i] is not None and pred.labels[i] == ref.labels[j])

    tp = sum(agree(i, j) for i, j in _lcs_pairs(pred.tokens, ref.tokens, agree))
    return tp, pred.n_labeled - tp, ref.n_labeled - tp


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def exact_match(pred_text: str, ref_text: str) -> int:
    return int(_normalize_ws(pred_text) == _normalize_ws(ref_text))


def _char_ngrams(text: str, n: int) -> Counter:
    s = "".join(text.split())
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def _word_ngrams(text: str, n: int) -> Counter:
    w = text.split()
    return Counter(tuple(w[i : i + n]) for i in range(len(w) - n + 1))


def chrf_pp(pred_text: str, ref_text: str, char_order: int = 6, word_order: int = 2, beta: float = 2.0) -> float:
    """Sentence chrF++ in [0, 100]: mean of per-order F-beta over character and word n-grams.

    Orders with no n-grams on either side are left out of the mean.
    """
    if not pred_text.strip() and not ref_text.strip():
        return 100.0
    if not pred_text.strip() or not ref_text.strip():
        return 0.0
    stats = [(_char_ngrams(pred_text, n), _char_ngrams(ref_text, n)) for n in range(1, char_order + 1)]
    stats += [(_word_ngrams(pred_text, n), _word_ngrams(ref_text, n)) for n in range(1, word_order + 1)]
    b2 = beta * beta
    scores = []
    for hyp, ref in stats:
        h_total, r_total = sum(hyp.values()), sum(ref.values())
        if h_total == 0 and r_total == 0:
            continue
        match = sum((hyp & ref).values())
        if match == 0:
            scores.append(0.0)
            continue
        p, r = match / h_total, match / r_total
        scores.append((1 + b2) * p * r / (b2 * p + r))
    return 100.0 * sum(scores) / len(scores) if scores else 100.0


def _kmeans_labels(data: np.ndarray, n_clusters: int, seed: int) -> np.ndarray:
    from sklearn.cluster import KMeans

    km = KMeans(n_clusters=n_clusters, n_init=5, max_iter=500, random_state=seed)
    return km.fit_predict(data)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _area(x: np.ndarray, y: np.ndarray) -> float:
    # frontier is non-increasing: on equal x, higher y comes first
    order = np.lexsort((-y, x))
    xs, ys = x[order], y[order]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))


def default_clusters(n_p: int, n_q: int) -> int:
    return max(2, (n_p + n_q) // 20)


def mauve_score(
    pred_embeddings,
    ref_embeddings,
    n_clusters: Optional[int] = None,
    c: float = 5.0,
    n_lambda: int = 25,
    seed: int = 0,
) -> float:
    """Area under the divergence frontier between two embedding clouds.

    Both sets are quantized by one joint k-means; add-one smoothed cluster
    histograms P and Q are mixed as R = lam*P + (1-lam)*Q on an interior
    grid of ``n_lambda`` weights, giving frontier points
    (exp(-c KL(Q||R)), exp(-c KL(P||R))) closed off by (0, 1) and (1, 0).
    The score averages the area integrated along each axis.
    """
    p_emb = np.atleast_2d(np.asarray(pred_embeddings, dtype=float))
    q_emb = np.atleast_2d(np.asarray(ref_embeddings, dtype=float))
    if p_emb.size == 0 or q_emb.size == 0:
        raise TooFewPoints("both embedding sets must be non-empty")
    if p_emb.shape[1] != q_emb.shape[1]:
        raise DimensionMismatch(f"{p_emb.shape[1]} vs {q_emb.shape[1]}")
    if n_clusters is None:
        n_clusters = default_clusters(len(p_emb), len(q_emb))
    total = len(p_emb) + len(q_emb)
    if n_clusters > total:
        raise TooFewPoints(f"{n_clusters} clusters for {total} points")
    labels = _kmeans_labels(np.vstack([p_emb, q_emb]), n_clusters, seed)
    p_hist = np.bincount(labels[: len(p_emb)], minlength=n_clusters) + 1.0
    q_hist = np.bincount(labels[len(p_emb) :], minlength=n_clusters) + 1.0
    p_hist /= p_hist.sum()
    q_hist /= q_hist.sum()

    pts = [(0.0, 1.0)]
    for lam in np.arange(1, n_lambda + 1) / (n_lambda + 1):
        mix = lam * p_hist + (1 - lam) * q_hist
        pts.append((np.exp(-c * _kl(q_hist, mix)), np.exp(-c * _kl(p_hist, mix))))
    pts.append((1.0, 0.0))
    x, y = np.array(pts).T
    return 0.5 * (_area(x, y) + _area(y, x))


@dataclass
class PairScore:
    id: str
    f1_counts: tuple[int, int, int]
    em: int
    chrf: float
    parse_failed: bool = False

    def to_json(self) -> dict:
        return {"id": self.id, "tp": self.f1_counts[0], "fp": self.f1_counts[1], "fn": self.f1_counts[2],
                "em": self.em, "chrf": self.chrf, "parse_failed": self.parse_failed}


@dataclass
class RunReport:
    micro_f1: float
    em_rate: float
    chrf_mean: float
    n_examples: int
    n_parse_failures: int
    mauve: Optional[float] = None
    config_digest: str = ""
    scores: list[PairScore] = field(default_factory=list)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("scores")
        return out

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.scores:
                fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")
            fh.write(json.dumps({"summary": self.summary()}, ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def read_summary(cls, path: str | Path) -> dict:
        last = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    last = json.loads(line)
        if not last or "summary" not in last:
            raise ValueError(f"{path} has no summary record")
        return last["summary"]


def config_digest(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def evaluate_run(
    results: Sequence,
    refs: Mapping[str, LabeledSentence],
    pred_embeddings: Optional[Mapping[str, Sequence[float]]] = None,
    ref_embeddings: Optional[Mapping[str, Sequence[float]]] = None,
    mauve_sample: int = 500,
    seed: int = 0,
    digest: str = "",
) -> RunReport:
    """Corpus scores for GenerationResults against reference target labels.

    Unparsable generations count as empty predictions (all false negatives).
    MAUVE runs on a seeded sample of ``min(mauve_sample, n)`` ids when both
    embedding maps are supplied.
    """
    ids = [r.id for r in results]
    if set(ids) != set(refs) or len(ids) != len(set(ids)):
        raise IdMismatch(f"{len(set(ids) ^ set(refs))} ids differ between results and references")
    empty = LabeledSentence((), ())
    scores = []
    for res in results:
        ref = refs[res.id]
        pred = res.parsed if res.parsed is not None else empty
        ref_text = render_annotated(ref)
        scores.append(
            PairScore(res.id, micro_f1(pred, ref), exact_match(res.raw_text, ref_text),
                      chrf_pp(res.raw_text, ref_text), res.parsed is None)
        )
    tp, fp, fn = (sum(s.f1_counts[k] for s in scores) for k in range(3))
    n = len(scores)
    mauve = None
    if pred_embeddings is not None and ref_embeddings is not None and n:
        sample = sorted(ids)
        if n > mauve_sample:
            sample = sorted(random.Random(seed).sample(sample, mauve_sample))
        mauve = mauve_score([pred_embeddings[i] for i in sample], [ref_embeddings[i] for i in sample], seed=seed)
    return RunReport(
        micro_f1=f1_from_counts(tp, fp, fn),
        em_rate=sum(s.em for s in scores) / n if n else 0.0,
        chrf_mean=sum(s.chrf for s in scores) / n if n else 0.0,
        n_examples=n,
        n_parse_failures=sum(s.parse_failed for s in scores),
        mauve=mauve,
        config_digest=digest,
        scores=scores,
    )
