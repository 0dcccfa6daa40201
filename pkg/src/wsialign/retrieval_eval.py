"""Embedding index, text-match oracle, and ranking metrics.

Relevance for cross-modal retrieval is the known ground-truth pair plus
every corpus text the oracle scores above 0.985 against the ground truth.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimMismatch, DuplicateId, MissingGroundTruth, NoEvaluableQueries

MATCH_THRESHOLD = 0.985
ORACLE_VERSION = "char3-5-tfidf-v1"

_PUNCT = re.compile(r"[^\w\s]")
_WS = re.compile(r"\s+")


class MatchOracle:
    """Cosine similarity of character 3-5-gram TF-IDF vectors.

    Text is lowercased and punctuation becomes whitespace before n-gramming,
    so formatting-only variants ("low-grade" vs "low grade") score 1.0.
    ``fit`` sets smoothed IDF weights from a reference corpus; unfitted, all
    n-grams weigh 1.
    """

    version = ORACLE_VERSION

    def __init__(self, threshold: float = MATCH_THRESHOLD, ngram_range=(3, 5)):
        self.threshold = threshold
        self.ngram_range = ngram_range
        self.idf: dict[str, float] = {}
        self.default_idf = 1.0
        self._cache: dict[str, tuple[dict[str, float], float]] = {}

    @staticmethod
    def normalize(text: str) -> str:
        return " " + _WS.sub(" ", _PUNCT.sub(" ", text.lower())).strip() + " "

    def ngrams(self, text: str) -> Counter:
        t = self.normalize(text)
        lo, hi = self.ngram_range
        return Counter(t[i: i + n] for n in range(lo, hi + 1) for i in range(len(t) - n + 1))

    def fit(self, corpus: Iterable[str]) -> "MatchOracle":
        docs = list(dict.fromkeys(corpus))
        df: Counter = Counter()
        for doc in docs:
            df.update(set(self.ngrams(doc)))
        n = len(docs)
        self.idf = {g: math.log((1 + n) / (1 + c)) + 1.0 for g, c in df.items()}
        self.default_idf = math.log(1 + n) + 1.0
        self._cache.clear()
        return self

    def vector(self, text: str) -> tuple[dict[str, float], float]:
        hit = self._cache.get(text)
        if hit is None:
            vec = {g: (1.0 + math.log(c)) * self.idf.get(g, self.default_idf) for g, c in self.ngrams(text).items()}
            hit = (vec, math.sqrt(sum(v * v for v in vec.values())))
            self._cache[text] = hit
        return hit

    def similarity(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        va, na = self.vector(a)
        vb, nb = self.vector(b)
        if na == 0.0 or nb == 0.0:
            return 1.0 if self.normalize(a) == self.normalize(b) else 0.0
        if len(vb) < len(va):
            va, vb = vb, va
        # sort keys so the float sum is order-independent (exact symmetry)
        dot = math.fsum(va[g] * vb[g] for g in sorted(va) if g in vb)
        return min(1.0, dot / (na * nb))

    def similarity_matrix(self, texts_a: Sequence[str], texts_b: Sequence[str] | None = None) -> np.ndarray:
        texts_b = texts_a if texts_b is None else texts_b
        out = np.empty((len(texts_a), len(texts_b)))
        for i, a in enumerate(texts_a):
            for j, b in enumerate(texts_b):
                out[i, j] = self.similarity(a, b)
        return out

    def matches(self, a: str, b: str) -> bool:
        return self.similarity(a, b) > self.threshold


# --------------------------------------------------------------------- index


@dataclass
class RetrievalIndex:
    ids: list[str]
    matrix: np.ndarray  # (n, d) or (n, q, d) unit rows
    modality: str = "text"
    _pos: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.ids)


def _unit(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero embedding")
    return x / norms


def build_index(items: Sequence[tuple[str, np.ndarray]], modality: str = "text") -> RetrievalIndex:
    """Normalized copy of the embeddings; multi-query image rows stay ``(q, d)``."""
    ids = [str(i) for i, _ in items]
    if len(set(ids)) != len(ids):
        dup = next(i for i, c in Counter(ids).items() if c > 1)
        raise DuplicateId(dup)
    if not items:
        return RetrievalIndex([], np.zeros((0, 0)), modality)
    shapes = {np.shape(e) for _, e in items}
    if len(shapes) != 1:
        raise DimMismatch(f"embedding shapes differ: {sorted(shapes)}")
    matrix = _unit(np.stack([np.asarray(e, dtype=np.float64) for _, e in items]))
    return RetrievalIndex(ids, matrix, modality, {k: n for n, k in enumerate(ids)})


def similarities(index: RetrievalIndex, query: np.ndarray) -> np.ndarray:
    """Cosine similarity; multi-query embeddings on either side take the max over query rows."""
    q = _unit(np.asarray(query, dtype=np.float64))
    m = index.matrix
    if m.ndim == 2 and q.ndim == 1:
        return m @ q
    if m.ndim == 3 and q.ndim == 1:
        return (m @ q).max(axis=1)
    if m.ndim == 2 and q.ndim == 2:
        return (q @ m.T).max(axis=0)
    if m.ndim == 3 and q.ndim == 2:
        return np.einsum("nqd,pd->npq", m, q).max(axis=(1, 2))
    raise DimMismatch(f"unsupported shapes index {m.shape}, query {q.shape}")


def rank(ids: Sequence[str], sims: np.ndarray) -> list[int]:
    """Positions sorted by descending similarity, ties by id ascending."""
    return sorted(range(len(ids)), key=lambda i: (-float(sims[i]), ids[i]))


def query(index: RetrievalIndex, query_embedding: np.ndarray, k: int) -> list[tuple[str, float]]:
    if k > len(index):
        raise ValueError(f"k={k} exceeds index size {len(index)}")
    sims = similarities(index, query_embedding)
    order = rank(index.ids, sims)[:k]
    return [(index.ids[i], float(sims[i])) for i in order]


# ------------------------------------------------------------------ matching


def match_sets(
    queries: Sequence[str],
    corpus: Sequence[str],
    oracle: MatchOracle,
    ground_truth: Sequence[int],
) -> np.ndarray:
    """Boolean relevance ``(n_queries, n_corpus)``.

    ``ground_truth[q]`` is the corpus position of query ``q``'s known pair;
    that entry is relevant whatever the oracle says. Other entries are
    relevant when the oracle scores them above threshold against the query
    text.
    """
    if len(ground_truth) != len(queries):
        raise MissingGroundTruth("one ground-truth corpus position per query required")
    rel = np.zeros((len(queries), len(corpus)), bool)
    for qi, text in enumerate(queries):
        gt = ground_truth[qi]
        if gt is None or not 0 <= gt < len(corpus):
            raise MissingGroundTruth(f"query {qi} has no ground-truth entry")
        rel[qi, gt] = True
        for ci, c in enumerate(corpus):
            if ci != gt and oracle.similarity(text, c) > oracle.threshold:
                rel[qi, ci] = True
    return rel


# ------------------------------------------------------------------- metrics


def average_precision(ranked_rel: Sequence[bool]) -> float:
    rel = np.asarray(ranked_rel, dtype=bool)
    n_rel = rel.sum()
    if n_rel == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float((hits[rel] / ranks[rel]).sum() / n_rel)


def ndcg(ranked_rel: Sequence[bool]) -> float:
    """Binary gains, ``1/log2(rank + 1)`` discount, over the full ranking."""
    rel = np.asarray(ranked_rel, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return 0.0
    disc = 1.0 / np.log2(np.arange(2, len(rel) + 2))
    return float(disc[rel].sum() / disc[:n_rel].sum())


def top_k_hit(ranked_rel: Sequence[bool], k: int) -> float:
    return float(np.any(np.asarray(ranked_rel, dtype=bool)[:k]))


@dataclass
class RetrievalReport:
    map_score: float
    ndcg: float
    top_k: dict[int, float]
    n_queries: int
    n_corpus: int
    per_query: list[dict] = field(default_factory=list)
    dataset: str = ""
    direction: str = ""

    def _top(self, k: int) -> float | None:
        # None when the corpus is smaller than k
        return round(self.top_k[k], 6) if k in self.top_k else None

    def row(self) -> dict:
        return {
            "dataset": self.dataset,
            "direction": self.direction,
            "MAP": round(self.map_score, 6),
            "NDCG": round(self.ndcg, 6),
            "top1": self._top(1),
            "top5": self._top(5),
            "top10": self._top(10),
            "n_queries": self.n_queries,
            "n_corpus": self.n_corpus,
        }


def evaluate_rankings(ranked: Sequence[Sequence[bool]], ks=(1, 5, 10), n_corpus: int | None = None) -> RetrievalReport:
    """Aggregate metrics over already-ranked binary relevance lists.

    Queries with no relevant item are skipped.
    """
    rows = [np.asarray(r, dtype=bool) for r in ranked]
    kept = [r for r in rows if r.any()]
    if not kept:
        raise NoEvaluableQueries("no query has a relevant item")
    aps = [average_precision(r) for r in kept]
    nd = [ndcg(r) for r in kept]
    tops = {k: float(np.mean([top_k_hit(r, k) for r in kept])) for k in ks}
    per_query = [{"ap": a, "ndcg": n} for a, n in zip(aps, nd)]
    n_corpus = n_corpus if n_corpus is not None else (len(rows[0]) if rows else 0)
    return RetrievalReport(float(np.mean(aps)), float(np.mean(nd)), tops, len(kept), n_corpus, per_query)


def evaluate(
    index: RetrievalIndex,
    query_embeddings: Sequence[np.ndarray],
    relevance: np.ndarray,
    exclude: Sequence[int | None] | None = None,
    ks=(1, 5, 10),
) -> RetrievalReport:
    """Rank the index for every query and score it against ``relevance``.

    ``exclude[q]`` names a corpus position dropped from query ``q``'s
    ranking and relevance (the query image itself in image-to-image
    retrieval). Queries left with no relevant item are excluded.
    """
    relevance = np.asarray(relevance, dtype=bool)
    if relevance.shape != (len(query_embeddings), len(index)):
        raise DimMismatch(f"relevance {relevance.shape} vs ({len(query_embeddings)}, {len(index)})")
    ranked = []
    for qi, q in enumerate(query_embeddings):
        order = rank(index.ids, similarities(index, q))
        if exclude is not None and exclude[qi] is not None:
            order = [i for i in order if i != exclude[qi]]
        ranked.append(relevance[qi, order])
    return evaluate_rankings(ranked, ks, n_corpus=len(index))


def dedupe_texts(texts: Sequence[str]) -> tuple[list[str], list[int]]:
    """Unique texts in first-seen order and, per input, its position in that list."""
    uniq: dict[str, int] = {}
    pos = []
    for t in texts:
        pos.append(uniq.setdefault(t, len(uniq)))
    return list(uniq), pos


def early_stop_score(report: RetrievalReport) -> float:
    """Validation selection score: mean of top-1 accuracy, NDCG, and MAP."""
    return (report.top_k[1] + report.ndcg + report.map_score) / 3.0
