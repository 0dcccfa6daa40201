"""Prompt-ensemble slide classification and text-generation metrics."""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyClassSpec, SingleClassLabels

_TOKEN = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class ClassSpec:
    class_id: str
    prefixes: tuple[str, ...]
    suffixes: tuple[str, ...]

    @property
    def texts(self) -> list[str]:
        if not self.prefixes:
            return list(self.suffixes)
        return [f"{p} : {s}" for p, s in itertools.product(self.prefixes, self.suffixes)]


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lower: float
    upper: float
    replicates: int
    seed: int
    n_skipped: int = 0

    def __str__(self):
        return f"{self.point:.3f} [{self.lower:.3f} - {self.upper:.3f}]"


def load_prompt_tasks(path=None) -> dict[str, list[ClassSpec]]:
    """Prompt ensembles from ``path``, or the shipped NSCLC/RCC/BRCA/procedure set.

    File layout: ``{"tasks": {name: {"prefixes": [...], "classes": {id: [suffix, ...]}}}}``.
    """
    if path is None:
        text = resources.files("wsialign.data").joinpath("classification_prompts.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    raw = json.loads(text)
    tasks = {}
    for task, body in raw["tasks"].items():
        prefixes = tuple(body.get("prefixes", ()))
        tasks[task] = [ClassSpec(cid, prefixes, tuple(sfx)) for cid, sfx in body["classes"].items()]
    return tasks


def classify(
    wsi_embeddings: np.ndarray,
    classes: Sequence[ClassSpec],
    text_encoder: Callable[[list[str]], np.ndarray],
) -> np.ndarray:
    """Mean cosine similarity of each slide to each class's text ensemble.

    ``wsi_embeddings`` is ``(n, d)`` or ``(n, q, d)``; with several query rows
    a slide-text similarity is the max over rows. Returns ``(n, n_classes)``.
    """
    emb = np.asarray(wsi_embeddings, dtype=np.float64)
    emb = emb / np.linalg.norm(emb, axis=-1, keepdims=True)
    scores = np.empty((emb.shape[0], len(classes)))
    for c, spec in enumerate(classes):
        texts = spec.texts
        if not texts:
            raise EmptyClassSpec(spec.class_id)
        t = np.asarray(text_encoder(texts), dtype=np.float64)
        t = t / np.linalg.norm(t, axis=-1, keepdims=True)
        sims = emb @ t.T  # (n, m) or (n, q, m)
        if sims.ndim == 3:
            sims = sims.max(axis=1)
        scores[:, c] = sims.mean(axis=1)
    return scores


def predict(scores: np.ndarray) -> np.ndarray:
    return np.asarray(scores).argmax(axis=1)


def binary_auc(scores: Sequence[float], positive: Sequence[bool]) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassLabels("AUC needs both positive and negative samples")
    r = rankdata(s)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_macro(scores: np.ndarray, labels: Sequence[int]) -> float:
    """One-vs-rest AUC averaged over the classes present in ``labels``.

    ``scores`` is ``(n, n_classes)``; column ``c`` scores class ``c``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2:
        raise SingleClassLabels("at least two classes must be present")
    return float(np.mean([binary_auc(scores[:, c], labels == c) for c in present]))


def balanced_accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2:
        raise SingleClassLabels("at least two classes must be present")
    return float(np.mean([(preds[labels == c] == c).mean() for c in present]))


def bootstrap_ci(
    metric: Callable[..., float],
    data: Sequence[np.ndarray] | np.ndarray,
    replicates: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
) -> BootstrapCI:
    """Percentile interval from resampling rows with replacement.

    ``data`` is one array or a tuple of arrays sharing their first axis
    (e.g. ``(scores, labels)``); each replicate draws one index vector
    from ``default_rng(seed)`` and applies it to every array. Replicates on
    which the metric is undefined (single-class draws) are skipped and
    counted.
    """
    arrays = (data,) if isinstance(data, np.ndarray) else tuple(data)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = len(arrays[0])
    if n == 0:
        raise ValueError("bootstrap needs at least one sample")
    point = float(metric(*arrays))
    rng = np.random.default_rng(seed)
    values, skipped = [], 0
    for _ in range(replicates):
        idx = rng.integers(0, n, size=n)
        try:
            values.append(float(metric(*(a[idx] for a in arrays))))
        except SingleClassLabels:
            skipped += 1
    if not values:
        return BootstrapCI(point, point, point, replicates, seed, skipped)
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    # a skewed replicate distribution can leave the point estimate outside
    lo, hi = min(float(lo), point), max(float(hi), point)
    return BootstrapCI(point, lo, hi, replicates, seed, skipped)


# ------------------------------------------------------------ text metrics


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> tuple[float, float, float]:
    """LCS precision, recall, and F1 over lowercase whitespace tokens."""
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return p, rec, 2 * p * rec / (p + rec)


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    # exact-match alignment: extend the running chunk when possible, else
    # take the earliest unused reference position
    used = [False] * len(ref)
    pairs: list[tuple[int, int]] = []
    last = None
    for i, tok in enumerate(cand):
        j = None
        if last is not None and last + 1 < len(ref) and not used[last + 1] and ref[last + 1] == tok:
            j = last + 1
        else:
            j = next((k for k, t in enumerate(ref) if t == tok and not used[k]), None)
        if j is None:
            last = None
            continue
        used[j] = True
        pairs.append((i, j))
        last = j
    return pairs


def meteor_simplified(candidate: str, reference: str, alpha: float = 0.9,
                      beta: float = 3.0, gamma: float = 0.5) -> float:
    """Exact-match METEOR: recall-weighted harmonic mean times a fragmentation penalty."""
    c, r = tokenize(candidate), tokenize(reference)
    pairs = _align(c, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    f_mean = p * rec / (alpha * p + (1 - alpha) * rec)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    penalty = gamma * (chunks / m) ** beta
    return f_mean * (1 - penalty)
