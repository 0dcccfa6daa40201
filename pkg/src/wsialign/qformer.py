"""Q-Former with learned queries, a shared-attention text stream, and stage-1 training.

Queries and text tokens share self-attention weights; the task decides who
may attend to whom:

* ITC: queries and text run as separate unimodal passes (bidirectional).
* ITM: one joint pass, everything sees everything.
* ITG: queries see only queries; text sees all queries plus earlier text.

Only the query stream cross-attends to the patch sequence.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CorruptStore, EmptyPatchSequence, NonFiniteLoss, SeqTooLong, VersionMismatch
from .patch_embedder import EMBED_DIM
from .tiler import BUDGET

NEG_INF = -1e9


@dataclass(frozen=True)
class QFormerConfig:
    n_queries: int = 1
    query_dim: int = 192
    intermediate_dim: int = 3072
    itc_proj_dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    variant: str = "R"
    patch_dim: int = EMBED_DIM
    max_text_len: int = 32
    vocab_size: int = 0
    init_temperature: float = 0.01
    init_std: float = 0.02

    def __post_init__(self):
        if self.query_dim % self.n_heads:
            raise ValueError("query_dim must be divisible by n_heads")
        if self.variant not in ("R", "G"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class LossWeights:
    itc: float = 1.0
    itm: float = 0.0
    itg: float = 0.0

    def __post_init__(self):
        if min(self.itc, self.itm, self.itg) < 0:
            raise ValueError("loss weights must be nonnegative")


R_WEIGHTS = LossWeights(1.0, 0.0, 0.0)
G_WEIGHTS = LossWeights(1.0, 0.5, 1.0)


def variant_config(variant: str, **overrides) -> tuple[QFormerConfig, LossWeights]:
    if variant == "R":
        cfg = QFormerConfig(n_queries=1, variant="R", init_temperature=0.01)
        weights = R_WEIGHTS
    elif variant == "G":
        cfg = QFormerConfig(n_queries=32, variant="G", init_temperature=0.07)
        weights = G_WEIGHTS
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return replace(cfg, **overrides), weights


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.998)
    warmup_steps: int = 2000
    max_steps: int = 100_000
    batch_size: int = 1024
    seed: int = 0
    eval_every: int = 500
    patience: int = 0  # evaluations without improvement before stopping; 0 disables
    min_temperature: float = 1e-3
    max_temperature: float = 0.5

    def __post_init__(self):
        if self.warmup_steps >= self.max_steps:
            raise ValueError("warmup_steps must be < max_steps")
        if self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2")


def lr_at(step: int, lr: float, warmup_steps: int, max_steps: int) -> float:
    """Linear warmup to ``lr`` over ``warmup_steps``, then cosine decay to 0."""
    if step <= warmup_steps:
        return lr * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / (max_steps - warmup_steps))
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------- tokenizer

_WORD = re.compile(r"\w+|[^\w\s]")


class WordTokenizer:
    PAD, UNK, CLS, DEC, EOS = "[PAD]", "[UNK]", "[CLS]", "[DEC]", "[EOS]"
    SPECIALS = (PAD, UNK, CLS, DEC, EOS)

    def __init__(self, vocab: Sequence[str]):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id, self.unk_id, self.cls_id, self.dec_id, self.eos_id = range(5)

    @classmethod
    def build(cls, texts: Sequence[str]) -> "WordTokenizer":
        words = sorted({w for t in texts for w in _WORD.findall(t.lower())})
        return cls(list(cls.SPECIALS) + words)

    def __len__(self):
        return len(self.vocab)

    def words(self, text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def encode(self, text: str, max_len: int) -> list[int]:
        ids = [self.cls_id] + [self.index.get(w, self.unk_id) for w in self.words(text)] + [self.eos_id]
        return ids[:max_len]

    def batch(self, texts: Sequence[str], max_len: int) -> torch.Tensor:
        rows = [self.encode(t, max_len) for t in texts]
        width = max(len(r) for r in rows)
        out = torch.full((len(rows), width), self.pad_id, dtype=torch.long)
        for i, r in enumerate(rows):
            out[i, : len(r)] = torch.tensor(r)
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.vocab).encode()).hexdigest()[:16]


# --------------------------------------------------------------------- model


def attention(q, k, v, n_heads: int, mask: torch.Tensor | None) -> torch.Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is additive, broadcastable to (B, Lq, Lk)."""
    b, lq, d = q.shape
    lk = k.shape[1]
    dh = d // n_heads
    q = q.view(b, lq, n_heads, dh).transpose(1, 2)
    k = k.view(b, lk, n_heads, dh).transpose(1, 2)
    v = v.view(b, lk, n_heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        scores = scores + mask.unsqueeze(1)
    out = torch.softmax(scores, dim=-1) @ v
    return out.transpose(1, 2).reshape(b, lq, d)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, ctx, mask=None):
        return self.o(attention(self.q(x), self.k(ctx), self.v(ctx), self.n_heads, mask))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class QFormerLayer(nn.Module):
    def __init__(self, cfg: QFormerConfig):
        super().__init__()
        d = cfg.query_dim
        self.self_attn = Attention(d, cfg.n_heads)
        self.ln_self = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.n_heads, kv_dim=cfg.patch_dim)
        self.ln_cross = nn.LayerNorm(d)
        self.ffn_query = FeedForward(d, cfg.intermediate_dim)
        self.ln_ffn_query = nn.LayerNorm(d)
        self.ffn_text = FeedForward(d, cfg.intermediate_dim)
        self.ln_ffn_text = nn.LayerNorm(d)

    def forward(self, h, n_query, self_mask, patches=None, patch_mask=None):
        h = self.ln_self(h + self.self_attn(h, h, self_mask))
        hq, ht = h[:, :n_query], h[:, n_query:]
        parts = []
        if n_query:
            hq = self.ln_cross(hq + self.cross_attn(hq, patches, patch_mask))
            parts.append(self.ln_ffn_query(hq + self.ffn_query(hq)))
        if ht.shape[1]:
            parts.append(self.ln_ffn_text(ht + self.ffn_text(ht)))
        return torch.cat(parts, dim=1)


class QFormer(nn.Module):
    def __init__(self, cfg: QFormerConfig):
        super().__init__()
        if cfg.vocab_size <= 0:
            raise ValueError("vocab_size must be set from the tokenizer")
        self.cfg = cfg
        d = cfg.query_dim
        self.query_tokens = nn.Parameter(torch.randn(cfg.n_queries, d) * cfg.init_std)
        self.word_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_text_len, d)
        self.ln_emb = nn.LayerNorm(d)
        self.ln_patch = nn.LayerNorm(cfg.patch_dim)
        self.layers = nn.ModuleList(QFormerLayer(cfg) for _ in range(cfg.n_layers))
        self.vision_proj = nn.Linear(d, cfg.itc_proj_dim)
        self.text_proj = nn.Linear(d, cfg.itc_proj_dim)
        self.itm_head = nn.Linear(d, 2)
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(cfg.init_temperature)))
        self.apply(self._init)
        self.call_counts = {"itc": 0, "itm": 0, "itg": 0}

    def _init(self, m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=self.cfg.init_std)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    # -- helpers
    def _check_patches(self, patches, patch_mask):
        if patches.shape[1] == 0 or (patch_mask is not None and (patch_mask.sum(1) == 0).any()):
            raise EmptyPatchSequence("every slide needs at least one patch")
        if patches.shape[1] > BUDGET:
            raise SeqTooLong(f"{patches.shape[1]} patches exceeds {BUDGET}")

    def _key_mask(self, valid: torch.Tensor | None, dtype) -> torch.Tensor | None:
        if valid is None:
            return None
        return torch.where(valid, 0.0, NEG_INF).to(dtype)[:, None, :]

    def _embed_text(self, tokens):
        if tokens.shape[1] > self.cfg.max_text_len:
            raise SeqTooLong(f"text length {tokens.shape[1]} > {self.cfg.max_text_len}")
        pos = torch.arange(tokens.shape[1], device=tokens.device)
        return self.ln_emb(self.word_emb(tokens) + self.pos_emb(pos)[None])

    def _queries(self, b):
        return self.query_tokens[None].expand(b, -1, -1)

    def _run(self, h, n_query, self_mask, patches, patch_mask):
        pm = self._key_mask(patch_mask, h.dtype)
        p = self.ln_patch(patches) if patches is not None else None
        for layer in self.layers:
            h = layer(h, n_query, self_mask, p, pm)
        return h

    # -- task passes
    def encode_image(self, patches, patch_mask=None) -> torch.Tensor:
        """Query outputs ``(B, n_queries, D)`` from a unimodal pass."""
        self._check_patches(patches, patch_mask)
        q = self._queries(patches.shape[0])
        return self._run(q, q.shape[1], None, patches, patch_mask)

    def encode_text(self, tokens) -> torch.Tensor:
        h = self._embed_text(tokens)
        mask = self._key_mask(tokens != 0, h.dtype)
        return self._run(h, 0, mask, None, None)

    def image_feats(self, patches, patch_mask=None) -> torch.Tensor:
        return F.normalize(self.vision_proj(self.encode_image(patches, patch_mask)), dim=-1)

    def text_feats(self, tokens) -> torch.Tensor:
        return F.normalize(self.text_proj(self.encode_text(tokens)[:, 0]), dim=-1)

    def itm_logits(self, patches, patch_mask, tokens) -> torch.Tensor:
        self.call_counts["itm"] += 1
        self._check_patches(patches, patch_mask)
        b, nq = patches.shape[0], self.cfg.n_queries
        h = torch.cat([self._queries(b), self._embed_text(tokens)], dim=1)
        valid = torch.cat([torch.ones(b, nq, dtype=torch.bool, device=tokens.device), tokens != 0], dim=1)
        out = self._run(h, nq, self._key_mask(valid, h.dtype), patches, patch_mask)
        return self.itm_head(out[:, :nq].mean(dim=1))

    def itg_logits(self, patches, patch_mask, tokens, dec_id: int = 3) -> torch.Tensor:
        """Next-token logits ``(B, T, V)``; the first token is replaced by ``dec_id``."""
        self.call_counts["itg"] += 1
        self._check_patches(patches, patch_mask)
        b, nq, t = patches.shape[0], self.cfg.n_queries, tokens.shape[1]
        tokens = tokens.clone()
        tokens[:, 0] = dec_id
        h = torch.cat([self._queries(b), self._embed_text(tokens)], dim=1)
        n = nq + t
        allow = torch.zeros(n, n, dtype=torch.bool, device=tokens.device)
        allow[:nq, :nq] = True
        allow[nq:, :nq] = True
        allow[nq:, nq:] = torch.tril(torch.ones(t, t, dtype=torch.bool, device=tokens.device))
        valid = torch.cat([torch.ones(b, nq, dtype=torch.bool, device=tokens.device), tokens != 0], dim=1)
        allow = allow[None] & valid[:, None, :]
        mask = torch.where(allow, 0.0, NEG_INF).to(h.dtype)
        out = self._run(h, nq, mask, patches, patch_mask)
        return self.lm_head(out[:, nq:])

    def forward(self, patches, patch_mask, tokens):
        """All four heads for a batch of aligned (slide, text) pairs."""
        img = self.image_feats(patches, patch_mask)
        txt = self.text_feats(tokens)
        return img, txt, self.itm_logits(patches, patch_mask, tokens), self.itg_logits(patches, patch_mask, tokens)


# -------------------------------------------------------------------- losses


def itc_similarity(image_feats: torch.Tensor, text_feats: torch.Tensor) -> torch.Tensor:
    """``(B_img, B_txt)`` similarity; several query rows reduce by max."""
    sims = torch.einsum("iqd,jd->ijq", image_feats, text_feats)
    return sims.max(dim=-1).values


@dataclass
class ItcStats:
    flagged_rows: int = 0


def itc_loss_from_logits(logits: torch.Tensor, fn_mask: torch.Tensor | None, stats: ItcStats | None = None):
    """Symmetric InfoNCE over ``logits[i, j]`` (image i, text j).

    ``fn_mask[i, j]`` drops the pair from both softmax denominators; the
    diagonal is never dropped. A row whose every negative is masked
    contributes exactly zero.
    """
    n = logits.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=logits.device)
    if fn_mask is not None:
        drop = fn_mask.to(torch.bool) & ~eye
        logits = logits.masked_fill(drop, float("-inf"))
        if stats is not None:
            stats.flagged_rows += int((drop.sum(1) == n - 1).sum()) + int((drop.sum(0) == n - 1).sum())
    target = torch.arange(n, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def itc_loss(image_feats, text_feats, temperature, fn_mask=None, stats=None):
    if image_feats.dim() == 2:
        image_feats = image_feats[:, None]
    logits = itc_similarity(image_feats, text_feats) / temperature
    return itc_loss_from_logits(logits, fn_mask, stats)


def itm_loss(itm_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(itm_logits, labels)


def itg_loss(itg_logits: torch.Tensor, tokens: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """Next-token cross-entropy: logits at t predict token t+1; padding targets are skipped."""
    pred = itg_logits[:, :-1].reshape(-1, itg_logits.shape[-1])
    target = tokens[:, 1:].reshape(-1)
    return F.cross_entropy(pred, target, ignore_index=pad_id)


def fn_mask(texts: Sequence[str], oracle) -> np.ndarray:
    n = len(texts)
    out = np.zeros((n, n), bool)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = oracle.similarity(texts[i], texts[j]) > oracle.threshold
    return out


def sample_itm_negatives(mask: np.ndarray, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """One uniform negative per row, skipping false negatives.

    Even rows pair image ``i`` with a sampled text, odd rows pair a sampled
    image with text ``i``. Returns ``(anchor, image_idx, text_idx)`` triples;
    rows with no admissible negative are left out.
    """
    n = mask.shape[0]
    out = []
    for i in range(n):
        cand = [j for j in range(n) if j != i and not mask[i, j]]
        if not cand:
            continue
        j = cand[int(rng.integers(len(cand)))]
        out.append((i, i, j) if i % 2 == 0 else (i, j, i))
    return out


# ---------------------------------------------------------------------- data


def collate_patches(inputs: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad variable-length ``(n_i, 384)`` patch sequences; returns (patches, valid mask)."""
    width = max(x.shape[0] for x in inputs)
    d = inputs[0].shape[1]
    patches = torch.zeros(len(inputs), width, d, dtype=dtype)
    valid = torch.zeros(len(inputs), width, dtype=torch.bool)
    for i, x in enumerate(inputs):
        patches[i, : x.shape[0]] = torch.as_tensor(x, dtype=dtype)
        valid[i, : x.shape[0]] = True
    return patches, valid


@dataclass
class PairBatch:
    patches: torch.Tensor
    valid: torch.Tensor
    tokens: torch.Tensor
    texts: list[str]
    mask: np.ndarray


def compute_losses(
    model: QFormer,
    batch: PairBatch,
    weights: LossWeights,
    itm_pairs: list[tuple[int, int, int]] | None = None,
    rng: np.random.Generator | None = None,
    stats: ItcStats | None = None,
) -> dict[str, torch.Tensor]:
    """Weighted stage-1 loss; branches with zero weight are not executed."""
    out: dict[str, torch.Tensor] = {}
    fn = torch.as_tensor(batch.mask)
    total = 0.0
    img = model.image_feats(batch.patches, batch.valid)
    txt = model.text_feats(batch.tokens)
    out["itc"] = itc_loss(img, txt, model.temperature, fn, stats)
    total = weights.itc * out["itc"]
    if weights.itm > 0:
        if itm_pairs is None:
            itm_pairs = sample_itm_negatives(batch.mask, rng or np.random.default_rng(0))
        pos = [a for a, _, _ in itm_pairs]
        img_idx = pos + [i for _, i, _ in itm_pairs]
        txt_idx = pos + [t for _, _, t in itm_pairs]
        labels = torch.tensor([1] * len(pos) + [0] * len(itm_pairs))
        logits = model.itm_logits(batch.patches[img_idx], batch.valid[img_idx], batch.tokens[txt_idx])
        out["itm"] = itm_loss(logits, labels)
        total = total + weights.itm * out["itm"]
    if weights.itg > 0:
        logits = model.itg_logits(batch.patches, batch.valid, batch.tokens)
        out["itg"] = itg_loss(logits, batch.tokens)
        total = total + weights.itg * out["itg"]
    out["total"] = total
    return out


class PairDataset:
    """Slide inputs and texts, with the false-negative mask precomputed over unique texts."""

    def __init__(self, inputs: Sequence[np.ndarray], texts: Sequence[str], tokenizer: WordTokenizer,
                 oracle, max_text_len: int):
        self.inputs = list(inputs)
        self.texts = list(texts)
        self.tokenizer = tokenizer
        self.max_text_len = max_text_len
        uniq = sorted(set(self.texts))
        self._uid = {t: i for i, t in enumerate(uniq)}
        self._umask = fn_mask(uniq, oracle)

    def __len__(self):
        return len(self.texts)

    def batch(self, idx: Sequence[int]) -> PairBatch:
        patches, valid = collate_patches([self.inputs[i] for i in idx])
        texts = [self.texts[i] for i in idx]
        u = [self._uid[t] for t in texts]
        u = np.asarray(u)
        # repeated texts share a unique id, so they are masked by id equality
        mask = self._umask[np.ix_(u, u)] | (u[:, None] == u[None, :])
        np.fill_diagonal(mask, False)
        return PairBatch(patches, valid, self.tokenizer.batch(texts, self.max_text_len), texts, mask)


# ---------------------------------------------------------------- inference


@torch.no_grad()
def embed_images(model: QFormer, inputs: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Unit ITC features ``(n, n_queries, proj_dim)``."""
    model.eval()
    out = []
    for s in range(0, len(inputs), batch_size):
        p, v = collate_patches(inputs[s: s + batch_size], dtype=next(model.parameters()).dtype)
        out.append(model.image_feats(p, v).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_queries, model.cfg.itc_proj_dim))


@torch.no_grad()
def embed_texts(model: QFormer, tokenizer: WordTokenizer, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, len(texts), batch_size):
        tok = tokenizer.batch(texts[s: s + batch_size], model.cfg.max_text_len)
        out.append(model.text_feats(tok).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.itc_proj_dim))


def retrieval_report(model, tokenizer, inputs, texts, oracle, ks=(1, 5, 10)):
    """Image-to-text retrieval over the deduplicated text corpus."""
    from .retrieval_eval import build_index, dedupe_texts, evaluate, match_sets

    corpus, gt = dedupe_texts(texts)
    text_emb = embed_texts(model, tokenizer, corpus)
    index = build_index(list(zip(corpus, text_emb)), modality="text")
    rel = match_sets(texts, corpus, oracle, gt)
    img = embed_images(model, inputs)
    ks = tuple(k for k in ks if k <= len(corpus)) or (1,)
    return evaluate(index, list(img), rel, ks=ks)


# ------------------------------------------------------------------ training


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def param_groups(model, weight_decay: float):
    """AdamW groups; biases, norms, queries and the temperature are not decayed.

    ``model`` is a module or an iterable of ``(name, parameter)`` pairs.
    """
    named = model.named_parameters() if isinstance(model, nn.Module) else model
    decay, no_decay = [], []
    for name, p in named:
        if not p.requires_grad:
            continue
        if p.dim() < 2 or name.endswith("log_temperature") or name.endswith("query_tokens"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class TrainResult:
    model: QFormer
    best_step: int
    best_metric: float
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            yield order[s: s + batch_size]
        if n < batch_size:
            yield order


def train_stage1(
    train: PairDataset,
    cfg: QFormerConfig,
    weights: LossWeights,
    tcfg: TrainConfig,
    val: PairDataset | None = None,
    oracle=None,
    log_path: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """AdamW + warmup/cosine over the weighted stage-1 loss.

    Model selection uses validation retrieval (mean of top-1, NDCG, MAP) for
    the R variant and validation ITG loss for G. Returns the best model.
    """
    set_determinism(tcfg.seed)
    model = QFormer(cfg)
    opt = torch.optim.AdamW(param_groups(model, tcfg.weight_decay), lr=tcfg.lr, betas=tcfg.adam_betas)
    rng = np.random.default_rng(tcfg.seed)
    batches = _batches(len(train), tcfg.batch_size, rng)
    log, evals = [], []
    best_metric, best_step, best_state = -math.inf, 0, None
    stale = 0
    lo, hi = math.log(tcfg.min_temperature), math.log(tcfg.max_temperature)
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    t0 = time.perf_counter()
    try:
        for step in range(1, tcfg.max_steps + 1):
            model.train()
            lr = lr_at(step, tcfg.lr, tcfg.warmup_steps, tcfg.max_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = train.batch(next(batches))
            losses = compute_losses(model, batch, weights, rng=rng)
            total = losses["total"]
            if not torch.isfinite(total):
                raise NonFiniteLoss(step)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            with torch.no_grad():
                model.log_temperature.clamp_(lo, hi)
            rec = {"step": step, "lr": lr}
            for k in ("itc", "itm", "itg"):
                rec[k] = float(losses[k].detach()) if k in losses else 0.0
            rec["total"] = float(total.detach())
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if val is not None and (step % tcfg.eval_every == 0 or step == tcfg.max_steps):
                metric = evaluate_validation(model, val, weights, cfg, oracle)
                evals.append({"step": step, "metric": metric})
                if callback:
                    callback(step, evals[-1])
                if metric > best_metric:
                    best_metric, best_step, stale = metric, step, 0
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                else:
                    stale += 1
                    if tcfg.patience and stale >= tcfg.patience:
                        break
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_step = len(log)
    model.eval()
    return TrainResult(model, best_step, best_metric, log, evals, time.perf_counter() - t0)


@torch.no_grad()
def evaluate_validation(model: QFormer, val: PairDataset, weights: LossWeights, cfg: QFormerConfig, oracle) -> float:
    """Higher is better: retrieval score for R, negated ITG loss for G."""
    model.eval()
    if cfg.variant == "R" or weights.itg == 0:
        from .retrieval_eval import early_stop_score
        return early_stop_score(retrieval_report(model, val.tokenizer, val.inputs, val.texts, oracle))
    losses = []
    for s in range(0, len(val), 64):
        b = val.batch(list(range(s, min(s + 64, len(val)))))
        losses.append(float(itg_loss(model.itg_logits(b.patches, b.valid, b.tokens), b.tokens)))
    return -float(np.mean(losses))


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"WSIQ"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], meta: dict) -> None:
    """Header JSON (meta, parameter names and shapes), f32 payload, trailing CRC32."""
    names = sorted(state)
    header = dict(meta, blocks=[{"name": n, "shape": list(state[n].shape)} for n in names])
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hbytes)) + hbytes)
    for n in names:
        body += state[n].detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    body = bytes(body)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != CKPT_MAGIC:
        raise CorruptStore(f"{path}: not a checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptStore(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<HI", body, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}")
    header = json.loads(body[10: 10 + hlen])
    pos = 10 + hlen
    state = {}
    for blk in header.pop("blocks"):
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(blk["shape"])
        state[blk["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * n
    if pos != len(body):
        raise CorruptStore(f"{path}: trailing bytes in payload")
    return state, header


def save_qformer(path, model: QFormer, tokenizer: WordTokenizer, extra: dict | None = None) -> None:
    meta = {"kind": "qformer", "config": asdict(model.cfg), "vocab": tokenizer.vocab}
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def load_qformer(path) -> tuple[QFormer, WordTokenizer, dict]:
    state, meta = load_checkpoint(path)
    cfg = QFormerConfig(**meta["config"])
    model = QFormer(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, WordTokenizer(meta["vocab"]), meta
