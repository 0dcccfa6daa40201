"""Stage 2: a frozen character decoder driven by projected Q-Former queries.

The decoder is a small pre-LN causal transformer. It is pretrained on report
texts, frozen, and checksummed. Stage 2 trains only the Q-Former and a linear
map from query outputs to decoder embeddings, so the 32 projected queries act
as a soft prefix in front of the text.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FrozenViolation, NonFiniteLoss, SeqTooLong, UnparseableScore
from .qformer import QFormer, attention, collate_patches, lr_at, param_groups, set_determinism

PRIORITY_TEMPLATE = (
    "Question: On a scale of 1 to 3, where 1 is benign or low-risk, 2 are pre-cancerous polyps "
    "and adenomas, 3 is cancerous or highly suspicious for cancer, can you rate the pathological "
    "findings for this image? Answer:"
)
_SCORE = re.compile(r"(?<!\d)([1-3])(?!\d)")


# ----------------------------------------------------------------- tokenizer


class CharTokenizer:
    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    SPECIALS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")

    def __init__(self, chars: Sequence[str]):
        self.chars = list(chars)
        self.index = {c: i + len(self.SPECIALS) for i, c in enumerate(self.chars)}

    @classmethod
    def build(cls, texts: Sequence[str]) -> "CharTokenizer":
        return cls(sorted({c for t in texts for c in t}))

    def __len__(self):
        return len(self.SPECIALS) + len(self.chars)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(c, self.UNK) for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.EOS:
                break
            if i >= len(self.SPECIALS):
                out.append(self.chars[i - len(self.SPECIALS)])
        return "".join(out)


# ------------------------------------------------------------------- decoder


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    context: int = 384
    n_prefix: int = 32
    init_std: float = 0.02


class _Block(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.dim
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.up = nn.Linear(d, 4 * d)
        self.down = nn.Linear(4 * d, d)

    def forward(self, x, mask):
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        x = x + self.proj(attention(q, k, v, self.n_heads, mask))
        return x + self.down(F.gelu(self.up(self.ln2(x))))


class FrozenDecoder(nn.Module):
    """Causal character LM; text positions always start after ``n_prefix`` slots."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.context, cfg.dim)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=cfg.init_std)
                if isinstance(m, nn.Linear):
                    nn.init.zeros_(m.bias)

    def forward(self, tokens: torch.Tensor, prefix: torch.Tensor | None = None) -> torch.Tensor:
        """Logits for every text position ``(B, T, V)``.

        ``prefix`` is ``(B, n_prefix, dim)`` or None; without it the prefix
        slots are simply absent but text positions keep their offset.
        """
        b, t = tokens.shape
        n_pre = self.cfg.n_prefix
        if n_pre + t > self.cfg.context:
            raise SeqTooLong(f"{n_pre + t} positions exceed decoder context {self.cfg.context}")
        pos = torch.arange(n_pre, n_pre + t, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        if prefix is not None:
            pre_pos = torch.arange(prefix.shape[1], device=tokens.device)
            x = torch.cat([prefix + self.pos_emb(pre_pos)[None].to(prefix.dtype), x.to(prefix.dtype)], dim=1)
        n = x.shape[1]
        causal = torch.ones(n, n, dtype=torch.bool, device=tokens.device).tril()
        mask = torch.where(causal, 0.0, -1e9).to(x.dtype)[None]
        for blk in self.blocks:
            x = blk(x, mask)
        logits = self.head(self.ln_f(x))
        return logits[:, n - t:]

    def freeze(self) -> "FrozenDecoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def checksum(module: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and raw bytes, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _pad(rows: Sequence[Sequence[int]], pad: int = 0) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def lm_batch(tok: CharTokenizer, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
    """Inputs ``[BOS] text`` and targets ``text [EOS]``, padded with PAD."""
    ids = [tok.encode(t) for t in texts]
    return _pad([[tok.BOS] + r for r in ids]), _pad([r + [tok.EOS] for r in ids])


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=CharTokenizer.PAD)


def knowledge_lines(texts: Sequence[str], severities: Sequence[int], template: str = PRIORITY_TEMPLATE) -> list[str]:
    """Question/answer lines that teach the decoder a severity for each finding."""
    return [f"{t} {template} {s}" for t, s in zip(texts, severities)]


@dataclass
class PretrainResult:
    decoder: FrozenDecoder
    tokenizer: CharTokenizer
    checksum: str
    train_loss: float
    val_loss: float
    steps: int


def pretrain_decoder(
    texts: Sequence[str],
    extra_lines: Sequence[str] = (),
    val_texts: Sequence[str] = (),
    cfg: DecoderConfig | None = None,
    steps: int = 600,
    batch_size: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
    eval_every: int = 100,
    patience: int = 3,
    tokenizer: CharTokenizer | None = None,
) -> PretrainResult:
    """Next-character training on ``texts`` plus ``extra_lines``, then freeze.

    Plain texts are drawn three times as often as extra lines so that a
    finished finding is followed by end-of-text rather than a question.
    Training stops early once validation loss stops improving.
    """
    set_determinism(seed)
    tok = tokenizer or CharTokenizer.build(list(texts) + list(extra_lines) + [PRIORITY_TEMPLATE, " 0123456789"])
    cfg = cfg or DecoderConfig(vocab_size=len(tok))
    model = FrozenDecoder(cfg)
    opt = torch.optim.AdamW(param_groups(model, 0.01), lr=lr, betas=(0.9, 0.99))
    rng = np.random.default_rng(seed)
    pool = list(texts) * 3 + list(extra_lines)
    warmup = max(1, steps // 20)
    best, stale, best_state, loss = math.inf, 0, None, torch.tensor(math.nan)
    val_loss = math.nan
    step = 0
    for step in range(1, steps + 1):
        model.train()
        for g in opt.param_groups:
            g["lr"] = lr_at(step, lr, warmup, steps + 1)
        idx = rng.integers(0, len(pool), size=batch_size)
        x, y = lm_batch(tok, [pool[i] for i in idx])
        loss = lm_loss(model(x), y)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if val_texts and step % eval_every == 0:
            val_loss = _eval_lm(model, tok, val_texts)
            if val_loss < best - 1e-4:
                best, stale = val_loss, 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
        val_loss = best
    model.freeze()
    return PretrainResult(model, tok, checksum(model), float(loss.detach()), float(val_loss), step)


@torch.no_grad()
def _eval_lm(model: FrozenDecoder, tok: CharTokenizer, texts: Sequence[str]) -> float:
    model.eval()
    x, y = lm_batch(tok, texts)
    return float(lm_loss(model(x), y))


# ------------------------------------------------------------------- stage 2


@dataclass(frozen=True)
class Stage2Config:
    lr: float = 5e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 1000
    weight_decay: float = 1e-10
    max_steps: int = 200_000
    batch_size: int = 64
    grad_clip_norm: float = 10.0
    eval_every: int = 500
    patience: int = 0
    seed: int = 0
    decoding: str = "greedy"

    def __post_init__(self):
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.decoding != "greedy":
            raise ValueError("only greedy decoding is supported")
        if self.warmup_steps >= self.max_steps:
            raise ValueError("warmup_steps must be < max_steps")


class GraftedModel(nn.Module):
    """Q-Former, a trainable query-to-decoder projection, and the frozen decoder."""

    def __init__(self, qformer: QFormer, decoder: FrozenDecoder):
        super().__init__()
        if qformer.cfg.n_queries != decoder.cfg.n_prefix:
            raise ValueError(f"{qformer.cfg.n_queries} queries but decoder expects {decoder.cfg.n_prefix} prefix slots")
        self.qformer = qformer
        self.proj = nn.Linear(qformer.cfg.query_dim, decoder.cfg.dim)
        nn.init.normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)
        self.decoder = decoder.freeze()

    def prefix(self, patches, valid=None) -> torch.Tensor:
        return self.proj(self.qformer.encode_image(patches, valid))

    def forward(self, patches, valid, tokens) -> torch.Tensor:
        return self.decoder(tokens, self.prefix(patches, valid))

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("decoder.")]


def clip_global_norm(params: Sequence[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the prior norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(g.detach().double().pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


@dataclass
class Stage2Result:
    model: GraftedModel
    best_step: int
    best_metric: float
    log: list[dict] = field(default_factory=list)
    decoder_checksum: str = ""
    seconds: float = 0.0


def stage2_loss(model: GraftedModel, tok: CharTokenizer, inputs: Sequence[np.ndarray], texts: Sequence[str]) -> torch.Tensor:
    dtype = next(model.qformer.parameters()).dtype
    patches, valid = collate_patches(inputs, dtype=dtype)
    x, y = lm_batch(tok, texts)
    return lm_loss(model(patches, valid, x), y)


def train_stage2(
    qformer: QFormer,
    decoder: FrozenDecoder,
    tok: CharTokenizer,
    train_inputs: Sequence[np.ndarray],
    train_texts: Sequence[str],
    cfg: Stage2Config,
    val_inputs: Sequence[np.ndarray] = (),
    val_texts: Sequence[str] = (),
    log_path: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> Stage2Result:
    """Next-token training of Q-Former + projection behind the frozen decoder.

    Model selection uses validation loss. Raises :class:`FrozenViolation` if
    the decoder's checksum differs after training.
    """
    if qformer.cfg.variant != "G":
        raise ValueError("stage 2 starts from a G-variant Q-Former")
    set_determinism(cfg.seed)
    before = checksum(decoder)
    model = GraftedModel(qformer, decoder)
    params = model.trainable_parameters()
    groups = param_groups([(n, p) for n, p in model.named_parameters() if not n.startswith("decoder.")],
                          cfg.weight_decay)
    opt = torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.adam_betas)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_texts)
    log, best_metric, best_step, best_state, stale = [], -math.inf, 0, None, 0
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    t0 = time.perf_counter()
    order, cursor = rng.permutation(n), 0
    try:
        for step in range(1, cfg.max_steps + 1):
            model.train()
            model.decoder.eval()
            lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.max_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            if cursor + cfg.batch_size > n:
                order, cursor = rng.permutation(n), 0
            idx = order[cursor: cursor + cfg.batch_size]
            cursor += cfg.batch_size
            loss = stage2_loss(model, tok, [train_inputs[i] for i in idx], [train_texts[i] for i in idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            norm = clip_global_norm(params, cfg.grad_clip_norm)
            opt.step()
            rec = {"step": step, "lr": lr, "loss": float(loss.detach()), "grad_norm": norm}
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if len(val_texts) and (step % cfg.eval_every == 0 or step == cfg.max_steps):
                with torch.no_grad():
                    model.eval()
                    metric = -float(stage2_loss(model, tok, val_inputs, val_texts))
                if callback:
                    callback(step, {"step": step, "metric": metric})
                if metric > best_metric:
                    best_metric, best_step, stale = metric, step, 0
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                else:
                    stale += 1
                    if cfg.patience and stale >= cfg.patience:
                        break
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_step = len(log)
    model.eval()
    after = checksum(model.decoder)
    if after != before:
        raise FrozenViolation(f"decoder checksum changed: {before[:12]} -> {after[:12]}")
    return Stage2Result(model, best_step, best_metric, log, after, time.perf_counter() - t0)


# ---------------------------------------------------------------- decoding


@torch.no_grad()
def greedy_ids(
    model: GraftedModel,
    prefix: torch.Tensor,
    context_ids: Sequence[Sequence[int]],
    max_len: int,
    eos_id: int = CharTokenizer.EOS,
) -> list[list[int]]:
    """Greedy continuation of each row of ``context_ids`` (which start with BOS).

    Emission stops at EOS (included in the output) or after ``max_len`` tokens.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    room = model.decoder.cfg.context - model.decoder.cfg.n_prefix
    if max(len(c) for c in context_ids) + max_len > room:
        raise SeqTooLong(f"context plus max_len exceeds decoder room {room}")
    b = len(context_ids)
    seqs = [list(c) for c in context_ids]
    out: list[list[int]] = [[] for _ in range(b)]
    done = [False] * b
    for _ in range(max_len):
        active = [i for i in range(b) if not done[i]]
        if not active:
            break
        # rows of unequal length are right-padded; each row reads its own last position
        x = _pad([seqs[i] for i in active])
        logits = model.decoder(x, prefix[active])
        last = torch.tensor([len(seqs[i]) - 1 for i in active])
        nxt = logits[torch.arange(len(active)), last].argmax(dim=-1).tolist()
        for i, t in zip(active, nxt):
            seqs[i].append(t)
            out[i].append(t)
            if t == eos_id:
                done[i] = True
    return out


def _prefix(model: GraftedModel, inputs: Sequence[np.ndarray]) -> torch.Tensor:
    model.eval()
    dtype = next(model.qformer.parameters()).dtype
    patches, valid = collate_patches(inputs, dtype=dtype)
    with torch.no_grad():
        return model.prefix(patches, valid)


def generate(
    model: GraftedModel,
    tok: CharTokenizer,
    inputs: Sequence[np.ndarray],
    max_len: int = 120,
    prompt: str | None = None,
    batch_size: int = 32,
) -> list[str]:
    """Greedy text for each slide input, optionally continuing ``prompt``."""
    texts = []
    start = [tok.BOS] + (tok.encode(prompt) if prompt else [])
    for s in range(0, len(inputs), batch_size):
        chunk = list(inputs[s: s + batch_size])
        ids = greedy_ids(model, _prefix(model, chunk), [start] * len(chunk), max_len)
        texts.extend(tok.decode(r) for r in ids)
    return texts


# ------------------------------------------------------------ prioritization


@dataclass(frozen=True)
class PriorityScore:
    slide_id: str
    score: int
    raw_response: str
    flagged: bool = False
    generated_text: str = ""

    def to_record(self) -> dict:
        return {"slide_id": self.slide_id, "score": self.score, "raw_response": self.raw_response,
                "flagged": self.flagged}


def parse_score(response: str) -> int:
    """First standalone digit 1-3 in ``response``."""
    m = _SCORE.search(response)
    if m is None:
        raise UnparseableScore(f"no score in {response!r}")
    return int(m.group(1))


def score_response(slide_id: str, response: str, generated_text: str = "") -> PriorityScore:
    try:
        return PriorityScore(slide_id, parse_score(response), response, False, generated_text)
    except UnparseableScore:
        warnings.warn(f"{slide_id}: unparseable priority response {response!r}; scored 1", stacklevel=2)
        return PriorityScore(slide_id, 1, response, True, generated_text)


def sort_priorities(scores: Sequence[PriorityScore]) -> list[PriorityScore]:
    return sorted(scores, key=lambda s: (-s.score, s.slide_id))


def prioritize(
    model: GraftedModel,
    tok: CharTokenizer,
    slide_ids: Sequence[str],
    inputs: Sequence[np.ndarray],
    template: str = PRIORITY_TEMPLATE,
    max_text_len: int = 120,
    answer_len: int = 4,
    batch_size: int = 32,
) -> list[PriorityScore]:
    """Generate a finding, then ask the decoder to rate it, per slide.

    The scoring context is the slide's projected queries, the generated
    text, a space, and ``template``. Results are sorted by descending score,
    then slide id.
    """
    if len(slide_ids) != len(inputs):
        raise ValueError("slide_ids and inputs differ in length")
    results = []
    for s in range(0, len(inputs), batch_size):
        chunk = list(inputs[s: s + batch_size])
        prefix = _prefix(model, chunk)
        gen_ids = greedy_ids(model, prefix, [[tok.BOS]] * len(chunk), max_text_len)
        gen = [tok.decode(r) for r in gen_ids]
        ctx = [[tok.BOS] + tok.encode(f"{g} {template}") for g in gen]
        answers = greedy_ids(model, prefix, ctx, answer_len)
        for sid, g, a in zip(slide_ids[s: s + batch_size], gen, answers):
            results.append(score_response(sid, tok.decode(a), g))
    return sort_priorities(results)


def pairwise_order_accuracy(ranked_severities: Sequence[int]) -> float:
    """Fraction of pairs with different severity where the more severe one is listed first."""
    good = total = 0
    for i, a in enumerate(ranked_severities):
        for b in ranked_severities[i + 1:]:
            if a != b:
                total += 1
                good += a > b
    return good / total if total else 1.0


# -------------------------------------------------------------- checkpoints


def save_stage2(path, model: GraftedModel, tok: CharTokenizer, qtok, extra: dict | None = None) -> None:
    from .qformer import save_checkpoint

    meta = {
        "kind": "stage2",
        "qformer_config": asdict(model.qformer.cfg),
        "decoder_config": asdict(model.decoder.cfg),
        "chars": tok.chars,
        "qformer_vocab": qtok.vocab,
        "decoder_checksum": checksum(model.decoder),
    }
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def load_stage2(path):
    from .qformer import QFormerConfig, WordTokenizer, load_checkpoint

    state, meta = load_checkpoint(path)
    if meta.get("kind") != "stage2":
        raise ValueError(f"{path} is not a stage-2 checkpoint")
    qf = QFormer(QFormerConfig(**meta["qformer_config"]))
    cfg = meta["decoder_config"]
    dec = FrozenDecoder(DecoderConfig(**cfg))
    model = GraftedModel(qf, dec)
    model.load_state_dict(state)
    model.decoder.freeze()
    model.eval()
    if checksum(model.decoder) != meta["decoder_checksum"]:
        raise FrozenViolation(f"{path}: decoder checksum does not match its header")
    return model, CharTokenizer(meta["chars"]), WordTokenizer(meta["qformer_vocab"]), meta


def save_decoder(path, res: PretrainResult) -> None:
    from .qformer import save_checkpoint

    save_checkpoint(path, res.decoder.state_dict(),
                    {"kind": "decoder", "config": asdict(res.decoder.cfg), "chars": res.tokenizer.chars,
                     "checksum": res.checksum})


def load_decoder(path) -> tuple[FrozenDecoder, CharTokenizer]:
    from .qformer import load_checkpoint

    state, meta = load_checkpoint(path)
    dec = FrozenDecoder(DecoderConfig(**meta["config"]))
    dec.load_state_dict(state)
    dec.freeze()
    if checksum(dec) != meta["checksum"]:
        raise FrozenViolation(f"{path}: decoder checksum does not match its header")
    return dec, CharTokenizer(meta["chars"])
