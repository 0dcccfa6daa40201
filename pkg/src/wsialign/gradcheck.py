"""Central finite-difference check of autograd gradients on tiny float64 models."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .langgraft import CharTokenizer, DecoderConfig, FrozenDecoder, GraftedModel, lm_loss
from .qformer import LossWeights, PairBatch, QFormer, QFormerConfig, compute_losses


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_block: str
    n_checked: int
    seconds: float
    per_block: dict = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    name: str,
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.nn.Parameter],
    coords_per_block: int = 12,
    eps: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd with a central difference on sampled coordinates of each block.

    The five-point stencil ``(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h``
    has O(h^4) truncation error, which allows a step large enough that
    float64 roundoff stays near 1e-12.
    """
    t0 = time.perf_counter()
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst, worst_block, n_checked, per_block = 0.0, "", 0, {}
    with torch.no_grad():
        for key, p in params.items():
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(coords_per_block, flat.numel()), replace=False)
            block_worst = 0.0
            for i in picks:
                orig = float(flat[i])
                f = {}
                for k in (-2, -1, 1, 2):
                    flat[i] = orig + k * eps
                    f[k] = float(loss_fn())
                flat[i] = orig
                num = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * eps)
                err = rel_error(float(analytic[key].view(-1)[i]), num)
                block_worst = max(block_worst, err)
                n_checked += 1
            per_block[key] = block_worst
            if block_worst > worst:
                worst, worst_block = block_worst, key
    return GradCheckReport(name, worst, worst_block, n_checked, time.perf_counter() - t0, per_block)


def _tiny_qformer(variant: str, n_queries: int, vocab: int, seed: int) -> QFormer:
    torch.manual_seed(seed)
    cfg = QFormerConfig(n_queries=n_queries, query_dim=16, intermediate_dim=32, itc_proj_dim=8, n_layers=2,
                        n_heads=4, variant=variant, patch_dim=12, max_text_len=8, vocab_size=vocab,
                        init_temperature=0.07, init_std=0.3)
    return QFormer(cfg).double()


def _tiny_batch(seed: int, vocab: int, batch: int = 3, n_patches: int = 4) -> PairBatch:
    g = torch.Generator().manual_seed(seed)
    patches = torch.randn(batch, n_patches, 12, generator=g, dtype=torch.float64)
    valid = torch.ones(batch, n_patches, dtype=torch.bool)
    valid[1, -1] = False  # exercise padding
    tokens = torch.randint(5, vocab, (batch, 6), generator=g)
    tokens[:, 0] = 2
    tokens[2, -2:] = 0
    mask = np.zeros((batch, batch), bool)
    mask[0, 2] = mask[2, 0] = True  # one false-negative pair
    return PairBatch(patches, valid, tokens, [f"t{i}" for i in range(batch)], mask)


def stage1_check(variant: str, seed: int = 0, coords_per_block: int = 12) -> GradCheckReport:
    vocab = 11
    n_queries = 1 if variant == "R" else 3
    model = _tiny_qformer(variant, n_queries, vocab, seed)
    batch = _tiny_batch(seed, vocab)
    weights = LossWeights(1.0, 0.0, 0.0) if variant == "R" else LossWeights(1.0, 0.5, 1.0)
    pairs = [(0, 0, 1), (1, 2, 1), (2, 2, 1)]

    def loss():
        return compute_losses(model, batch, weights, itm_pairs=pairs)["total"]

    params = dict(model.named_parameters())
    if variant == "R":
        # heads that the R objective never touches have identically zero gradient
        params = {k: p for k, p in params.items() if not k.startswith(("itm_head", "lm_head"))}
    return check_gradients(f"stage1-{variant}", loss, params, coords_per_block, seed=seed)


def stage2_check(seed: int = 0, coords_per_block: int = 12) -> GradCheckReport:
    n_queries, vocab = 3, 9
    qf = _tiny_qformer("G", n_queries, 11, seed)
    torch.manual_seed(seed + 1)
    dec = FrozenDecoder(DecoderConfig(vocab_size=vocab, dim=8, n_layers=2, n_heads=2, context=16,
                                      n_prefix=n_queries, init_std=0.3)).double()
    model = GraftedModel(qf, dec).double()
    torch.nn.init.normal_(model.proj.weight, std=0.3)
    batch = _tiny_batch(seed, 11)
    g = torch.Generator().manual_seed(seed + 2)
    x = torch.randint(4, vocab, (3, 5), generator=g)
    x[:, 0] = CharTokenizer.BOS
    y = torch.randint(4, vocab, (3, 5), generator=g)
    y[1, -2:] = CharTokenizer.PAD

    def loss():
        return lm_loss(model(batch.patches, batch.valid, x), y)

    params = {k: p for k, p in model.named_parameters() if not k.startswith("decoder.")}
    # only the image path feeds the decoder
    params = {k: p for k, p in params.items()
              if not k.startswith(("qformer.word_emb", "qformer.pos_emb", "qformer.ln_emb", "qformer.text_proj",
                                   "qformer.vision_proj", "qformer.itm_head", "qformer.lm_head",
                                   "qformer.log_temperature"))
              and ".ffn_text" not in k and ".ln_ffn_text" not in k}
    return check_gradients("stage2", loss, params, coords_per_block, seed=seed)


def run_all(seed: int = 0, coords_per_block: int = 12) -> list[GradCheckReport]:
    return [stage1_check("R", seed, coords_per_block), stage1_check("G", seed, coords_per_block),
            stage2_check(seed, coords_per_block)]
