"""Encoder / residual quantizer / decoder with per-level tag heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses
from .config import TokenizerConfig


# initial latent scale after calibration, per dimension
Z0_INIT_NORM = 1.0


def mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


def quantize(r: torch.Tensor, codebook: torch.Tensor):
    """Nearest codeword per row of ``r``; ties resolve to the lowest index.

    Accepts a single vector or a batch; returns ``(index, codeword)``.
    """
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    single = r.dim() == 1
    rb = r[None] if single else r
    dist = ((rb[:, None, :] - codebook[None, :, :]) ** 2).sum(dim=-1)
    idx = torch.argmin(dist, dim=1)  # first occurrence on ties
    code = codebook[idx]
    if single:
        return idx[0], code[0]
    return idx, code


@dataclass
class QuantizationTrace:
    z0: torch.Tensor
    e: list[torch.Tensor]
    r: list[torch.Tensor]  # r[0] = z0, r[l] after stage l
    zq_sum: list[torch.Tensor]
    zq_cat: list[torch.Tensor]
    codes: torch.Tensor  # (B, L) long


def quantize_residual_chain(z0: torch.Tensor, codebooks) -> QuantizationTrace:
    """Cascade of nearest-codeword stages, each quantizing what the previous left over.

    The residual chain is built on detached codewords so ``r`` carries gradient
    only to ``z0``; ``e`` keeps its gradient to the codebooks.
    """
    r = z0
    es, rs, sums, cats, idxs = [], [z0], [], [], []
    total = None
    for cb in codebooks:
        with torch.no_grad():
            idx, _ = quantize(r.detach(), cb.detach())
        e = cb[idx]
        r = r - e.detach()
        total = e if total is None else total + e
        es.append(e)
        rs.append(r)
        sums.append(total)
        cats.append(torch.cat(es, dim=-1))
        idxs.append(idx)
    return QuantizationTrace(z0, es, rs, sums, cats, torch.stack(idxs, dim=-1))


class TagProjector(nn.Module):
    def __init__(self, d_tag: int, d: int):
        super().__init__()
        self.linear = nn.Linear(d_tag, d)

    def forward(self, t):
        return F.normalize(self.linear(t), dim=-1, eps=losses.COS_EPS)


class ResidualBlock(nn.Module):
    def __init__(self, h: int, p: float):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(h, h), nn.LayerNorm(h), nn.ReLU(), nn.Dropout(p), nn.Linear(h, h))

    def forward(self, x):
        return x + self.net(x)


class LevelTagPredictor(nn.Module):
    """Classifier for level ``level`` (1-based) over the concatenated codewords ``e_1..e_level``.

    Self-attention across the ``level`` codeword slots, then a feature layer,
    two residual blocks and a head. Width is ``2*d*(level+1)``; dropout grows by
    0.05 per level from 0.1. The last layer starts at zero so an untrained
    predictor is uniform.
    """

    def __init__(self, level: int, d: int, n_classes: int):
        super().__init__()
        self.level = level
        self.d = d
        h = 2 * d * (level + 1)
        p = 0.1 + 0.05 * (level - 1)
        self.attn = nn.MultiheadAttention(d, num_heads=1, batch_first=True)
        self.feature = nn.Sequential(nn.Linear(level * d, h), nn.LayerNorm(h), nn.ReLU(), nn.Dropout(p))
        self.blocks = nn.Sequential(ResidualBlock(h, p), ResidualBlock(h, p))
        self.head = nn.Sequential(nn.Linear(h, h // 2), nn.LayerNorm(h // 2), nn.ReLU(), nn.Dropout(p / 2),
                                  nn.Linear(h // 2, n_classes))
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, zq_cat):
        tokens = zq_cat.view(zq_cat.shape[0], self.level, self.d)
        attended, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        x = (tokens + attended).flatten(1)
        return self.head(self.blocks(self.feature(x)))


class HiDVAE(nn.Module):
    def __init__(self, config: TokenizerConfig, n_classes: list[int], d_tag: int):
        super().__init__()
        c = config
        self.config = c
        self.n_classes = list(n_classes)
        self.d_tag = d_tag
        self.encoder = mlp([c.d_in, *c.hidden, c.d])
        self.decoder = mlp([c.d, *reversed(c.hidden), c.d_in])
        self.codebooks = nn.ParameterList([nn.Parameter(torch.randn(k, c.d) * 0.1) for k in c.K])
        n_sup = self.n_supervised
        self.projectors = nn.ModuleList([TagProjector(d_tag, c.d) for _ in range(n_sup)])
        self.predictors = nn.ModuleList([LevelTagPredictor(l + 1, c.d, n_classes[l]) for l in range(n_sup)])

    @property
    def n_supervised(self) -> int:
        return min(self.config.L, len(self.n_classes))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.d_in:
            raise ValueError(f"expected feature dim {self.config.d_in}, got {x.shape[-1]}")
        return self.encoder(x)

    def quantize(self, z0: torch.Tensor) -> QuantizationTrace:
        return quantize_residual_chain(z0, list(self.codebooks))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x):
        trace = self.quantize(self.encode(x))
        z0 = trace.z0
        # straight-through: decoder sees sum(e), gradient goes to the encoder
        z_st = z0 + (trace.zq_sum[-1] - z0).detach()
        return trace, self.decode(z_st)

    @torch.no_grad()
    def codes(self, x: torch.Tensor, chunk: int = 1024) -> torch.Tensor:
        out = []
        for i in range(0, x.shape[0], chunk):
            out.append(self.quantize(self.encode(x[i:i + chunk])).codes)
        return torch.cat(out) if out else torch.zeros(0, self.config.L, dtype=torch.long)

    @torch.no_grad()
    def calibrate_encoder(self, x: torch.Tensor) -> float:
        """Data-dependent encoder init: orthogonal weights, zero biases, then
        the last layer rescaled so ``z0`` has mean norm ``Z0_INIT_NORM * sqrt(d)``
        on ``x`` (unit per-dimension scale by default).

        Default initialization leaves ``z0`` nearly constant across items, so
        codebooks fitted to it sit in a tiny ball and most codes die as soon
        as the encoder spreads out. Returns the applied scale.
        """
        linears = [m for m in self.encoder if isinstance(m, nn.Linear)]
        for lin in linears:
            nn.init.orthogonal_(lin.weight, gain=nn.init.calculate_gain("relu"))
            nn.init.zeros_(lin.bias)
        norm = self.encode(x).norm(dim=-1).mean().item() if x.shape[0] else 0.0
        target = Z0_INIT_NORM * self.config.d ** 0.5
        scale = target / norm if norm > 1e-12 else 1.0
        linears[-1].weight.mul_(scale)
        return scale

    @torch.no_grad()
    def set_codebooks(self, books: list[np.ndarray]) -> None:
        for param, book in zip(self.codebooks, books):
            param.copy_(torch.as_tensor(book, dtype=param.dtype))

    @torch.no_grad()
    def predict_tags(self, x: torch.Tensor) -> torch.Tensor:
        """Argmax tag per supervised level, ``(B, n_supervised)``."""
        trace = self.quantize(self.encode(x))
        preds = [head(trace.zq_cat[l]).argmax(-1) for l, head in enumerate(self.predictors)]
        return torch.stack(preds, dim=-1)


SUPERVISION_STE = True


def supervision_inputs(trace: QuantizationTrace):
    """Tag-loss inputs with straight-through gradient to the encoder.

    Values equal ``zq_sum`` / ``zq_cat``; gradients reach both the codebooks
    and (via the first stage) ``z0``.
    """
    if not SUPERVISION_STE:
        return trace.zq_sum, trace.zq_cat
    ste = trace.z0 - trace.z0.detach()
    sums = [s + ste for s in trace.zq_sum]
    first = trace.e[0] + ste
    cats = [torch.cat([first, *trace.e[1:l + 1]], dim=-1) for l in range(len(trace.e))]
    return sums, cats


def total_loss(model: HiDVAE, x: torch.Tensor, tags: torch.Tensor | None, tag_embed: list[torch.Tensor],
               config: TokenizerConfig | None = None, item_ids=None):
    """Composite objective for one batch. Returns ``(loss, breakdown, trace)``.

    ``tags`` is ``(B, n_levels)`` tag indices; ``tag_embed[l]`` holds all tag
    embeddings of level ``l``.
    """
    c = config or model.config
    n_sup = model.n_supervised
    if n_sup and c.beta_sup > 0:
        if tags is None:
            raise ValueError("batch carries no tags")
        bad = (tags[:, :n_sup] < 0).any(dim=1).nonzero().flatten()
        if len(bad):
            who = item_ids[int(bad[0])] if item_ids is not None else int(bad[0])
            raise ValueError(f"item {who!r} is missing tags")
    trace, x_hat = model(x)
    rec = losses.recon_loss(x, x_hat)
    commit = losses.commitment_loss(trace.r[:-1], trace.e)
    cb = losses.codebook_loss(trace.r[:-1], trace.e)
    uniq = losses.uniqueness_loss(trace.z0, trace.codes, c.m)
    align = x.new_zeros(())
    pred = x.new_zeros(())
    per_level = []
    if n_sup and c.beta_sup > 0:
        sums, cats = supervision_inputs(trace)
        gamma = c.gamma_focal if c.focal else None
        for l in range(n_sup):
            t = tag_embed[l][tags[:, l]]
            a = losses.tag_alignment_loss(sums[l], t, model.projectors[l], c.tau)
            p = losses.tag_prediction_loss(cats[l], tags[:, l], model.predictors[l], gamma)
            align = align + a
            pred = pred + p
            per_level.append((a.item(), p.item()))
    loss = rec + c.beta_commit * commit + c.beta_codebook * cb + c.beta_sup * (align + pred) + c.beta_unique * uniq
    breakdown = {
        "loss": loss.item(),
        "recon": rec.item(),
        "commit": commit.item(),
        "codebook": cb.item(),
        "align": align.item(),
        "pred": pred.item(),
        "unique": uniq.item(),
        "n_colliding_pairs": int(losses.colliding_pairs(trace.codes).shape[0]),
    }
    for l, (a, p) in enumerate(per_level):
        breakdown[f"align_{l + 1}"] = a
        breakdown[f"pred_{l + 1}"] = p
    return loss, breakdown, trace
