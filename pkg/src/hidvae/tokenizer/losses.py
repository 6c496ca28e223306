"""Loss terms of the tokenizer objective.

Every function returns a scalar tensor averaged over the batch. Vectors are
compared with a guarded cosine: ``a.b / max(|a||b|, 1e-8)``.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

COS_EPS = 1e-8


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity, ``(n, d) x (m, d) -> (n, m)``."""
    num = a @ b.T
    den = torch.clamp(a.norm(dim=-1)[:, None] * b.norm(dim=-1)[None, :], min=COS_EPS)
    return num / den


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    return ((x - x_hat) ** 2).sum(dim=-1).mean()


def commitment_loss(residuals, codewords) -> torch.Tensor:
    """Sum over stages of ``|r_{l-1} - sg(e_l)|^2``; no gradient reaches the codebooks."""
    total = 0.0
    for r, e in zip(residuals, codewords):
        total = total + ((r - e.detach()) ** 2).sum(dim=-1).mean()
    return total


def codebook_loss(residuals, codewords) -> torch.Tensor:
    """Companion of :func:`commitment_loss` that moves codewords toward ``sg(r_{l-1})``."""
    total = 0.0
    for r, e in zip(residuals, codewords):
        total = total + ((r.detach() - e) ** 2).sum(dim=-1).mean()
    return total


def tag_alignment_loss(zq: torch.Tensor, tag_emb: torch.Tensor, projector, tau: float) -> torch.Tensor:
    """In-batch contrastive loss between quantized embeddings and projected tag embeddings.

    Row ``i`` of ``tag_emb`` is item ``i``'s own tag; every other row in the
    batch is a negative, duplicates included.
    """
    projected = projector(tag_emb) if projector is not None else tag_emb
    logits = cosine_matrix(zq, projected) / tau
    target = torch.arange(zq.shape[0], device=zq.device)
    return F.cross_entropy(logits, target)


def focal_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, gamma: float | None = None) -> torch.Tensor:
    n_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logp = F.log_softmax(logits, dim=-1).gather(1, labels[:, None]).squeeze(1)
    ce = -logp
    if gamma:
        ce = (1.0 - logp.exp()) ** gamma * ce
    return ce.mean()


def tag_prediction_loss(zq_cat: torch.Tensor, labels: torch.Tensor, classifier, gamma: float | None = None) -> torch.Tensor:
    return focal_cross_entropy(classifier(zq_cat), labels, gamma)


def colliding_pairs(codes: torch.Tensor) -> torch.Tensor:
    """Index pairs ``(i, j)``, ``i < j``, whose full code tuples are identical."""
    same = (codes[:, None, :] == codes[None, :, :]).all(dim=-1)
    same = torch.triu(same, diagonal=1)
    return same.nonzero()


def uniqueness_loss(z0: torch.Tensor, codes: torch.Tensor, m: float) -> torch.Tensor:
    pairs = colliding_pairs(codes)
    if pairs.shape[0] == 0:
        return z0.sum() * 0.0
    a, b = z0[pairs[:, 0]], z0[pairs[:, 1]]
    cos = (a * b).sum(-1) / torch.clamp(a.norm(dim=-1) * b.norm(dim=-1), min=COS_EPS)
    return torch.relu(cos - m).mean()
