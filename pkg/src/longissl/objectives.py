"""Loss functions for the pretext tasks."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .data import ValidationError

EPS = 1e-7
DEFAULT_TEMPERATURE = 0.5


def bce_loss(y, y_hat, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy on probabilities, clamped to [eps, 1 - eps]; batch mean."""
    y_hat = torch.as_tensor(y_hat)
    y = torch.as_tensor(y, dtype=y_hat.dtype)
    p = y_hat.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def bce_with_logits(y, logits) -> torch.Tensor:
    """Same loss computed from logits (numerically safer inside training loops)."""
    logits = torch.as_tensor(logits)
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(y, dtype=logits.dtype))


def perm_ce_loss(logits, target_index) -> torch.Tensor:
    """-log softmax(logits)[target]; batch mean. ``logits`` is (n!,) or (B, n!)."""
    logits = torch.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target_index, dtype=torch.long).reshape(-1)
    if target.numel() != logits.shape[0]:
        raise ValidationError("one target per row of logits required")
    if (target < 0).any() or (target >= logits.shape[1]).any():
        raise ValidationError(f"target index out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, target)


def ntxent_loss(z_i, z_j, temperature: float = DEFAULT_TEMPERATURE, negatives: str = "all") -> torch.Tensor:
    """Bidirectional NT-Xent over B positive pairs; mean over pairs of l(i,j) + l(j,i).

    ``negatives="all"`` pools both views (2B - 1 denominator terms per anchor);
    ``"same_view"`` uses the positive plus the anchor's own view only.
    """
    z_i, z_j = torch.as_tensor(z_i), torch.as_tensor(z_j)
    if z_i.shape != z_j.shape or z_i.ndim != 2:
        raise ValidationError("z_i and z_j must both be (B, dim)")
    b = z_i.shape[0]
    if b < 2:
        raise ValidationError("NT-Xent needs a batch of at least two pairs")
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    z = torch.cat([z_i, z_j], dim=0)
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValidationError("zero-norm projection; cosine similarity undefined")
    z = z / norms
    sim = z @ z.T / temperature
    idx = torch.arange(2 * b, device=z.device)
    positive = torch.cat([idx[b:], idx[:b]])
    if negatives == "all":
        mask = idx[:, None] == idx[None, :]
    elif negatives == "same_view":
        view = idx // b
        mask = (view[:, None] != view[None, :]) | (idx[:, None] == idx[None, :])
        mask[idx, positive] = False
    else:
        raise ValidationError(f"unknown negatives mode {negatives!r}")
    logits = sim.masked_fill(mask, float("-inf"))
    per_anchor = torch.logsumexp(logits, dim=1) - sim[idx, positive]
    # anchors 0..B-1 give l(i,j), B..2B-1 give l(j,i)
    return (per_anchor[:b] + per_anchor[b:]).mean()


def topc_loss(ntxent, perm_ce, contrastive_weight: float = 1.0, order_weight: float = 1.0):
    return contrastive_weight * ntxent + order_weight * perm_ce
