"""Multi-domain cross-entropy and the supervised contrastive regularizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and non-negative, got {self.lam}")


def ce_loss(preds: list[Tensor], targets: list[np.ndarray]) -> Tensor:
    """Domain-balanced cross-entropy over per-domain probability maps.

    Each domain term is normalized by its sub-batch size, its class count
    and the pixel count; the domain terms are then averaged.
    """
    if len(preds) != len(targets) or not preds:
        raise ShapeError("ce_loss", "domains", len(preds), len(targets))
    terms = []
    for p, y in zip(preds, targets):
        if p.shape != y.shape:
            raise ShapeError("ce_loss", "N,C,H,W", p.shape, y.shape)
        n, c, h, w = p.shape
        mask = Tensor(np.asarray(y, dtype=p.dtype))
        ll = (T.log(p, LOG_FLOOR) * mask).sum()
        terms.append(ll * (-1.0 / (n * c * h * w)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[N, H, W]`` integer labels -> ``[N, C, H, W]`` one-hot."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError("one_hot", "label range", f"0..{num_classes - 1}", (labels.min(), labels.max()))
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def contrastive_loss(z: Tensor, domains, tau: float = 0.1) -> Tensor:
    """Supervised contrastive loss with domain membership as the label.

    Cosine similarities are scaled by ``1/tau``. For every anchor the
    log-probability of each same-domain sample among all other samples is
    averaged; anchors without a same-domain partner are skipped and the
    outer mean runs over the remaining anchors.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    domains = np.asarray(domains)
    n = z.shape[0]
    if z.ndim != 2 or n < 2:
        raise ValueError(f"contrastive loss needs at least 2 embeddings, got shape {z.shape}")
    if len(domains) != n:
        raise ShapeError("contrastive_loss", "n", n, len(domains))
    sq = (z * z).sum(axis=1, keepdims=True)
    if np.any(sq.data <= 0):
        raise ValueError("contrastive loss is undefined for zero-norm embeddings")
    zn = z / T.sqrt(sq)
    logits = (zn @ zn.T) * (1.0 / tau)

    others = ~np.eye(n, dtype=bool)
    pos = (domains[:, None] == domains[None, :]) & others
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        return (z * 0.0).sum()

    # detached row shift for a stable log-sum-exp
    shift = np.where(others, logits.data, -np.inf).max(axis=1, keepdims=True)
    shifted = logits - Tensor(shift.astype(z.dtype))
    denom = (T.exp(shifted) * Tensor(others.astype(z.dtype))).sum(axis=1, keepdims=True)
    log_prob = shifted - T.log(denom)
    weights = np.where(anchors[:, None], pos / np.maximum(n_pos, 1)[:, None], 0.0) / anchors.sum()
    return (log_prob * Tensor(weights.astype(z.dtype))).sum() * -1.0


def total_loss(ce: Tensor, contrastive: Tensor | None, w: LossWeights) -> Tensor:
    if contrastive is None or w.lam == 0:
        return ce
    return ce + contrastive * w.lam
