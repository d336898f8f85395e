"""Temperature-scaled contrastive loss with silent-positive centroid aggregation.

Silent source excerpts embed to one shared point per batch: their embeddings
are averaged into a centroid that serves as the common target of every
silent-positive anchor and as a distractor for everyone else. Non-silent
positives keep their own column. With aggregation off (variant A2) or no
silent items, this reduces to the standard batch-wise softmax contrastive
loss over a B x B similarity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


@dataclass
class LossSpec:
    temperature: float = 0.2
    aggregate_silent: bool = True  # False reproduces the A2 ablation

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class DistractorSet:
    columns: np.ndarray          # (K, d_e) candidate embeddings
    target_index: np.ndarray     # (B,) column each anchor must win
    aggregation: Optional[np.ndarray]  # (K, B) matrix with columns = aggregation @ positives,
                                       # None when the layout is the identity (no centroid)


def build_distractors(pos_embeddings: np.ndarray, silent_mask: np.ndarray,
                      aggregate: bool) -> DistractorSet:
    pos = np.asarray(pos_embeddings)
    mask = np.asarray(silent_mask, dtype=bool)
    b = pos.shape[0]
    if b < 1:
        raise ValueError("need at least one pair")
    if not aggregate or not mask.any():
        return DistractorSet(columns=pos, target_index=np.arange(b), aggregation=None)

    nonsilent = np.flatnonzero(~mask)
    silent = np.flatnonzero(mask)
    k = len(nonsilent) + 1
    agg = np.zeros((k, b), dtype=pos.dtype)
    target = np.empty(b, dtype=np.int64)
    for col, i in enumerate(nonsilent):
        agg[col, i] = 1.0
        target[i] = col
    agg[k - 1, silent] = 1.0 / len(silent)
    target[silent] = k - 1
    return DistractorSet(columns=agg @ pos, target_index=target, aggregation=agg)


def msa_loss(anchor_embeddings: np.ndarray, dset: DistractorSet, w: np.ndarray,
             spec: LossSpec) -> float:
    """Mean row-wise softmax cross-entropy over the bilinear similarity matrix."""
    anchors = np.asarray(anchor_embeddings)
    s = anchors @ (w @ dset.columns.T)
    if not np.all(np.isfinite(s)):
        raise ValueError("numerical_blowup")
    z = s / spec.temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(z.shape[0]), dset.target_index]
    return float(np.mean(lse - picked))


def loss_graph(tape: Tape, anchors: Tensor, positives: Tensor, silent_mask: np.ndarray,
               w: Tensor, spec: LossSpec) -> Tensor:
    """Differentiable version of msa_loss built on the tape ops."""
    dset = build_distractors(positives.data, silent_mask, spec.aggregate_silent)
    if dset.aggregation is None:
        columns = positives
    else:
        columns = ad.matmul(tape, ad.constant(dset.aggregation), positives)
    sims = ad.matmul(tape, ad.matmul(tape, anchors, w), ad.transpose(tape, columns))
    logits = ad.scale(tape, sims, 1.0 / spec.temperature)
    return ad.softmax_cross_entropy(tape, logits, dset.target_index)


def finite_difference_check(params, batch, spec: LossSpec, h: float = 1e-4,
                            mode: str = "central") -> float:
    """Worst relative disagreement between analytic and finite-difference gradients.

    Perturbs every scalar parameter in 64-bit arithmetic and returns
    max |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8).
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError("h must lie in [1e-5, 1e-2]")
    if mode not in ("central", "forward"):
        raise ValueError(f"unknown finite-difference mode {mode!r}")
    from . import model  # deferred: model imports this module

    p64 = params.astype(np.float64)
    loss0, grads = model.forward_backward(p64, batch, spec)

    def loss_at() -> float:
        value, _ = model.forward_backward(p64, batch, spec, compute_grads=False)
        return value

    worst = 0.0
    for name, arr in p64.tensors.items():
        flat = arr.reshape(-1)
        grad = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            if mode == "central":
                flat[i] = orig - h
                fd = (up - loss_at()) / (2.0 * h)
            else:
                fd = (up - loss0) / h
            flat[i] = orig
            rel = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
