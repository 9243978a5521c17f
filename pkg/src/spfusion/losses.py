"""Segmentation, cross-modal and total objectives."""
from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import DEFAULT_LOSS_WEIGHTS, IGNORE_INDEX, LOSS_TERMS, LossBundle

log = logging.getLogger(__name__)

WARNINGS: Counter = Counter()


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"loss term {term!r} is not finite ({value})")


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    """Weighted mean of per-point NLL, normalised by the applied weights; ignore-index rows skipped."""
    labels = torch.as_tensor(labels)
    w = torch.as_tensor(class_weights, dtype=logits.dtype)
    if torch.any(w < 0) or not torch.any(w > 0):
        raise ValueError("class weights must be non-negative and not all zero")
    keep = labels != IGNORE_INDEX
    if not bool(keep.any()) or float(w[labels[keep]].sum()) == 0.0:
        WARNINGS["all_ignored"] += 1
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], labels[keep], weight=w, reduction="mean")


def _lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1].clone()
    return jaccard


def lovasz_softmax(probs: torch.Tensor, labels: torch.Tensor, *, atol: float = 1e-6) -> torch.Tensor:
    """Lovasz-softmax averaged over classes present in ``labels``."""
    labels = torch.as_tensor(labels)
    if probs.ndim != 2:
        raise ValueError("probs must be N x C")
    row_sums = probs.detach().sum(1)
    if probs.shape[0] and float((row_sums - 1).abs().max()) > atol:
        raise ValueError("lovasz_softmax expects row-stochastic probabilities")
    keep = labels != IGNORE_INDEX
    probs, labels = probs[keep], labels[keep]
    losses = []
    for c in torch.unique(labels).tolist():
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
        losses.append(torch.dot(errors_sorted, _lovasz_grad(fg[perm])))
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(losses).mean()


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    return weighted_cross_entropy(logits, labels, class_weights) + lovasz_softmax(torch.softmax(logits, 1), labels)


def xm_kl_loss(logits_3d: torch.Tensor, logits_2d: torch.Tensor, mode: str = "as_written",
               swap: bool = False) -> torch.Tensor:
    """Cross-modal KL between point-branch and image-branch predictions.

    ``as_written``: ``KL(p_2d || p_3d)`` using the 3D log-probabilities against
    2D target probabilities, averaged over rows.  ``symmetric``: mean of both
    directions.  ``swap`` exchanges the roles of the two inputs.  Neither side is
    detached, so both branches receive gradient.
    """
    if logits_3d.shape != logits_2d.shape:
        raise ValueError("paired logits must have matching shapes")
    if logits_3d.shape[0] == 0:
        WARNINGS["no_pairs"] += 1
        return logits_3d.sum() * 0.0
    if swap:
        logits_3d, logits_2d = logits_2d, logits_3d
    log3, log2 = torch.log_softmax(logits_3d, 1), torch.log_softmax(logits_2d, 1)
    kl_2_3 = (log2.exp() * (log2 - log3)).sum(1).mean()
    if mode == "as_written":
        return kl_2_3
    if mode == "symmetric":
        kl_3_2 = (log3.exp() * (log3 - log2)).sum(1).mean()
        return 0.5 * (kl_2_3 + kl_3_2)
    raise ValueError(f"unknown KL mode {mode!r}")


def total_loss(parts: Mapping[str, torch.Tensor], weights: Mapping[str, float] | None = None) -> LossBundle:
    w = dict(DEFAULT_LOSS_WEIGHTS)
    w.update(weights or {})
    for name in LOSS_TERMS:
        value = float(parts[name].detach()) if torch.is_tensor(parts[name]) else float(parts[name])
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    total = (parts["seg3d"] + w["seg2d"] * parts["seg2d"] + w["xm"] * parts["xm"]
             + w["gram"] * parts["gram"] + w["diff"] * parts["diff"])
    return LossBundle(total=total, weights=w, **{k: parts[k] for k in LOSS_TERMS})


def class_weights_from_counts(counts, scheme: str = "inv_sqrt") -> np.ndarray:
    """Inverse square-root frequency renormalised to mean 1 over observed classes."""
    counts = np.asarray(counts, dtype=np.float64)
    if scheme == "uniform":
        return np.ones_like(counts)
    if scheme != "inv_sqrt":
        raise ValueError(f"unknown class weighting {scheme!r}")
    seen = counts > 0
    w = np.zeros_like(counts)
    w[seen] = 1.0 / np.sqrt(counts[seen] / counts.sum())
    w[seen] /= w[seen].mean()
    return w
