"""Shared attention fusion (3D queries over 2D keys) and the segmentation heads."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import FeatureMatrix, Modality, Role

log = logging.getLogger(__name__)

WARNINGS: Counter = Counter()


class SAFParams(nn.Module):
    def __init__(self, d_decomp: int, d_attn: int, d_fused: int | None = None):
        super().__init__()
        d_fused = d_fused or 2 * d_decomp
        if min(d_decomp, d_attn, d_fused) <= 0:
            raise ValueError("SAF dimensions must be positive")
        self.d_attn, self.d_fused = d_attn, d_fused
        self.query_proj = nn.Linear(d_decomp, d_attn)
        self.key_proj = nn.Linear(d_decomp, d_attn)
        self.value_proj_2d = nn.Linear(d_decomp, d_fused)
        self.value_proj_3d = nn.Linear(d_decomp, d_fused)
        self.gate_proj = nn.Linear(d_decomp + d_fused, d_fused)


@dataclass(frozen=True, eq=False)
class FusionOutput:
    fused_shared: torch.Tensor
    attention: torch.Tensor | None
    gate: torch.Tensor


def _t(x):
    return x.values if isinstance(x, FeatureMatrix) else x


def locality_bias(query_pos, key_pos, sigma: float) -> torch.Tensor:
    """Gaussian image-plane proximity bias ``-|dq|^2 / (2 sigma^2)``.

    Rows whose query position is NaN (no camera correspondence) get zero bias.
    """
    q = torch.as_tensor(query_pos)
    k = torch.as_tensor(key_pos, dtype=q.dtype)
    d2 = ((q[:, None, :] - k[None]) ** 2).sum(-1)
    bias = -d2 / (2.0 * sigma * sigma)
    return torch.nan_to_num(bias, nan=0.0)


def saf_attention(s3d, s2d, params: SAFParams, *, logit_bias=None, gate_override: float | None = None,
                  form: str = "gated", need_attention: bool = True) -> FusionOutput:
    """Attend from 3D shared rows to 2D shared rows and blend through a sigmoid gate.

    ``A = softmax(Q(s3d) K(s2d)^T / sqrt(d_attn) + logit_bias)``, ``C = A V2(s2d)``,
    ``G = sigmoid(gate([s3d ; C]))``, output ``G * C + (1 - G) * V3(s3d)``.
    ``form="scalar_blend"`` replaces ``G`` by its row mean.  ``logit_bias``
    broadcasts against ``N3 x N2`` and is how key multiplicities and image-plane
    locality enter.
    """
    q_in, k_in = _t(s3d), _t(s2d)
    v3 = params.value_proj_3d(q_in)
    if k_in.shape[0] == 0:
        WARNINGS["camera_blind"] += 1
        log.warning("SAF called with no 2D keys; falling back to projected 3D features")
        empty = q_in.new_zeros((q_in.shape[0], 0))
        return FusionOutput(v3, empty if need_attention else None, torch.zeros_like(v3))
    logits = params.query_proj(q_in) @ params.key_proj(k_in).T / math.sqrt(params.d_attn)
    if logit_bias is not None:
        logits = logits + logit_bias
    attn = torch.softmax(logits, dim=-1)
    context = attn @ params.value_proj_2d(k_in)
    if gate_override is not None:
        gate = torch.full_like(context, float(gate_override))
    else:
        gate = torch.sigmoid(params.gate_proj(torch.cat([q_in, context], 1)))
        if form == "scalar_blend":
            gate = gate.mean(1, keepdim=True).expand_as(context)
        elif form != "gated":
            raise ValueError(f"unknown fusion form {form!r}")
    fused = gate * context + (1 - gate) * v3
    return FusionOutput(fused, attn if need_attention else None, gate)


def compress_keys(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique feature cells among valid points, their multiplicities and the inverse map.

    Keys gathered from one cell are identical rows, so attending over the unique
    cells with a ``log(count)`` logit bias reproduces per-point attention exactly.
    """
    uniq, inverse, counts = np.unique(cells, return_inverse=True, return_counts=True)
    return uniq, counts, inverse.reshape(-1)


def concat_fused(fused_shared, r3d) -> FeatureMatrix:
    a, b = _t(fused_shared), _t(r3d)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row mismatch: {a.shape[0]} vs {b.shape[0]}")
    return FeatureMatrix(torch.cat([a, b], 1), Modality.M3D, Role.FUSED)


class SegHead3D(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, n_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, n_classes)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(_t(x))))


class SegHead2D(nn.Module):
    def __init__(self, d_in: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(d_in, n_classes)

    def forward(self, feature_map):
        return self.fc(feature_map)


def segment_head_3d(fused, params: SegHead3D) -> torch.Tensor:
    return params(fused)


def segment_head_2d(feature_map, params: SegHead2D) -> torch.Tensor:
    return params(feature_map)


def upsample_nearest(logits: torch.Tensor, factor: tuple[int, int]) -> torch.Tensor:
    """``H' x W' x C`` -> ``H'fh x W'fw x C`` by cell replication."""
    fh, fw = factor
    return logits.repeat_interleave(fh, 0).repeat_interleave(fw, 1)
