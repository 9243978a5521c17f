"""Shared/private decomposition and the two subspace regularizers."""
from __future__ import annotations

import torch
from torch import nn

from .datamodel import FeatureMatrix, Modality, Role, ValidationError


class ProjectNorm(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out)
        self.norm = nn.LayerNorm(d_out)

    def forward(self, x):
        return self.norm(self.linear(x))


class DecompParams(nn.Module):
    def __init__(self, d_hidden: int, d_decomp: int):
        super().__init__()
        self.d_decomp = d_decomp
        self.shared_proj_2d = ProjectNorm(d_hidden, d_decomp)
        self.private_proj_2d = ProjectNorm(d_hidden, d_decomp)
        self.shared_proj_3d = ProjectNorm(d_hidden, d_decomp)
        self.private_proj_3d = ProjectNorm(d_hidden, d_decomp)

    def pair(self, modality: Modality) -> tuple[ProjectNorm, ProjectNorm]:
        if modality is Modality.M2D:
            return self.shared_proj_2d, self.private_proj_2d
        if modality is Modality.M3D:
            return self.shared_proj_3d, self.private_proj_3d
        raise ValueError(f"unknown modality {modality!r}")


def decompose(raw: FeatureMatrix, params: DecompParams) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Rowwise shared and private projections of one modality's raw features."""
    if raw.role is not Role.RAW:
        raise ValidationError([f"decompose expects RAW features, got {raw.role.name}"], "decompose")
    shared_proj, private_proj = params.pair(raw.modality)
    if raw.values.shape[1] != shared_proj.linear.in_features:
        raise ValidationError([f"feature width {raw.values.shape[1]} does not match the "
                               f"{raw.modality.name} projections ({shared_proj.linear.in_features})"], "decompose")
    x = raw.values
    return (FeatureMatrix(shared_proj(x), raw.modality, Role.SHARED),
            FeatureMatrix(private_proj(x), raw.modality, Role.PRIVATE))


def _values(x):
    if isinstance(x, FeatureMatrix):
        x = x.values
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def gram_loss(s2d, s3d) -> torch.Tensor:
    """``||S2D^T S2D - S3D^T S3D||_F^2 / Cs^2``; the row counts may differ."""
    a, b = _values(s2d), _values(s3d)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a.T @ a - b.T @ b
    return (diff * diff).sum() / a.shape[1] ** 2


def decorrelation_loss(r2d, r3d) -> torch.Tensor:
    """``||R2D^T R3D||_F^2 / Cp^2`` over rowwise-paired private features."""
    a, b = _values(r2d), _values(r3d)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    cross = a.T @ b
    return (cross * cross).sum() / a.shape[1] ** 2


class Reconstruction(nn.Module):
    """Optional learned lift ``d_decomp -> d_hidden`` for ``||W (S + R) - F||^2`` experiments."""

    def __init__(self, d_decomp: int, d_hidden: int):
        super().__init__()
        self.lift = nn.Linear(d_decomp, d_hidden)

    def forward(self, shared, private, raw):
        err = self.lift(shared + private) - raw
        return (err * err).mean()
