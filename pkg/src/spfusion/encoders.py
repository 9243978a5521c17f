"""Toy-scale image and point encoders.

The image side is a frozen, randomly initialised patch transformer followed
by a trainable linear + layer-norm head.  The point side voxelises the cloud,
then alternates a 3x3x3 occupied-neighbour stencil with multi-head
self-attention over (optionally pooled) occupied voxels, and scatters back to
points through the inverse map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import FeatureMatrix, Modality, Role, parameter_digest


@dataclass(frozen=True)
class EncoderConfig:
    d_hidden: int = 64
    n_blocks_3d: int = 3
    n_heads: int = 4
    voxel_size: float = 0.2
    patch_size_2d: int = 8
    freeze_2d: bool = True
    seed: int = 0
    d_image: int = 96
    n_blocks_2d: int = 2
    attention_stride: int = 4

    def __post_init__(self):
        if self.d_hidden % self.n_heads or self.d_image % self.n_heads:
            raise ValueError("d_hidden and d_image must be divisible by n_heads")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.patch_size_2d < 1 or self.attention_stride < 1 or self.n_blocks_3d < 0:
            raise ValueError("patch_size_2d and attention_stride must be >= 1, n_blocks_3d >= 0")


# ---------------------------------------------------------------------------
# voxels

@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupied_voxel_coords: np.ndarray
    point_to_voxel: np.ndarray
    voxel_features: torch.Tensor | None = None

    @property
    def n_voxels(self) -> int:
        return int(self.occupied_voxel_coords.shape[0])

    def with_features(self, features) -> "VoxelGrid":
        if features.shape[0] != self.n_voxels:
            raise ValueError("one feature row per occupied voxel required")
        return VoxelGrid(self.occupied_voxel_coords, self.point_to_voxel, features)


def voxelize(points, voxel_size: float) -> VoxelGrid:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    coords = np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)
    occupied, inverse = np.unique(coords, axis=0, return_inverse=True)
    return VoxelGrid(occupied, inverse.reshape(-1))


_STENCIL = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


def _coord_keys(coords: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    c = coords - lo
    return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]


def neighbor_table(coords: np.ndarray) -> np.ndarray:
    """``M x 27`` indices of occupied stencil neighbours; missing neighbours point at row ``M``."""
    M = coords.shape[0]
    lo = coords.min(0) - 1
    span = coords.max(0) - lo + 2
    keys = _coord_keys(coords, lo, span)  # sorted, since coords are lexicographically sorted
    nb = (coords[:, None, :] + _STENCIL[None]).reshape(-1, 3)
    nk = _coord_keys(nb, lo, span)
    pos = np.clip(np.searchsorted(keys, nk), 0, M - 1)
    hit = keys[pos] == nk
    return np.where(hit, pos, M).reshape(M, 27)


def coarse_map(coords: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return np.arange(coords.shape[0])
    _, inv = np.unique(np.floor_divide(coords, stride), axis=0, return_inverse=True)
    return inv.reshape(-1)


@dataclass(frozen=True, eq=False)
class PointGeometry:
    """Everything the point encoder needs that does not depend on parameters."""

    grid: VoxelGrid
    neighbors: np.ndarray
    coarse: np.ndarray
    n_coarse: int


def prepare_points(points, config: EncoderConfig) -> PointGeometry:
    grid = voxelize(points, config.voxel_size)
    coarse = coarse_map(grid.occupied_voxel_coords, config.attention_stride)
    n_coarse = int(coarse.max()) + 1 if len(coarse) else 0
    return PointGeometry(grid, neighbor_table(grid.occupied_voxel_coords), coarse, n_coarse)


def scatter_mean(values: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    out = values.new_zeros((n, values.shape[1])).index_add_(0, index, values)
    counts = torch.bincount(index, minlength=n).to(values.dtype).clamp_min(1)
    return out / counts[:, None]


# ---------------------------------------------------------------------------
# building blocks

class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        T, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(T, 3, h, d // h).permute(1, 2, 0, 3)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.permute(1, 0, 2).reshape(T, d))


class TransformerBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def sinusoidal_2d(h: int, w: int, d: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position code, half the channels per axis."""
    quarter = d // 4
    freq = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    parts = [torch.sin(ys[..., None] * freq), torch.cos(ys[..., None] * freq),
             torch.sin(xs[..., None] * freq), torch.cos(xs[..., None] * freq)]
    pe = torch.cat(parts, -1)
    if pe.shape[-1] < d:
        pe = F.pad(pe, (0, d - pe.shape[-1]))
    return pe.reshape(h * w, d)


# ---------------------------------------------------------------------------
# image branch

class ImageEncoder(nn.Module):
    """Stand-in for a frozen foundation encoder: patch embedding plus attention blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        p, d = config.patch_size_2d, config.d_image
        self.patch = p
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.embed = nn.Linear(3 * p * p, d)
            self.blocks = nn.ModuleList(TransformerBlock(d, config.n_heads) for _ in range(config.n_blocks_2d))
            self.norm = nn.LayerNorm(d)
        self._pos_cache: dict[tuple[int, int], torch.Tensor] = {}
        if config.freeze_2d:
            self.requires_grad_(False)

    def _pos(self, h, w, d, like):
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_2d(h, w, d)
        return self._pos_cache[key].to(like.dtype)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        H, W, _ = image.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
        h, w = H // p, W // p
        patches = image.reshape(h, p, w, p, 3).permute(0, 2, 1, 3, 4).reshape(h * w, 3 * p * p)
        x = self.embed(patches - 0.5)
        x = x + self._pos(h, w, x.shape[1], x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).reshape(h, w, -1)


def encode_image(image, config: EncoderConfig, params: ImageEncoder) -> torch.Tensor:
    if not torch.is_tensor(image):
        image = torch.as_tensor(np.asarray(image), dtype=next(params.parameters()).dtype)
    if config.freeze_2d:
        with torch.no_grad():
            return params(image)
    return params(image)


class ProjectionHead(nn.Module):
    """Linear map followed by layer normalisation, applied per feature cell."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out)
        self.norm = nn.LayerNorm(d_out)

    def pre_affine(self, x: torch.Tensor) -> torch.Tensor:
        y = self.linear(x)
        return F.layer_norm(y, y.shape[-1:], eps=self.norm.eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.linear(x))


def project_2d_head(feature_map: torch.Tensor, params: ProjectionHead) -> torch.Tensor:
    return params(feature_map)


# ---------------------------------------------------------------------------
# point branch

class VoxelBlock(nn.Module):
    """Occupied-neighbour stencil aggregation, then attention over pooled voxels; both residual."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.stencil = nn.Linear(27 * d, d)
        self.norm = nn.LayerNorm(d)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)

    def forward(self, v, neighbors, coarse, n_coarse):
        padded = torch.cat([v, v.new_zeros((1, v.shape[1]))], 0)
        local = self.stencil(padded[neighbors].reshape(v.shape[0], -1))
        v = v + F.gelu(self.norm(local))
        tokens = scatter_mean(v, coarse, n_coarse) if n_coarse != v.shape[0] else v
        return v + self.attn(self.attn_norm(tokens))[coarse]


class PointEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.d_hidden
        self.config = config
        self.embed = nn.Sequential(nn.Linear(6, d), nn.GELU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(VoxelBlock(d, config.n_heads) for _ in range(config.n_blocks_3d))
        self.norm = nn.LayerNorm(d)

    def forward(self, points: torch.Tensor, geom: PointGeometry) -> torch.Tensor:
        vs = self.config.voxel_size
        p2v = torch.as_tensor(geom.grid.point_to_voxel)
        centers = (torch.as_tensor(geom.grid.occupied_voxel_coords, dtype=points.dtype) + 0.5) * vs
        local = (points - centers[p2v]) / vs
        h = self.embed(torch.cat([local, points * 0.1], 1))
        v = scatter_mean(h, p2v, geom.grid.n_voxels)
        nb = torch.as_tensor(geom.neighbors)
        coarse = torch.as_tensor(geom.coarse)
        for blk in self.blocks:
            v = blk(v, nb, coarse, geom.n_coarse)
        return self.norm(v[p2v] + h)


def encode_points(points, config: EncoderConfig, params: PointEncoder,
                  geometry: PointGeometry | None = None) -> FeatureMatrix:
    if not torch.is_tensor(points):
        points = torch.as_tensor(np.asarray(points), dtype=next(params.parameters()).dtype)
    if points.shape[0] < 1:
        raise ValueError("encode_points needs at least one point")
    geom = geometry or prepare_points(points.detach().cpu().numpy(), config)
    return FeatureMatrix(params(points, geom), Modality.M3D, Role.RAW)


def module_digest(module: nn.Module) -> str:
    return parameter_digest(module.state_dict())
