"""The full two-branch network and its per-batch objective."""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
import torch
from torch import nn

from .datamodel import FeatureMatrix, LabeledScene, Modality, Role
from .decomposition import DecompParams, Reconstruction, decompose, decorrelation_loss, gram_loss
from .encoders import (EncoderConfig, ImageEncoder, PointEncoder, PointGeometry, ProjectionHead,
                       prepare_points)
from .fusion import (SAFParams, SegHead2D, SegHead3D, compress_keys, concat_fused, locality_bias,
                     saf_attention, upsample_nearest)
from .losses import lovasz_softmax, weighted_cross_entropy, xm_kl_loss
from .projection import feature_cells, project_points

FUSION_MODES = ("shared_private", "kl_only")
QUERY_DIRECTIONS = ("q3d_k2d", "q2d_k3d", "bidirectional")
PARAM_GROUPS = ("image_encoder", "image_head", "image_seg_head", "point_encoder",
                "decomp_2d", "decomp_3d", "saf", "point_seg_head", "reconstruction")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    n_classes: int = 6
    d_decomp: int = 128
    d_attn: int = 32
    d_fused: int = 0
    head_hidden: int = 64
    fusion_mode: str = "shared_private"
    query_direction: str = "q3d_k2d"
    fusion_form: str = "gated"
    saf_locality: float = 1.0
    reconstruction_weight: float = 0.0
    regularizer_scale: str = "per_row"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.query_direction not in QUERY_DIRECTIONS:
            raise ValueError(f"query_direction must be one of {QUERY_DIRECTIONS}")
        if self.regularizer_scale not in ("per_row", "none"):
            raise ValueError("regularizer_scale must be 'per_row' or 'none'")

    @property
    def fused_width(self) -> int:
        return self.d_fused or 2 * self.d_decomp


@dataclass(frozen=True, eq=False)
class PreparedScene:
    """Parameter-independent per-scene inputs: labels, correspondences, key layout."""

    scene: LabeledScene
    cells: np.ndarray          # flat feature cell per point, -1 invalid
    valid_idx: np.ndarray      # indices of points with a correspondence
    key_cells: np.ndarray      # unique cells among valid points
    key_counts: np.ndarray
    key_inverse: np.ndarray    # valid point -> row of key_cells
    query_pos: np.ndarray      # N x 2 image position in cell units, NaN if invalid
    feature_shape: tuple[int, int]
    scale: tuple[int, int]
    point_labels: torch.Tensor
    pixel_labels: torch.Tensor


def prepare_scene(scene: LabeledScene, patch: int) -> PreparedScene:
    H, W = scene.calibration.image_size
    fshape = (H // patch, W // patch)
    corr = project_points(scene.points, scene.calibration)
    cells = feature_cells(corr, fshape, (patch, patch))
    valid_idx = np.flatnonzero(corr.valid)
    key_cells, counts, inverse = compress_keys(cells[valid_idx])
    qpos = np.full((scene.n_points, 2), np.nan)
    uv = corr.pixel_uv[valid_idx]
    qpos[valid_idx, 0] = (uv[:, 1] + 0.5) / patch
    qpos[valid_idx, 1] = (uv[:, 0] + 0.5) / patch
    return PreparedScene(scene, cells, valid_idx, key_cells, counts, inverse, qpos, fshape, (patch, patch),
                         torch.tensor(np.array(scene.point_labels)),
                         torch.tensor(np.array(scene.pixel_labels)).reshape(-1))


def cell_centers(cells: np.ndarray, feature_shape: tuple[int, int]) -> np.ndarray:
    w = feature_shape[1]
    return np.stack([cells // w + 0.5, cells % w + 0.5], 1).astype(np.float64)


class FusionSegmenter(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        enc = config.encoder
        self.config = config
        C, dh, dd = config.n_classes, enc.d_hidden, config.d_decomp
        self.image_encoder = ImageEncoder(enc)
        self.image_head = ProjectionHead(enc.d_image, dh)
        self.image_seg_head = SegHead2D(dh, C)
        self.point_encoder = PointEncoder(enc)
        self.decomp = DecompParams(dh, dd)
        self.saf = SAFParams(dd, config.d_attn, config.fused_width)
        self.point_seg_head = SegHead3D(config.fused_width + dd, config.head_hidden, C)
        self.reconstruction = (nn.ModuleDict({"m2d": Reconstruction(dd, dh), "m3d": Reconstruction(dd, dh)})
                               if config.reconstruction_weight > 0 else None)

    def param_group(self, name: str) -> str:
        head = name.split(".")[0]
        if head == "decomp":
            return "decomp_2d" if name.split(".")[1].endswith("_2d") else "decomp_3d"
        return head

    def encode_image_features(self, image: torch.Tensor) -> torch.Tensor:
        if self.config.encoder.freeze_2d:
            with torch.no_grad():
                return self.image_encoder(image)
        return self.image_encoder(image)

    def forward_scene(self, prep: PreparedScene, points: torch.Tensor, image: torch.Tensor,
                      geometry: PointGeometry | None = None, image_features: torch.Tensor | None = None) -> dict:
        cfg = self.config
        geom = geometry or prepare_points(points.detach().cpu().numpy(), cfg.encoder)
        enc2d = image_features if image_features is not None else self.encode_image_features(image)
        feat2d = self.image_head(enc2d)
        h, w, dh = feat2d.shape
        logits2d_map = self.image_seg_head(feat2d)

        raw3d = FeatureMatrix(self.point_encoder(points, geom), Modality.M3D, Role.RAW)
        s3d, r3d = decompose(raw3d, self.decomp)
        s2d_c, r2d_c = decompose(FeatureMatrix(feat2d.reshape(h * w, dh), Modality.M2D, Role.RAW), self.decomp)
        s3d, r3d, s2d_c, r2d_c = s3d.values, r3d.values, s2d_c.values, r2d_c.values

        vidx = torch.as_tensor(prep.valid_idx)
        vcells = torch.as_tensor(prep.cells[prep.valid_idx])
        s2d_pts, r2d_pts = s2d_c[vcells], r2d_c[vcells]

        fused = self._fuse(prep, s3d, s2d_c, s2d_pts, vidx)
        logits3d = self.point_seg_head(concat_fused(fused, r3d))
        out = {
            "logits3d": logits3d,
            "logits2d_map": logits2d_map,
            "logits2d_pts": logits2d_map.reshape(h * w, -1)[vcells],
            "valid_idx": vidx,
            "s2d_pts": s2d_pts, "r2d_pts": r2d_pts,
            "s3d_pts": s3d[vidx], "r3d_pts": r3d[vidx],
        }
        if self.reconstruction is not None:
            out["reconstruction"] = 0.5 * (
                self.reconstruction["m3d"](s3d, r3d, raw3d.values)
                + self.reconstruction["m2d"](s2d_c, r2d_c, feat2d.reshape(h * w, dh)))
        return out

    def _fuse(self, prep: PreparedScene, s3d, s2d_cells, s2d_pts, vidx):
        cfg = self.config
        if cfg.fusion_mode == "kl_only":
            return self.saf.value_proj_3d(s3d)
        q3d = None
        if cfg.query_direction in ("q3d_k2d", "bidirectional"):
            keys = s2d_cells[torch.as_tensor(prep.key_cells)]
            bias = torch.log(torch.as_tensor(prep.key_counts, dtype=s3d.dtype))[None]
            if cfg.saf_locality > 0 and len(prep.key_cells):
                kpos = cell_centers(prep.key_cells, prep.feature_shape)
                bias = bias + locality_bias(prep.query_pos, kpos, cfg.saf_locality).to(s3d.dtype)
            q3d = saf_attention(s3d, keys, self.saf, logit_bias=bias, form=cfg.fusion_form,
                                need_attention=False).fused_shared
            if cfg.query_direction == "q3d_k2d":
                return q3d
        # 2D queries (one per unique valid cell) over valid 3D points
        fused = self.saf.value_proj_3d(s3d) if q3d is None else q3d
        if len(vidx) == 0:
            return fused
        swapped = SimpleNamespace(query_proj=self.saf.query_proj, key_proj=self.saf.key_proj,
                                  value_proj_2d=self.saf.value_proj_3d, value_proj_3d=self.saf.value_proj_2d,
                                  gate_proj=self.saf.gate_proj, d_attn=self.saf.d_attn)
        bias = None
        if cfg.saf_locality > 0:
            qpos = cell_centers(prep.key_cells, prep.feature_shape)
            bias = locality_bias(qpos, prep.query_pos[prep.valid_idx], cfg.saf_locality).to(s3d.dtype)
        ctx = saf_attention(s2d_cells[torch.as_tensor(prep.key_cells)], s3d[vidx], swapped,
                            logit_bias=bias, gate_override=1.0, need_attention=False).fused_shared
        ctx = ctx[torch.as_tensor(prep.key_inverse)]
        gate = torch.sigmoid(self.saf.gate_proj(torch.cat([s2d_pts, ctx], 1)))
        from_2d = gate * ctx + (1 - gate) * self.saf.value_proj_2d(s2d_pts)
        if q3d is not None:
            from_2d = 0.5 * (from_2d + q3d[vidx])
        return fused.index_copy(0, vidx, from_2d)

    @torch.no_grad()
    def predict(self, prep: PreparedScene) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        pts = torch.tensor(np.array(prep.scene.points), dtype=dtype)
        img = torch.tensor(np.array(prep.scene.image), dtype=dtype)
        return self.forward_scene(prep, pts, img)["logits3d"].argmax(1).numpy()


def _scaled(x: torch.Tensor, scale: str) -> torch.Tensor:
    if scale == "per_row" and x.shape[0] > 0:
        return x / np.sqrt(x.shape[0])
    return x


def batch_terms(outputs: list[dict], preps: list[PreparedScene], class_weights_3d, class_weights_2d,
                config: ModelConfig, kl_mode: str = "as_written", xm_swap: bool = False) -> dict:
    """Unweighted loss terms over a batch of scenes, plus the CE/Lovasz split of each seg term."""
    dtype = outputs[0]["logits3d"].dtype
    logits3d = torch.cat([o["logits3d"] for o in outputs])
    labels3d = torch.cat([p.point_labels for p in preps])
    pix_logits, pix_labels = [], []
    for o, p in zip(outputs, preps):
        up = upsample_nearest(o["logits2d_map"], p.scale)
        pix_logits.append(up.reshape(-1, up.shape[-1]))
        pix_labels.append(p.pixel_labels)
    pix_logits, pix_labels = torch.cat(pix_logits), torch.cat(pix_labels)
    w3 = torch.as_tensor(class_weights_3d, dtype=dtype)
    w2 = torch.as_tensor(class_weights_2d, dtype=dtype)

    ce3d = weighted_cross_entropy(logits3d, labels3d, w3)
    lov3d = lovasz_softmax(torch.softmax(logits3d, 1), labels3d)
    ce2d = weighted_cross_entropy(pix_logits, pix_labels, w2)
    lov2d = lovasz_softmax(torch.softmax(pix_logits, 1), pix_labels)

    paired3d = torch.cat([o["logits3d"][o["valid_idx"]] for o in outputs])
    paired2d = torch.cat([o["logits2d_pts"] for o in outputs])
    xm = xm_kl_loss(paired3d, paired2d, mode=kl_mode, swap=xm_swap)

    scale = config.regularizer_scale
    cat = lambda key: _scaled(torch.cat([o[key] for o in outputs]), scale)  # noqa: E731
    s2d, s3d, r2d, r3d = cat("s2d_pts"), cat("s3d_pts"), cat("r2d_pts"), cat("r3d_pts")
    terms = {
        "seg3d": ce3d + lov3d, "seg2d": ce2d + lov2d, "xm": xm,
        "gram": gram_loss(s2d, s3d), "diff": decorrelation_loss(r2d, r3d),
        "ce3d": ce3d, "lovasz3d": lov3d, "ce2d": ce2d, "lovasz2d": lov2d,
    }
    if "reconstruction" in outputs[0]:
        terms["reconstruction"] = torch.stack([o["reconstruction"] for o in outputs]).mean()
    return terms
