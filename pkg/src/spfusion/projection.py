"""Point-to-pixel correspondences and pixel-aligned feature gathering."""
from __future__ import annotations

import numpy as np

from .datamodel import Calibration, Correspondence, FeatureMatrix, Modality, Role

Z_MIN = 1e-3


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def camera_coordinates(points: np.ndarray, calibration: Calibration) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ calibration.rotation.T + calibration.translation


def project_points(points: np.ndarray, calibration: Calibration) -> Correspondence:
    """Nearest-pixel pinhole projection.

    A point is valid when it lies more than ``Z_MIN`` in front of the camera
    and its rounded pixel falls inside the image.  Invalid rows get ``(-1, -1)``.
    """
    q = camera_coordinates(points, calibration)
    K = calibration.intrinsics
    H, W = calibration.image_size
    z = q[:, 2]
    front = z > Z_MIN
    safe_z = np.where(front, z, 1.0)
    u = round_half_away(K[0, 0] * q[:, 0] / safe_z + K[0, 2])
    v = round_half_away(K[1, 1] * q[:, 1] / safe_z + K[1, 2])
    valid = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    uv = np.full((q.shape[0], 2), -1, dtype=np.int64)
    uv[valid, 0] = u[valid]
    uv[valid, 1] = v[valid]
    return Correspondence(uv, valid, (H, W))


def feature_cells(correspondence: Correspondence, feature_shape: tuple[int, int],
                  scale: tuple[float, float]) -> np.ndarray:
    """Flat feature-map cell index ``row * W' + col`` per point, -1 where invalid."""
    Hf, Wf = feature_shape
    sh, sw = scale
    if sh < 1 or sw < 1:
        raise ValueError(f"scale factors must be >= 1, got {scale}")
    uv, ok = correspondence.pixel_uv, correspondence.valid
    rows = np.floor(uv[:, 1] / sh).astype(np.int64)
    cols = np.floor(uv[:, 0] / sw).astype(np.int64)
    outside = ok & ((rows < 0) | (rows >= Hf) | (cols < 0) | (cols >= Wf))
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise ValueError(f"scale {scale} maps pixel {tuple(uv[i])} outside the {Hf}x{Wf} feature map")
    return np.where(ok, rows * Wf + cols, -1)


def gather_pixel_features(feature_map, correspondence: Correspondence, scale: tuple[float, float]):
    """Gather one feature row per point from an ``H' x W' x d`` map.

    Works for numpy arrays and torch tensors alike.  Returns an M2D/RAW
    ``FeatureMatrix`` (zero rows for invalid points) and the validity mask.
    """
    Hf, Wf, d = feature_map.shape
    cells = feature_cells(correspondence, (Hf, Wf), scale)
    ok = correspondence.valid
    flat = feature_map.reshape(Hf * Wf, d)
    if hasattr(flat, "new_zeros"):
        import torch

        out = flat.new_zeros((len(cells), d))
        idx = torch.as_tensor(np.flatnonzero(ok))
        out = out.index_copy(0, idx, flat[torch.as_tensor(cells[ok])])
    else:
        out = np.zeros((len(cells), d), dtype=flat.dtype)
        out[ok] = flat[cells[ok]]
    return FeatureMatrix(out, Modality.M2D, Role.RAW), ok.copy()
