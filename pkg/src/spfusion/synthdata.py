"""Desk-scale LiDAR/camera scene generator.

A scene is a ground plane plus a handful of analytic primitives.  Each
primitive is densely sampled on its surface; the LiDAR keeps the nearest
sample per angular bin (so it only sees visible surfaces) and the camera
image is a depth-adaptive point-splat z-buffer of the same samples.
Vegetation and pedestrians share one shape distribution and differ only in
appearance, which is what gives the image branch something the point
branch cannot see.

Sensor frame: x forward, y left, z up; the ground sits at ``-SENSOR_HEIGHT``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datamodel import DEFAULT_CLASS_NAMES, IGNORE_INDEX, Calibration, LabeledScene
from .projection import Z_MIN, round_half_away

GROUND, BUILDING, VEHICLE, POLE, VEGETATION, PEDESTRIAN = range(6)
SENSOR_HEIGHT = 1.7
SKY = np.array([0.55, 0.7, 0.9])

# sensor (x fwd, y left, z up) -> camera (x right, y down, z fwd)
_R_BASE = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 4096
    image_size: tuple[int, int] = (96, 128)
    n_classes: int = 6
    objects_per_scene: tuple[int, int] = (1, 3)
    noise_sigma: float = 0.02
    domain_style: str = "source"
    seed: int = 0
    focal: float = 70.0
    camera_yaw_deg: float = 0.0
    illumination_delta: float = -0.12
    target_dropout: float = 0.15
    target_yaw_shift_deg: float = 10.0
    sample_density: float = 60.0
    patch_size_2d: int = 8

    def __post_init__(self):
        H, W = self.image_size
        errors = []
        if not 2 <= self.n_classes <= len(DEFAULT_CLASS_NAMES):
            errors.append(f"n_classes must be in [2, {len(DEFAULT_CLASS_NAMES)}]")
        if self.n_points < 1:
            errors.append("n_points must be >= 1")
        if H % self.patch_size_2d or W % self.patch_size_2d:
            errors.append("image size must be divisible by patch_size_2d")
        lo, hi = self.objects_per_scene
        if not 0 <= lo <= hi:
            errors.append("objects_per_scene must satisfy 0 <= min <= max")
        if self.domain_style not in ("source", "target"):
            errors.append("domain_style must be 'source' or 'target'")
        if errors:
            raise ValueError("; ".join(errors))


class FrustumError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# primitives

def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_box(rng, center, size, yaw, density):
    """Top and four side faces of an upright box; returns points and face-local coords."""
    lx, ly, lz = size
    faces = [  # (origin, axis_u, axis_v) in box frame, z from ground up
        ((-lx / 2, -ly / 2, lz), (lx, 0, 0), (0, ly, 0)),
        ((-lx / 2, -ly / 2, 0), (lx, 0, 0), (0, 0, lz)),
        ((-lx / 2, ly / 2, 0), (lx, 0, 0), (0, 0, lz)),
        ((-lx / 2, -ly / 2, 0), (0, ly, 0), (0, 0, lz)),
        ((lx / 2, -ly / 2, 0), (0, ly, 0), (0, 0, lz)),
    ]
    pts, uv = [], []
    for origin, a, b in faces:
        a, b = np.asarray(a, float), np.asarray(b, float)
        area = np.linalg.norm(a) * np.linalg.norm(b)
        n = max(int(area * density), 4)
        s, t = rng.random(n), rng.random(n)
        p = np.asarray(origin) + s[:, None] * a + t[:, None] * b
        pts.append(p)
        uv.append(np.stack([s * np.linalg.norm(a), t * np.linalg.norm(b), p[:, 2] / lz], 1))
    p = np.concatenate(pts) @ _rot_z(yaw).T + np.asarray(center)
    return p, np.concatenate(uv)


def _sample_cylinder(rng, center, radius, height, density):
    n = max(int(2 * np.pi * radius * height * density), 8)
    th, h = rng.random(n) * 2 * np.pi, rng.random(n) * height
    p = np.stack([radius * np.cos(th), radius * np.sin(th), h], 1)
    return p + np.asarray(center), h / height


def _sample_ellipsoid(rng, center, radii, density):
    a, b, c = radii
    p_ = 1.6
    area = 4 * np.pi * (((a * b) ** p_ + (a * c) ** p_ + (b * c) ** p_) / 3) ** (1 / p_)
    n = max(int(area * density), 8)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    p = d * np.array([a, b, c])
    keep = p[:, 2] > -c * 0.98  # flat contact with the ground
    return p[keep] + np.asarray(center), (d[keep, 2] + 1) / 2


def _jitter(rng, base, n, sigma=0.03):
    return np.clip(np.asarray(base, float) + rng.normal(0.0, sigma, size=(n, 3)), 0.0, 1.0)


_VEHICLE_COLORS = [(0.75, 0.12, 0.1), (0.12, 0.22, 0.7), (0.85, 0.85, 0.82), (0.55, 0.57, 0.6), (0.2, 0.45, 0.5)]
_SHIRT_COLORS = [(0.82, 0.2, 0.2), (0.22, 0.3, 0.82), (0.88, 0.75, 0.2), (0.72, 0.22, 0.72), (0.9, 0.5, 0.15)]
_BUILDING_COLORS = [(0.76, 0.64, 0.5), (0.62, 0.36, 0.3), (0.7, 0.7, 0.66)]


def _layout(rng, cfg: SceneConfig, yaw_shift: float):
    """Sample primitive parameters with non-overlapping ground footprints."""
    lo, hi = cfg.objects_per_scene
    placed: list[tuple[float, float, float]] = []

    def place(radius, xr, yr, tries=60):
        for _ in range(tries):
            x, y = rng.uniform(*xr), rng.uniform(*yr)
            if np.hypot(x, y) < 3.0 + radius:
                continue
            if all(np.hypot(x - px, y - py) > radius + pr + 0.3 for px, py, pr in placed):
                placed.append((x, y, radius))
                return x, y
        return None

    def yaw():
        return np.deg2rad(rng.uniform(-20.0, 20.0) + yaw_shift)

    objs = []
    C = cfg.n_classes
    counts = {c: int(rng.integers(lo, hi + 1)) for c in range(1, C)}
    if BUILDING < C:
        for _ in range(counts[BUILDING]):
            size = (rng.uniform(5, 10), rng.uniform(5, 10), rng.uniform(5, 10))
            r = np.hypot(size[0], size[1]) / 2
            side = rng.random()
            if side < 0.5:
                xy = place(r, (20, 30), (-14, 14))
            else:
                xy = place(r, (8, 28), (10, 18) if side < 0.75 else (-18, -10))
            if xy:
                objs.append(("box", BUILDING, dict(center=(*xy, -SENSOR_HEIGHT), size=size, yaw=yaw(),
                                                   color=_BUILDING_COLORS[rng.integers(3)])))
    if VEHICLE < C:
        for _ in range(counts[VEHICLE]):
            size = (rng.uniform(3.8, 4.6), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7))
            xy = place(np.hypot(size[0], size[1]) / 2, (5, 18), (-7, 7))
            if xy:
                objs.append(("box", VEHICLE, dict(center=(*xy, -SENSOR_HEIGHT), size=size, yaw=yaw(),
                                                  color=_VEHICLE_COLORS[rng.integers(len(_VEHICLE_COLORS))])))
    if POLE < C:
        for _ in range(counts[POLE]):
            r, h = rng.uniform(0.1, 0.15), rng.uniform(3.5, 5.5)
            xy = place(r + 0.2, (4, 18), (-9, 9))
            if xy:
                objs.append(("cyl", POLE, dict(center=(*xy, -SENSOR_HEIGHT), radius=r, height=h)))
    for cls in (VEGETATION, PEDESTRIAN):
        if cls >= C:
            continue
        for _ in range(counts[cls]):
            a, c = rng.uniform(0.35, 0.6), rng.uniform(0.8, 1.0)
            xy = place(a, (4, 13), (-7, 7))
            if xy:
                objs.append(("ell", cls, dict(center=(*xy, -SENSOR_HEIGHT + c), radii=(a, a * rng.uniform(0.8, 1.0), c),
                                              color=_SHIRT_COLORS[rng.integers(len(_SHIRT_COLORS))])))
    return objs


def _dense_samples(rng, objs, density):
    """Dense colored surface samples: (points, labels, colors, spacing)."""
    P, L, Cl, S = [], [], [], []
    gs = 1 / np.sqrt(density * 0.5)
    gx, gy = np.meshgrid(np.arange(2, 32, gs), np.arange(-20, 20, gs))
    n = gx.size
    gp = np.stack([gx.ravel() + rng.uniform(0, gs, n), gy.ravel() + rng.uniform(0, gs, n),
                   np.full(n, -SENSOR_HEIGHT)], 1)
    P.append(gp); L.append(np.full(n, GROUND)); S.append(np.full(n, gs))
    Cl.append(_jitter(rng, (0.42, 0.42, 0.44), n, 0.04))
    spacing = 1 / np.sqrt(density)
    for kind, cls, prm in objs:
        if kind == "box":
            p, uvw = _sample_box(rng, prm["center"], prm["size"], prm["yaw"], density)
            col = _jitter(rng, prm["color"], len(p))
            if cls == BUILDING:
                win = (np.mod(uvw[:, 0], 1.6) > 0.5) & (np.mod(uvw[:, 1] * 0 + p[:, 2] + SENSOR_HEIGHT, 2.2) > 0.9)
                col[win] = _jitter(rng, (0.18, 0.24, 0.36), int(win.sum()))
            else:
                glass = uvw[:, 2] > 0.62
                col[glass] = _jitter(rng, (0.12, 0.14, 0.18), int(glass.sum()))
        elif kind == "cyl":
            p, _ = _sample_cylinder(rng, prm["center"], prm["radius"], prm["height"], density * 4)
            col = _jitter(rng, (0.33, 0.33, 0.36), len(p))
        else:
            p, h = _sample_ellipsoid(rng, prm["center"], prm["radii"], density * 2)
            if cls == VEGETATION:
                shade = 1.0 + 0.35 * rng.normal(size=len(p))
                col = np.clip(np.array([0.2, 0.52, 0.16]) * shade[:, None], 0.0, 1.0)
            else:
                col = _jitter(rng, prm["color"], len(p))
                legs, head = h < 0.45, h > 0.86
                col[legs] = _jitter(rng, (0.2, 0.2, 0.34), int(legs.sum()))
                col[head] = _jitter(rng, (0.86, 0.7, 0.56), int(head.sum()))
        P.append(p); L.append(np.full(len(p), cls)); Cl.append(col)
        S.append(np.full(len(p), spacing / (2 if kind == "cyl" else np.sqrt(2) if kind == "ell" else 1)))
    return np.concatenate(P), np.concatenate(L), np.concatenate(Cl), np.concatenate(S)


def _splat_winners(u, v, depth, radius, H, W):
    """Depth-ordered square splats; returns the winning input row per cell (-1 if empty)."""
    u = round_half_away(u).astype(np.int64)
    v = round_half_away(v).astype(np.int64)
    pix, dep, src = [], [], []
    for r in range(int(radius.max(initial=0)) + 1):
        sel = np.flatnonzero(radius == r)
        if not len(sel):
            continue
        du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
        uu = (u[sel, None] + du.ravel()[None]).ravel()
        vv = (v[sel, None] + dv.ravel()[None]).ravel()
        ss = np.repeat(sel, du.size)
        # a sample's own cell beats its neighbours' spill at equal depth
        spill = np.tile((du.ravel() != 0) | (dv.ravel() != 0), len(sel))
        dd = np.repeat(depth[sel], du.size) + spill * 1e-6
        inside = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        pix.append(vv[inside] * W + uu[inside]); dep.append(dd[inside]); src.append(ss[inside])
    winner = np.full(H * W, -1, dtype=np.int64)
    if pix:
        pix, dep, src = np.concatenate(pix), np.concatenate(dep), np.concatenate(src)
        order = np.lexsort((dep, pix))
        first = np.ones(len(order), bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        winner[pix[order[first]]] = src[order[first]]
    return winner


def _splat_radius(spacing, depth, focal, max_radius=4):
    return np.clip(np.ceil(0.5 * focal * spacing / depth - 0.5), 0, max_radius).astype(np.int64)


def _lidar_visible(points, spacing, az_range=(-60.0, 60.0), el_range=(-32.0, 14.0), res=0.5):
    """Indices of samples that own at least one LiDAR angular bin (nearest surface first)."""
    r = np.linalg.norm(points, axis=1)
    az = np.degrees(np.arctan2(points[:, 1], points[:, 0]))
    el = np.degrees(np.arctan2(points[:, 2], np.hypot(points[:, 0], points[:, 1])))
    W = int(np.ceil((az_range[1] - az_range[0]) / res))
    H = int(np.ceil((el_range[1] - el_range[0]) / res))
    win = _splat_winners((az - az_range[0]) / res, (el - el_range[0]) / res, r,
                         _splat_radius(spacing, r, 1.0 / np.deg2rad(res)), H, W)
    return np.unique(win[win >= 0])


def render(points, labels, colors, spacing, calibration: Calibration):
    """Point-splat z-buffer.  Returns (image, pixel_labels, winner) with ``winner[v, u]``
    the index of the sample owning that pixel (-1 for sky)."""
    H, W = calibration.image_size
    K = calibration.intrinsics
    q = points @ calibration.rotation.T + calibration.translation
    front = np.flatnonzero(q[:, 2] > Z_MIN)
    q = q[front]
    win = _splat_winners(K[0, 0] * q[:, 0] / q[:, 2] + K[0, 2], K[1, 1] * q[:, 1] / q[:, 2] + K[1, 2],
                         q[:, 2], _splat_radius(spacing[front], q[:, 2], K[0, 0]), H, W)
    winner = np.where(win >= 0, front[np.maximum(win, 0)], -1)
    has = winner >= 0
    rows = np.repeat(np.arange(H), W)
    image = np.tile(SKY, (H * W, 1)) * (0.9 + 0.1 * (rows / H))[:, None]
    image[has] = colors[winner[has]]
    pixel_labels = np.full(H * W, IGNORE_INDEX, dtype=np.int64)
    pixel_labels[has] = labels[winner[has]]
    return image.reshape(H, W, 3), pixel_labels.reshape(H, W), winner.reshape(H, W)


def _camera(rng, cfg: SceneConfig) -> Calibration:
    H, W = cfg.image_size
    yaw = np.deg2rad(cfg.camera_yaw_deg + rng.uniform(-4, 4))
    pitch = np.deg2rad(rng.uniform(-2, 2))
    cy_, sy_ = np.cos(pitch), np.sin(pitch)
    r_pitch = np.array([[cy_, 0, sy_], [0, 1, 0], [-sy_, 0, cy_]])
    R = _R_BASE @ _rot_z(yaw) @ r_pitch
    c = np.array([0.3, 0.0, 0.15]) + rng.normal(0, 0.02, 3)
    K = np.array([[cfg.focal, 0, W / 2], [0, cfg.focal, H / 2], [0, 0, 1.0]])
    return Calibration(K, R, -R @ c, (H, W))


def _valid_fraction(points, cal: Calibration) -> float:
    from .projection import project_points

    return float(project_points(points, cal).valid.mean())


def generate_scene(config: SceneConfig, *, return_debug: bool = False):
    rng = np.random.default_rng(config.seed)
    target = config.domain_style == "target"
    yaw_shift = config.target_yaw_shift_deg if target else 0.0
    C = config.n_classes
    for _ in range(50):
        objs = _layout(rng, config, yaw_shift)
        dense, labels, colors, spacing = _dense_samples(rng, objs, config.sample_density)
        vis = _lidar_visible(dense, spacing)
        replace_ = len(vis) < config.n_points
        pick = np.sort(rng.choice(vis, size=config.n_points, replace=replace_))
        if np.all(np.bincount(labels[pick], minlength=C)[:C] >= 5):
            break
    if target and config.target_dropout > 0:
        n_keep = max(1, int(round(len(pick) * (1 - config.target_dropout))))
        pick = np.sort(rng.choice(pick, size=n_keep, replace=False))
    points = dense[pick] + rng.normal(0.0, config.noise_sigma, size=(len(pick), 3))
    for _ in range(100):
        cal = _camera(rng, config)
        if _valid_fraction(points, cal) >= 0.5:
            break
    else:
        raise FrustumError(f"no camera pose put half the points in view after 100 attempts (seed {config.seed})")
    image, pixel_labels, winner = render(dense, labels, colors, spacing, cal)
    if target:
        image = np.clip(image + config.illumination_delta, 0.0, 1.0)
    scene = LabeledScene(
        points=points, point_labels=labels[pick], image=image, pixel_labels=pixel_labels,
        calibration=cal, scene_id=f"{config.domain_style}-{config.seed:06d}",
        domain_tag=config.domain_style, n_classes=C,
    )
    if return_debug:
        return scene, {"dense_points": dense, "dense_labels": labels, "winner": winner, "lidar_index": pick}
    return scene


def generate_dataset(n_scenes: int, config: SceneConfig) -> list[LabeledScene]:
    return [generate_scene(replace(config, seed=config.seed + i)) for i in range(n_scenes)]
