"""Generate one synthetic scene and look at how the two sensors line up.

Run:  python3 demos/01_synthetic_scene.py
"""
import numpy as np

from spfusion.datamodel import DEFAULT_CLASS_NAMES, IGNORE_INDEX
from spfusion.projection import feature_cells, project_points
from spfusion.synthdata import SceneConfig, generate_scene

scene = generate_scene(SceneConfig(seed=3))
print(f"{scene.scene_id}: {scene.n_points} points, image {scene.image.shape}, {scene.n_classes} classes")

# Which points does the camera see, and where?
corr = project_points(scene.points, scene.calibration)
print(f"{corr.valid.mean():.1%} of points project onto the image")

# Point labels against the pixel labels they land on.
u, v = corr.pixel_uv[corr.valid].T
agree = scene.point_labels[corr.valid] == scene.pixel_labels[v, u]
print(f"point/pixel label agreement on projected points: {agree.mean():.1%}")

counts = np.bincount(scene.point_labels[scene.point_labels != IGNORE_INDEX], minlength=scene.n_classes)
for name, n in zip(DEFAULT_CLASS_NAMES, counts):
    print(f"  {name:<12} {n:5d} points")

# The image branch works on 8x8 patches; many points share one feature cell.
H, W = scene.calibration.image_size
cells = feature_cells(corr, (H // 8, W // 8), (8, 8))
used = np.unique(cells[cells >= 0])
print(f"{corr.valid.sum()} projected points fall into {len(used)} of {H // 8 * W // 8} feature cells")

# The target style dims the image and drops points.
target = generate_scene(SceneConfig(seed=3, domain_style="target"))
print(f"target style: {target.n_points} points, mean brightness "
      f"{target.image.mean():.3f} vs {scene.image.mean():.3f}")
