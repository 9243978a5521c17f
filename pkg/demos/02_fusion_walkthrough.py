"""Walk one scene through an untrained model and inspect the fusion step.

Run:  python3 demos/02_fusion_walkthrough.py
"""
import torch

from spfusion.fusion import saf_attention
from spfusion.harness import TrainConfig, build_model
from spfusion.model import prepare_scene
from spfusion.synthdata import SceneConfig, generate_scene

torch.manual_seed(0)
scene = generate_scene(SceneConfig(seed=5, n_points=2048))
config = TrainConfig()
model = build_model(config, scene.n_classes).eval()
prep = prepare_scene(scene, config.patch_size_2d)
points = torch.tensor(scene.points, dtype=torch.float32)
image = torch.tensor(scene.image, dtype=torch.float32)

with torch.no_grad():
    out = model.forward_scene(prep, points, image)
print(f"point logits {tuple(out['logits3d'].shape)}, image logits {tuple(out['logits2d_map'].shape)}")
print(f"{len(prep.valid_idx)} paired points attend over {len(prep.key_cells)} distinct image cells")

# Training pulls paired shared features together; at initialisation they are unrelated.
s2, s3 = out["s2d_pts"], out["s3d_pts"]
cos = torch.nn.functional.cosine_similarity(s2, s3).mean()
print(f"mean cosine between paired shared features before training: {cos:.3f}")

# Plain dense attention here; the model adds an image-plane locality bias over unique cells.
# The gate decides, per channel, how much attended image context replaces the point feature.
with torch.no_grad():
    fused = saf_attention(s3, s2, model.saf)
print(f"attention rows sum to 1: {torch.allclose(fused.attention.sum(1), torch.ones(len(s3)))}")
print(f"mean gate {fused.gate.mean():.3f} (1 = all image context, 0 = all point feature)")
