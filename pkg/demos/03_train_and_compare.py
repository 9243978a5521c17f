"""Train the shared-private model and the KL-only baseline on a small benchmark.

About a minute and a half on one CPU core at the default size below.  Increase the
scene counts and epochs to approach the acceptance benchmark.

Run:  python3 demos/03_train_and_compare.py
"""
import logging
from dataclasses import replace

from spfusion.harness import TrainConfig, domain_shift_eval, train
from spfusion.synthdata import SceneConfig, generate_dataset

logging.basicConfig(level=logging.INFO, format="%(message)s")

small = SceneConfig(n_points=2048)
train_set = generate_dataset(16, replace(small, seed=0))
val_set = generate_dataset(8, replace(small, seed=100_000))
target_set = generate_dataset(8, replace(small, seed=100_000, domain_style="target"))

base = TrainConfig(epochs=8)
results = {}
for name, cfg in {"shared_private": base, "kl_only": replace(base, fusion_mode="kl_only")}.items():
    report = train(cfg, train_set, val_set)
    src, tgt, drop = domain_shift_eval(report.model, val_set, target_set)
    results[name] = (src.miou, tgt.miou, drop)
    print(f"{name}: frozen encoder untouched = {report.frozen_digest_before == report.frozen_digest_after}")
    for cls, iou in zip(src.class_names, src.per_class_iou):
        print(f"  {cls:<12} IoU {iou:.3f}")

print(f"\n{'variant':<16}{'source':>8}{'target':>8}{'drop':>8}")
for name, (s, t, d) in results.items():
    print(f"{name:<16}{s:8.3f}{t:8.3f}{d:8.3f}")
