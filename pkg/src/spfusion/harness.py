"""Training, evaluation, ablation, domain-shift and gradient-check protocols."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from scipy import stats

from . import fusion as _fusion
from . import losses as _losses
from .datamodel import (DEFAULT_CLASS_NAMES, FROZEN_PREFIX, IGNORE_INDEX, LOSS_TERMS, Calibration,
                        LabeledScene, NonFiniteFeatureError, SegMetrics, ValidationError, load_checkpoint,
                        parameter_digest, save_checkpoint, write_csv)
from .encoders import EncoderConfig, prepare_points
from .losses import NonFiniteLossError, class_weights_from_counts, total_loss
from .model import PARAM_GROUPS, FusionSegmenter, ModelConfig, batch_terms, prepare_scene

log = logging.getLogger(__name__)

CURVE_TERMS = LOSS_TERMS + ("total",)


def _opt(default, help: str, choices: Sequence[str] | None = None):
    return field(default=default, metadata={"help": help, "choices": choices})


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run; flat so it maps one-to-one onto config-file keys."""

    epochs: int = _opt(40, "training epochs; the cosine schedule anneals over all of them")
    lr: float = _opt(0.05, "initial SGD learning rate")
    momentum: float = _opt(0.9, "SGD momentum")
    weight_decay: float = _opt(1e-4, "SGD weight decay")
    schedule: str = _opt("cosine", "learning-rate schedule", ("cosine", "constant"))
    batch_size: int = _opt(4, "scenes per optimisation step")
    w_seg2d: float = _opt(1.0, "weight of the image-branch segmentation loss")
    w_xm: float = _opt(1.0, "weight of the cross-modal KL term")
    w_gram: float = _opt(0.05, "weight of the Gram alignment term")
    w_diff: float = _opt(0.05, "weight of the private decorrelation term")
    aug_rotation: bool = _opt(True, "random rotation about the vertical axis")
    aug_flip: bool = _opt(True, "random mirror flip across the forward axis")
    aug_scale: bool = _opt(True, "random uniform scaling in [scale_min, scale_max]")
    aug_photometric: bool = _opt(True, "random brightness/contrast jitter of the image")
    rotation_deg: float = _opt(180.0, "maximum absolute rotation angle in degrees")
    scale_min: float = _opt(0.95, "lower bound of the uniform scale factor")
    scale_max: float = _opt(1.05, "upper bound of the uniform scale factor")
    photometric_strength: float = _opt(0.15, "half-range of brightness offset and contrast gain jitter")
    fusion_mode: str = _opt("shared_private", "fusion variant", ("shared_private", "kl_only"))
    query_direction: str = _opt("q3d_k2d", "which modality queries in the fusion attention",
                                ("q3d_k2d", "q2d_k3d", "bidirectional"))
    fusion_form: str = _opt("gated", "per-channel gate or its row-mean scalar blend", ("gated", "scalar_blend"))
    saf_locality: float = _opt(1.0, "image-plane locality bias width in feature cells; 0 disables")
    kl_mode: str = _opt("as_written", "direction of the cross-modal KL", ("as_written", "symmetric"))
    xm_swap: bool = _opt(False, "exchange the roles of the two branches in the KL")
    class_weighting: str = _opt("inv_sqrt", "cross-entropy class weights", ("inv_sqrt", "uniform"))
    regularizer_scale: str = _opt("per_row", "scale features by 1/sqrt(rows) before Gram/decorrelation",
                                  ("per_row", "none"))
    reconstruction_weight: float = _opt(0.0, "weight of the optional S+R reconstruction term")
    seed: int = _opt(0, "seed for initialisation, ordering and augmentation")
    precision: str = _opt("32", "floating point width of model computation", ("32", "64"))
    num_threads: int = _opt(1, "torch intra-op threads; 1 gives the deterministic contract")
    inject_nan_step: int = _opt(-1, "replace the 3D segmentation loss by NaN at this step (testing)")
    d_hidden: int = _opt(64, "encoder output width")
    n_blocks_3d: int = _opt(3, "point encoder blocks")
    n_heads: int = _opt(4, "attention heads in the encoders")
    voxel_size: float = _opt(0.2, "voxel edge length in metres")
    attention_stride: int = _opt(4, "voxel pooling stride for point-encoder attention; 1 is dense")
    patch_size_2d: int = _opt(8, "image patch size in pixels")
    d_image: int = _opt(96, "width of the frozen image encoder")
    n_blocks_2d: int = _opt(2, "transformer blocks in the image encoder")
    freeze_2d: bool = _opt(True, "keep the image encoder frozen")
    encoder_seed: int = _opt(0, "seed of the image encoder weights (shared across runs)")
    d_decomp: int = _opt(128, "shared/private subspace width")
    d_attn: int = _opt(32, "fusion attention width")
    d_fused: int = _opt(0, "fused shared width; 0 means 2*d_decomp")
    head_hidden: int = _opt(64, "hidden width of the point segmentation head")

    def __post_init__(self):
        errors = []
        if not self.lr > 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.scale_min <= self.scale_max:
            errors.append("need 0 < scale_min <= scale_max")
        for f in fields(self):
            choices = f.metadata.get("choices")
            if choices and getattr(self, f.name) not in choices:
                errors.append(f"{f.name} must be one of {choices}, got {getattr(self, f.name)!r}")
        if errors:
            raise ValidationError(errors, "TrainConfig")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "64" else torch.float32

    def loss_weights(self) -> dict[str, float]:
        w = {"seg2d": self.w_seg2d, "xm": self.w_xm, "gram": self.w_gram, "diff": self.w_diff}
        if self.fusion_mode == "kl_only":
            w["gram"] = w["diff"] = 0.0
        return w

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d_hidden=self.d_hidden, n_blocks_3d=self.n_blocks_3d, n_heads=self.n_heads,
                             voxel_size=self.voxel_size, patch_size_2d=self.patch_size_2d,
                             freeze_2d=self.freeze_2d, seed=self.encoder_seed, d_image=self.d_image,
                             n_blocks_2d=self.n_blocks_2d, attention_stride=self.attention_stride)

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(encoder=self.encoder_config(), n_classes=n_classes, d_decomp=self.d_decomp,
                           d_attn=self.d_attn, d_fused=self.d_fused, head_hidden=self.head_hidden,
                           fusion_mode=self.fusion_mode, query_direction=self.query_direction,
                           fusion_form=self.fusion_form, saf_locality=self.saf_locality,
                           reconstruction_weight=self.reconstruction_weight,
                           regularizer_scale=self.regularizer_scale)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValidationError([f"unknown config key {k!r}" for k in unknown], "TrainConfig")
        return cls(**values)


@dataclass
class TrainReport:
    config: dict
    curves: list[dict]
    checkpoint_path: str | None
    wall_time: float
    diverged: bool
    divergence: dict | None
    metrics: SegMetrics | None
    frozen_digest_before: str
    frozen_digest_after: str
    warnings: dict = field(default_factory=dict)
    model: FusionSegmenter | None = field(default=None, repr=False)

    @property
    def miou(self) -> float:
        return float("nan") if self.metrics is None else self.metrics.miou

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("config", "curves", "checkpoint_path", "wall_time", "diverged",
                                               "divergence", "frozen_digest_before", "frozen_digest_after",
                                               "warnings")}
        out["metrics"] = None if self.metrics is None else self.metrics.summary()
        return out

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        write_csv(self.curves, out_dir / "curves.csv")


# ---------------------------------------------------------------------------
# helpers

def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at the last step."""
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def build_model(config: TrainConfig, n_classes: int) -> FusionSegmenter:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = FusionSegmenter(config.model_config(n_classes))
    return model.to(config.dtype)


def frozen_digest(model: FusionSegmenter) -> str:
    return parameter_digest(model.state_dict(), FROZEN_PREFIX)


def _check_dataset(scenes: Sequence[LabeledScene], what: str) -> int:
    if not scenes:
        raise ValidationError([f"{what} is empty"], what)
    counts = {s.n_classes for s in scenes}
    if len(counts) != 1:
        raise ValidationError([f"{what} mixes class counts {sorted(counts)}"], what)
    return counts.pop()


def dataset_class_weights(scenes: Sequence[LabeledScene], n_classes: int, scheme: str):
    c3 = np.zeros(n_classes)
    c2 = np.zeros(n_classes)
    for s in scenes:
        c3 += np.bincount(s.point_labels[s.point_labels != IGNORE_INDEX], minlength=n_classes)[:n_classes]
        px = s.pixel_labels[s.pixel_labels != IGNORE_INDEX]
        c2 += np.bincount(px, minlength=n_classes)[:n_classes]
    return class_weights_from_counts(c3, scheme), class_weights_from_counts(c2, scheme)


def augment_points(points: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    """Rotation about the vertical axis, mirror flip and uniform scale, in the sensor frame.

    Correspondences are computed once from the unaugmented cloud, which is the
    same as composing the camera extrinsics with the inverse of this transform.
    """
    T = np.eye(3)
    if config.aug_rotation:
        a = np.deg2rad(rng.uniform(-config.rotation_deg, config.rotation_deg))
        c, s = np.cos(a), np.sin(a)
        T = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ T
    if config.aug_flip and rng.random() < 0.5:
        T = np.diag([1.0, -1.0, 1.0]) @ T
    if config.aug_scale:
        T = rng.uniform(config.scale_min, config.scale_max) * T
    return points @ T.T


def augment_image(image: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    gain = 1.0 + rng.uniform(-strength, strength)
    offset = rng.uniform(-strength, strength)
    return np.clip((image - 0.5) * gain + 0.5 + offset, 0.0, 1.0)


def _snapshot(model: FusionSegmenter, optimizer) -> dict:
    return {"params": copy.deepcopy(model.state_dict()),
            "optimizer": copy.deepcopy(optimizer.state_dict()) if optimizer is not None else {}}


# ---------------------------------------------------------------------------
# training

def train(config: TrainConfig, train_set: Sequence[LabeledScene], val_set: Sequence[LabeledScene] | None = None,
          out_dir=None, *, class_names: Sequence[str] | None = None) -> TrainReport:
    """End-to-end SGD training with cosine annealing and divergence bookkeeping."""
    t0 = time.perf_counter()
    n_classes = _check_dataset(train_set, "train_set")
    if val_set:
        if _check_dataset(val_set, "val_set") != n_classes:
            raise ValidationError(["train_set and val_set class counts differ"], "train")
    torch.set_num_threads(config.num_threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
    _losses.WARNINGS.clear()
    _fusion.WARNINGS.clear()
    dtype = config.dtype
    rng = np.random.default_rng(config.seed)
    model = build_model(config, n_classes)
    class_names = list(class_names or DEFAULT_CLASS_NAMES[:n_classes])
    digest_before = frozen_digest(model)

    preps = [prepare_scene(s, config.patch_size_2d) for s in train_set]
    w3d, w2d = dataset_class_weights(train_set, n_classes, config.class_weighting)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(trainable, lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    weights = config.loss_weights()
    cache_image = model.config.encoder.freeze_2d and not config.aug_photometric
    image_cache: dict[int, torch.Tensor] = {}

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "ckpt.pt" if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"n_classes": n_classes, "class_names": class_names}

    def checkpoint(epoch):
        if ckpt_path is not None:
            save_checkpoint(model.state_dict(), optimizer.state_dict(), epoch, ckpt_path,
                            config=config.to_dict(), extra=meta)
        return _snapshot(model, optimizer)

    last_finite = checkpoint(0)
    steps_per_epoch = math.ceil(len(preps) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    curves: list[dict] = []
    divergence = None
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(preps))
        sums = dict.fromkeys(CURVE_TERMS, 0.0)
        lr = config.lr
        for b in range(steps_per_epoch):
            lr = cosine_lr(step, total_steps, config.lr) if config.schedule == "cosine" else config.lr
            for g in optimizer.param_groups:
                g["lr"] = lr
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            try:
                outputs = []
                for i in batch:
                    prep = preps[i]
                    pts = augment_points(np.asarray(prep.scene.points), rng, config)
                    img = np.asarray(prep.scene.image)
                    if config.aug_photometric:
                        img = augment_image(img, rng, config.photometric_strength)
                    img_t = torch.as_tensor(img, dtype=dtype)
                    feats = None
                    if cache_image:
                        if i not in image_cache:
                            image_cache[i] = model.encode_image_features(img_t)
                        feats = image_cache[i]
                    geom = prepare_points(pts, model.config.encoder)
                    outputs.append(model.forward_scene(prep, torch.as_tensor(pts, dtype=dtype), img_t,
                                                       geometry=geom, image_features=feats))
                terms = batch_terms(outputs, [preps[i] for i in batch], w3d, w2d, model.config,
                                    kl_mode=config.kl_mode, xm_swap=config.xm_swap)
                if step == config.inject_nan_step:
                    terms["seg3d"] = terms["seg3d"] * float("nan")
                bundle = total_loss(terms, weights)
            except (NonFiniteLossError, NonFiniteFeatureError) as exc:
                term, value = (exc.term, exc.value) if isinstance(exc, NonFiniteLossError) else ("features", "nan")
                divergence = {"epoch": epoch, "step": step, "term": term, "value": str(value)}
                log.warning("non-finite %s at epoch %d step %d; keeping the epoch-%d checkpoint",
                            term, epoch, step, len(curves))
                break
            loss = bundle.total
            if "reconstruction" in terms and config.reconstruction_weight > 0:
                loss = loss + config.reconstruction_weight * terms["reconstruction"]
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            for k, v in bundle.as_floats().items():
                sums[k] += v
            step += 1
        if divergence is not None:
            break
        row = {"epoch": epoch + 1, "lr": lr}
        row.update({k: sums[k] / steps_per_epoch for k in CURVE_TERMS})
        curves.append(row)
        log.info("epoch %d/%d total %.4f", epoch + 1, config.epochs, row["total"])
        last_finite = checkpoint(epoch + 1)

    if divergence is not None:
        model.load_state_dict(last_finite["params"])
    digest_after = frozen_digest(model)
    metrics = evaluate(model, val_set) if val_set else None
    warnings = {**{f"losses.{k}": v for k, v in _losses.WARNINGS.items()},
                **{f"fusion.{k}": v for k, v in _fusion.WARNINGS.items()}}
    report = TrainReport(config=config.to_dict(), curves=curves,
                         checkpoint_path=str(ckpt_path) if ckpt_path else None,
                         wall_time=time.perf_counter() - t0, diverged=divergence is not None,
                         divergence=divergence, metrics=metrics, frozen_digest_before=digest_before,
                         frozen_digest_after=digest_after, warnings=warnings, model=model)
    if out_dir is not None:
        report.save(out_dir)
    return report


# ---------------------------------------------------------------------------
# evaluation

def load_model(path) -> tuple[FusionSegmenter, TrainConfig, dict]:
    params, _, _, blob = load_checkpoint(path, with_meta=True)
    config = TrainConfig.from_dict(blob["config"])
    extra = blob.get("extra") or {}
    model = build_model(config, int(extra["n_classes"]))
    model.load_state_dict(params)
    return model, config, extra


def _as_model(checkpoint) -> FusionSegmenter:
    if isinstance(checkpoint, FusionSegmenter):
        return checkpoint
    if isinstance(checkpoint, TrainReport):
        if checkpoint.model is None:
            return load_model(checkpoint.checkpoint_path)[0]
        return checkpoint.model
    return load_model(checkpoint)[0]


def predict(checkpoint, scene: LabeledScene) -> np.ndarray:
    model = _as_model(checkpoint)
    model.eval()
    return model.predict(prepare_scene(scene, model.config.encoder.patch_size_2d))


def evaluate(checkpoint, dataset: Sequence[LabeledScene], class_names: Sequence[str] | None = None) -> SegMetrics:
    """Argmax predictions over every scene accumulated into one confusion matrix."""
    model = _as_model(checkpoint)
    C = model.config.n_classes
    n = _check_dataset(dataset, "dataset")
    if n != C:
        raise ValidationError([f"model predicts {C} classes but the dataset has {n}"], "evaluate")
    confusion = np.zeros((C, C), dtype=np.int64)
    for scene in dataset:
        pred = predict(model, scene)
        confusion += SegMetrics.from_predictions(pred, scene.point_labels, C).confusion
    return SegMetrics.from_confusion(confusion, class_names or DEFAULT_CLASS_NAMES[:C])


def domain_shift_eval(checkpoint, source_set, target_set) -> tuple[SegMetrics, SegMetrics, float]:
    model = _as_model(checkpoint)
    src = evaluate(model, source_set)
    tgt = evaluate(model, target_set)
    return src, tgt, src.miou - tgt.miou


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationRow:
    name: str
    overrides: dict
    seeds: list[int]
    mious: list[float]
    diverged: list[bool]
    target_mious: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.mious))

    @property
    def std(self) -> float:
        return float(np.std(self.mious, ddof=1)) if len(self.mious) > 1 else 0.0

    @property
    def drops(self) -> list[float]:
        return [a - b for a, b in zip(self.mious, self.target_mious)]

    @property
    def mean_drop(self) -> float:
        return float(np.mean(self.drops)) if self.target_mious else float("nan")


@dataclass
class AblationResult:
    rows: list[AblationRow]
    reports: dict = field(default_factory=dict, repr=False)

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def table(self) -> list[dict]:
        base = self.rows[0]
        out = []
        for r in self.rows:
            wins = sum(a > b for a, b in zip(r.mious, base.mious))
            losses_ = sum(a < b for a, b in zip(r.mious, base.mious))
            p = stats.binomtest(wins, wins + losses_).pvalue if wins + losses_ else 1.0
            out.append({
                "name": r.name, "overrides": json.dumps(r.overrides, sort_keys=True), "runs": len(r.mious),
                "miou_mean": r.mean, "miou_std": r.std, "diverged": sum(r.diverged),
                "wins_vs_first": wins, "losses_vs_first": losses_, "sign_test_p": p,
                "target_miou_mean": float(np.mean(r.target_mious)) if r.target_mious else "",
                "drop_mean": r.mean_drop if r.target_mious else "",
                "mious": " ".join(f"{m:.6f}" for m in r.mious),
            })
        return out

    def to_csv(self, path) -> None:
        write_csv(self.table(), path)


def _row_name(overrides: Mapping[str, Any]) -> str:
    items = {k: v for k, v in overrides.items() if k != "name"}
    return overrides.get("name") or (",".join(f"{k}={v}" for k, v in sorted(items.items())) or "base")


def ablate(base_config: TrainConfig, grid: Sequence[Mapping[str, Any]], train_set, val_set, *,
           n_seeds: int = 3, seeds: Sequence[int] | None = None, target_set=None, out_dir=None) -> AblationResult:
    """Train every grid row over shared seeds and tabulate mean/std mIoU and divergence counts."""
    if len(grid) < 2:
        raise ValidationError(["ablate needs at least two configurations"], "ablate")
    seeds = list(seeds) if seeds is not None else [base_config.seed + i for i in range(n_seeds)]
    rows, reports = [], {}
    for overrides in grid:
        name = _row_name(overrides)
        ov = {k: v for k, v in overrides.items() if k != "name"}
        row = AblationRow(name, ov, seeds, [], [])
        for seed in seeds:
            cfg = replace(base_config, **ov, seed=seed)
            run_dir = Path(out_dir) / name / f"seed{seed}" if out_dir is not None else None
            rep = train(cfg, train_set, val_set, run_dir)
            row.mious.append(rep.miou)
            row.diverged.append(rep.diverged)
            if target_set is not None:
                row.target_mious.append(evaluate(rep.model, target_set).miou)
            rep.model = None
            reports[(name, seed)] = rep
            log.info("ablate %s seed %d miou %.4f", name, seed, rep.miou)
        rows.append(row)
    result = AblationResult(rows, reports)
    if out_dir is not None:
        result.to_csv(Path(out_dir) / "ablation.csv")
    return result


# ---------------------------------------------------------------------------
# gradient verification

GRAD_TERMS = ("ce", "lovasz", "xm", "gram", "diff", "total")


@dataclass
class GradcheckReport:
    errors: dict[str, dict[str, float | str]]
    tolerance: float
    n_parameters: int
    wall_time: float

    @property
    def max_error(self) -> float:
        vals = [v for g in self.errors.values() for v in g.values() if isinstance(v, float)]
        return max(vals) if vals else 0.0

    @property
    def offenders(self) -> list[tuple[str, str, float]]:
        return [(g, t, v) for g, row in self.errors.items() for t, v in row.items()
                if isinstance(v, float) and not v <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.offenders

    def rows(self) -> list[dict]:
        return [{"group": g, **{t: row[t] for t in GRAD_TERMS}} for g, row in self.errors.items()]


def tiny_config(config: TrainConfig | None = None) -> TrainConfig:
    base = config or TrainConfig()
    return replace(base, precision="64", d_hidden=8, n_heads=2, n_blocks_3d=1, voxel_size=0.5,
                   attention_stride=1, patch_size_2d=2, d_image=8, n_blocks_2d=1, d_decomp=6, d_attn=4,
                   d_fused=12, head_hidden=8)


def tiny_scene(seed: int = 0, n_points: int = 8, n_classes: int = 3, size: int = 4) -> LabeledScene:
    """A handful of points in front of a ``size x size`` camera; two of them miss it."""
    rng = np.random.default_rng(seed)
    K = np.array([[float(size), 0, size / 2], [0, float(size), size / 2], [0, 0, 1]])
    cal = Calibration(K, np.eye(3), np.zeros(3), (size, size))
    xy = rng.uniform(-0.45, 0.45, (n_points, 2))
    z = rng.uniform(1.0, 2.5, (n_points, 1))
    pts = np.concatenate([xy * z, z], 1)
    pts[-1] = [3.0, 0.0, 1.0]              # off-image
    pts[-2] = [0.1, 0.1, -1.0]             # behind the camera
    labels = rng.integers(0, n_classes, n_points)
    labels[0] = IGNORE_INDEX
    pix = rng.integers(0, n_classes, (size, size))
    pix[0, 0] = IGNORE_INDEX
    return LabeledScene(pts, labels, rng.uniform(0, 1, (size, size, 3)), pix, cal, "tiny", "source", n_classes)


def _grad_terms(model, prep, pts, img, w3, w2, config: TrainConfig) -> dict[str, torch.Tensor]:
    out = model.forward_scene(prep, pts, img)
    t = batch_terms([out], [prep], w3, w2, model.config, kl_mode=config.kl_mode, xm_swap=config.xm_swap)
    total = total_loss(t, config.loss_weights()).total
    return {"ce": t["ce3d"] + t["ce2d"], "lovasz": t["lovasz3d"] + t["lovasz2d"], "xm": t["xm"],
            "gram": t["gram"], "diff": t["diff"], "total": total}


def gradcheck(config: TrainConfig | None = None, *, step: float = 1e-5, tolerance: float = 1e-3,
              scene: LabeledScene | None = None) -> GradcheckReport:
    """Central-difference check of every parameter group against every loss term at 64-bit."""
    t0 = time.perf_counter()
    config = tiny_config(config)
    scene = scene or tiny_scene(config.seed)
    model = build_model(config, scene.n_classes)
    model.eval()
    prep = prepare_scene(scene, config.patch_size_2d)
    pts = torch.tensor(np.array(scene.points), dtype=torch.float64)
    img = torch.tensor(np.array(scene.image), dtype=torch.float64)
    w3, w2 = dataset_class_weights([scene], scene.n_classes, config.class_weighting)
    terms_fn = lambda: _grad_terms(model, prep, pts, img, w3, w2, config)  # noqa: E731

    named = list(model.named_parameters())
    groups: dict[str, list[tuple[str, torch.nn.Parameter]]] = {}
    for name, p in named:
        groups.setdefault(model.param_group(name), []).append((name, p))

    analytic: dict[str, dict[str, torch.Tensor]] = {}
    terms = terms_fn()
    trainable = [p for _, p in named if p.requires_grad]
    for t in GRAD_TERMS:
        grads = torch.autograd.grad(terms[t], trainable, allow_unused=True, retain_graph=True)
        analytic[t] = {id(p): (g if g is not None else torch.zeros_like(p)) for p, g in zip(trainable, grads)}

    numeric = {t: {id(p): torch.zeros_like(p) for p in trainable} for t in GRAD_TERMS}
    with torch.no_grad():
        for p in trainable:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                plus = {k: float(v) for k, v in terms_fn().items()}
                flat[j] = orig - step
                minus = {k: float(v) for k, v in terms_fn().items()}
                flat[j] = orig
                for t in GRAD_TERMS:
                    numeric[t][id(p)].view(-1)[j] = (plus[t] - minus[t]) / (2 * step)

    errors: dict[str, dict[str, float | str]] = {}
    for g in PARAM_GROUPS:
        if g not in groups:
            continue
        params = [p for _, p in groups[g]]
        if not any(p.requires_grad for p in params):
            errors[g] = dict.fromkeys(GRAD_TERMS, "no gradient")
            continue
        errors[g] = {}
        for t in GRAD_TERMS:
            a = torch.cat([analytic[t][id(p)].reshape(-1) for p in params])
            n = torch.cat([numeric[t][id(p)].reshape(-1) for p in params])
            scale = max(float(a.abs().max()), float(n.abs().max()), 1e-12)
            errors[g][t] = float((a - n).abs().max()) / scale if scale > 1e-12 else 0.0
    n_params = sum(p.numel() for p in trainable)
    return GradcheckReport(errors, tolerance, n_params, time.perf_counter() - t0)
