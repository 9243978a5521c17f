"""Core domain types, their invariants, and on-disk formats.

Scenes are stored one per file in a small zip container of ``.npy`` members
(written with fixed timestamps so identical inputs give identical bytes),
next to a JSON manifest.  Checkpoints are a single ``torch.save`` blob.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

IGNORE_INDEX = 255
DATASET_FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1
DEFAULT_CLASS_NAMES = ("ground", "building", "vehicle", "pole", "vegetation", "pedestrian")

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""

    def __init__(self, errors: Sequence[str], context: str = ""):
        self.errors = list(errors)
        prefix = f"{context}: " if context else ""
        super().__init__(prefix + "; ".join(self.errors))


class NonFiniteFeatureError(ValidationError, FloatingPointError):
    """A feature matrix picked up NaN or inf, typically from diverged parameters."""


class DatasetIOError(OSError):
    pass


class DigestMismatchError(RuntimeError):
    pass


class Modality(enum.Enum):
    M2D = "2d"
    M3D = "3d"


class Role(enum.Enum):
    RAW = "raw"
    SHARED = "shared"
    PRIVATE = "private"
    FUSED = "fused"


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Calibration:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", _frozen(self.intrinsics, np.float64))
        object.__setattr__(self, "rotation", _frozen(self.rotation, np.float64))
        object.__setattr__(self, "translation", _frozen(self.translation, np.float64))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        errors = self.validate()
        if errors:
            raise ValidationError(errors, "Calibration")

    def validate(self) -> list[str]:
        errors = []
        K, R, t = self.intrinsics, self.rotation, self.translation
        H, W = self.image_size
        if K.shape != (3, 3) or not np.all(np.isfinite(K)):
            return ["intrinsics must be a finite 3x3 matrix"]
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if not (K[0, 1] == 0 and K[1, 0] == 0 and np.array_equal(K[2], [0, 0, 1])):
            errors.append("intrinsics must be a zero-skew pinhole matrix")
        elif fx <= 0 or fy <= 0:
            errors.append("focal lengths must be positive")
        elif H >= 1 and W >= 1 and not (0 <= cx < W and 0 <= cy < H):
            errors.append("principal point outside the image")
        if R.shape != (3, 3) or not np.all(np.isfinite(R)):
            errors.append("rotation must be a finite 3x3 matrix")
        elif (np.abs(R.T @ R - np.eye(3)).max() > 1e-6
              or abs(np.linalg.det(R) - 1.0) > 1e-6):
            errors.append("rotation is not a proper rotation (orthonormal, det +1)")
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            errors.append("translation must be a finite length-3 vector")
        if H < 1 or W < 1:
            errors.append("image_size must be positive")
        return errors


@dataclass(frozen=True, eq=False)
class LabeledScene:
    points: np.ndarray
    point_labels: np.ndarray
    image: np.ndarray
    pixel_labels: np.ndarray
    calibration: Calibration
    scene_id: str
    domain_tag: str
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points, np.float64))
        object.__setattr__(self, "point_labels", _frozen(self.point_labels, np.int64))
        object.__setattr__(self, "image", _frozen(self.image, np.float64))
        object.__setattr__(self, "pixel_labels", _frozen(self.pixel_labels, np.int64))
        errors = self.validate()
        if errors:
            raise ValidationError(errors, f"LabeledScene {self.scene_id!r}")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def validate(self) -> list[str]:
        errors = []
        C = self.n_classes
        if C < 2:
            errors.append("n_classes must be >= 2")
        P = self.points
        points_ok = P.ndim == 2 and P.shape[1] == 3 and P.shape[0] >= 1
        if not points_ok:
            errors.append("points must be an Nx3 matrix with N >= 1")
        elif not np.all(np.isfinite(P)):
            errors.append("points contain non-finite coordinates")
        pl = self.point_labels
        if points_ok and pl.shape != (P.shape[0],):
            errors.append("point_labels length must equal the number of points")
        elif not _labels_ok(pl, C):
            errors.append(f"point_labels outside [0, {C}) and not {IGNORE_INDEX}")
        H, W = self.calibration.image_size
        im = self.image
        if im.shape != (H, W, 3):
            errors.append(f"image must have shape {(H, W, 3)}")
        elif not (np.all(np.isfinite(im)) and im.min() >= 0.0 and im.max() <= 1.0):
            errors.append("image values must be finite and within [0, 1]")
        px = self.pixel_labels
        if px.shape != (H, W):
            errors.append(f"pixel_labels must have shape {(H, W)}")
        elif not _labels_ok(px, C):
            errors.append(f"pixel_labels outside [0, {C}) and not {IGNORE_INDEX}")
        return errors


def _labels_ok(labels: np.ndarray, C: int) -> bool:
    return bool(np.all(((labels >= 0) & (labels < C)) | (labels == IGNORE_INDEX)))


@dataclass(frozen=True, eq=False)
class Correspondence:
    pixel_uv: np.ndarray
    valid: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "pixel_uv", _frozen(self.pixel_uv, np.int64))
        object.__setattr__(self, "valid", _frozen(self.valid, bool))
        H, W = self.image_size
        uv, ok = self.pixel_uv, self.valid
        errors = []
        if uv.ndim != 2 or uv.shape[1] != 2 or ok.shape != (uv.shape[0],):
            errors.append("pixel_uv must be Nx2 with a length-N mask")
        else:
            u, v = uv[ok, 0], uv[ok, 1]
            if np.any((u < 0) | (u >= W) | (v < 0) | (v >= H)):
                errors.append("valid correspondence outside the image")
            if np.any(uv[~ok] != -1):
                errors.append("invalid entries must carry the (-1, -1) sentinel")
        if errors:
            raise ValidationError(errors, "Correspondence")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """An N x d feature block tagged with where it came from.

    ``values`` may be a numpy array or a torch tensor; the model keeps tensors
    so that gradients flow through the tag.
    """

    values: Any
    modality: Modality
    role: Role

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValidationError(["values must be 2-D"], "FeatureMatrix")
        finite = v.isfinite().all() if hasattr(v, "isfinite") else np.isfinite(v).all()
        if not bool(finite):
            raise NonFiniteFeatureError(["values must be finite"], "FeatureMatrix")

    @property
    def dim_tag(self) -> int:
        return int(self.values.shape[1])

    def __len__(self):
        return int(self.values.shape[0])


LOSS_TERMS = ("seg3d", "seg2d", "xm", "gram", "diff")
DEFAULT_LOSS_WEIGHTS = {"seg2d": 1.0, "xm": 1.0, "gram": 0.05, "diff": 0.05}


def _scalar(x) -> float:
    return float(x.detach()) if hasattr(x, "detach") else float(x)


@dataclass(frozen=True)
class LossBundle:
    seg3d: Any
    seg2d: Any
    xm: Any
    gram: Any
    diff: Any
    weights: Mapping[str, float]
    total: Any

    def as_floats(self) -> dict[str, float]:
        out = {k: _scalar(getattr(self, k)) for k in LOSS_TERMS}
        out["total"] = _scalar(self.total)
        return out

    def recomputed_total(self) -> float:
        w = self.weights
        f = {k: _scalar(getattr(self, k)) for k in LOSS_TERMS}
        return f["seg3d"] + w["seg2d"] * f["seg2d"] + w["xm"] * f["xm"] + w["gram"] * f["gram"] + w["diff"] * f["diff"]


@dataclass(frozen=True, eq=False)
class SegMetrics:
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    valid_classes: np.ndarray
    class_names: tuple[str, ...] = ()

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, class_names: Sequence[str] = ()) -> "SegMetrics":
        conf = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(conf).astype(np.float64)
        rows, cols = conf.sum(1), conf.sum(0)
        denom = rows + cols - tp
        valid = (rows + cols) > 0
        iou = np.zeros(conf.shape[0], dtype=np.float64)
        iou[valid] = tp[valid] / denom[valid]
        miou = float(iou[valid].mean()) if valid.any() else 0.0
        return cls(_frozen(conf), _frozen(iou), miou, _frozen(valid), tuple(class_names))

    @classmethod
    def from_predictions(cls, pred, labels, n_classes: int, class_names: Sequence[str] = ()) -> "SegMetrics":
        return cls.from_confusion(confusion_matrix(pred, labels, n_classes), class_names)

    @property
    def n_evaluated(self) -> int:
        return int(self.confusion.sum())

    def summary(self) -> dict:
        names = self.class_names or tuple(str(c) for c in range(len(self.per_class_iou)))
        return {
            "miou": self.miou,
            "n_evaluated": self.n_evaluated,
            "per_class_iou": {n: float(v) for n, v in zip(names, self.per_class_iou)},
            "valid_classes": [n for n, ok in zip(names, self.valid_classes) if ok],
        }


def confusion_matrix(pred, labels, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; ignore-index labels are dropped."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    keep = labels != IGNORE_INDEX
    idx = labels[keep] * n_classes + pred[keep]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


# ---------------------------------------------------------------------------
# datasets

def _write_container(path: Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH), buf.getvalue())


def _read_container(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta


def _scene_filename(scene_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in scene_id)
    return f"scene_{safe}.npz"


def save_dataset(scenes: Sequence[LabeledScene], path, class_names: Sequence[str] | None = None) -> None:
    path = Path(path)
    n_classes = {s.n_classes for s in scenes}
    if len(n_classes) > 1:
        raise ValidationError([f"scenes disagree on class count: {sorted(n_classes)}"], "save_dataset")
    for s in scenes:
        errors = s.validate()
        if errors:
            raise ValidationError(errors, f"scene {s.scene_id!r}")
    C = n_classes.pop() if n_classes else (len(class_names) if class_names else 0)
    if class_names is None:
        class_names = DEFAULT_CLASS_NAMES[:C] if C <= len(DEFAULT_CLASS_NAMES) else [f"class{i}" for i in range(C)]
    if scenes and len(class_names) != C:
        raise ValidationError([f"{len(class_names)} class names for {C} classes"], "save_dataset")
    entries = []
    try:
        path.mkdir(parents=True, exist_ok=True)
        for s in scenes:
            fname = _scene_filename(s.scene_id)
            cal = s.calibration
            _write_container(
                path / fname,
                {
                    "points": s.points, "point_labels": s.point_labels,
                    "image": s.image, "pixel_labels": s.pixel_labels,
                    "intrinsics": cal.intrinsics, "rotation": cal.rotation,
                    "translation": cal.translation,
                },
                {"scene_id": s.scene_id, "domain_tag": s.domain_tag, "n_classes": s.n_classes,
                 "image_size": list(cal.image_size)},
            )
            entries.append({"file": fname, "scene_id": s.scene_id, "domain_tag": s.domain_tag})
        manifest = {
            "format_version": DATASET_FORMAT_VERSION,
            "n_classes": C,
            "class_names": list(class_names),
            "domain_tags": sorted({e["domain_tag"] for e in entries}),
            "scenes": entries,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset at {path}: {exc}") from exc


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise DatasetIOError(f"missing manifest: {mpath}")
    try:
        return json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetIOError(f"unreadable manifest {mpath}: {exc}") from exc


def load_dataset(path) -> list[LabeledScene]:
    path = Path(path)
    manifest = read_manifest(path)
    scenes = []
    for entry in manifest["scenes"]:
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise DatasetIOError(f"scene file listed in manifest is missing: {fpath}")
        try:
            arrays, meta = _read_container(fpath)
            cal = Calibration(arrays["intrinsics"], arrays["rotation"], arrays["translation"],
                              tuple(meta["image_size"]))
            scene = LabeledScene(
                points=arrays["points"], point_labels=arrays["point_labels"],
                image=arrays["image"], pixel_labels=arrays["pixel_labels"],
                calibration=cal, scene_id=meta["scene_id"], domain_tag=meta["domain_tag"],
                n_classes=int(meta["n_classes"]),
            )
        except ValidationError:
            raise
        except (OSError, KeyError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
            raise DatasetIOError(f"corrupted scene file {fpath}: {exc}") from exc
        if scene.n_classes != manifest["n_classes"]:
            raise ValidationError([f"class count {scene.n_classes} != manifest {manifest['n_classes']}"],
                                  str(fpath))
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# checkpoints

def parameter_digest(state: Mapping[str, Any], prefix: str = "") -> str:
    """sha256 over (name, dtype, shape, bytes) of every entry whose name starts with ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(k for k in state if k.startswith(prefix)):
        arr = state[name]
        arr = arr.detach().cpu().numpy() if hasattr(arr, "detach") else np.asarray(arr)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


FROZEN_PREFIX = "image_encoder."


def save_checkpoint(model_params: Mapping[str, Any], optimizer_state, epoch: int, path,
                    *, config: Mapping[str, Any] | None = None, frozen: bool = True,
                    extra: Mapping[str, Any] | None = None) -> None:
    import torch

    blob = {
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "model_params": {k: v.detach().cpu().clone() for k, v in model_params.items()},
        "optimizer_state": optimizer_state,
        "frozen": bool(frozen),
        "frozen_digest": parameter_digest(model_params, FROZEN_PREFIX),
        "config": dict(config or {}),
        "extra": dict(extra or {}),
    }
    try:
        torch.save(blob, Path(path))
    except OSError as exc:
        raise DatasetIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, *, with_meta: bool = False):
    """Return ``(params, optimizer_state, epoch)``; with ``with_meta`` the raw blob is appended."""
    import torch

    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise DatasetIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DatasetIOError(f"unsupported checkpoint version {blob.get('version')!r} in {path}")
    params = blob["model_params"]
    if blob.get("frozen"):
        actual = parameter_digest(params, FROZEN_PREFIX)
        if actual != blob["frozen_digest"]:
            raise DigestMismatchError(
                f"frozen image-encoder digest mismatch in {path}: recorded "
                f"{blob['frozen_digest'][:12]}, parameters hash to {actual[:12]}")
    out = (params, blob["optimizer_state"], blob["epoch"])
    return out + (blob,) if with_meta else out


# ---------------------------------------------------------------------------
# metrics output

def write_metrics(metrics: SegMetrics, csv_path, json_path=None, extra: Mapping[str, Any] | None = None) -> None:
    conf = metrics.confusion
    names = metrics.class_names or tuple(str(c) for c in range(conf.shape[0]))
    tp = np.diag(conf)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name", "iou", "tp", "fp", "fn", "valid"])
        for c, name in enumerate(names):
            w.writerow([c, name, f"{metrics.per_class_iou[c]:.10f}", int(tp[c]),
                        int(conf[:, c].sum() - tp[c]), int(conf[c].sum() - tp[c]),
                        int(metrics.valid_classes[c])])
    if json_path is not None:
        payload = metrics.summary()
        payload["confusion"] = conf.tolist()
        payload.update(extra or {})
        Path(json_path).write_text(json.dumps(payload, indent=2) + "\n")


def write_csv(rows: Iterable[Mapping[str, Any]], path) -> None:
    rows = list(rows)
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
