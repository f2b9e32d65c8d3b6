"""Optimization, evaluation with scale voting, metrics and experiment harnesses.

Datasets are plain arrays: ``points`` is ``S x N x C`` and ``labels`` holds
one class id per cloud (classification) or ``S x N`` part ids
(segmentation). Everything is deterministic in the configured seeds.
"""

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import tensor as T
from .errors import ConfigError, FormatError, InvalidInputError, TrainingDivergence
from .model import classify_logits, init_model, segment_logits, trainable
from .pointcloud import (
    CLUTTER_LABEL,
    SyntheticSpec,
    generate_synthetic,
    normalize_unit_sphere,
    rotation_z,
)

OPTIMIZERS = ("adam", "sgd_momentum")
SCHEDULES = ("constant", "cosine")
ROBUSTNESS_MODES = ("dropout", "rotate", "noise")
TOY_FAMILIES = ("sphere", "cube", "cylinder-with-caps", "L-bracket")


# ----------------------------------------------------------------- datasets


@dataclass(frozen=True, eq=False)
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    category: int = 0
    class_names: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 3 or pts.shape[0] == 0:
            raise InvalidInputError(f"dataset points must be a non-empty S x N x C array, got {pts.shape}")
        if np.asarray(self.labels).shape[0] != pts.shape[0]:
            raise InvalidInputError("one label entry per cloud is required")

    def __len__(self):
        return self.points.shape[0]

    @property
    def is_segmentation(self):
        return np.asarray(self.labels).ndim == 2

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(self, points=self.points[idx], labels=self.labels[idx])

    def save(self, path):
        np.savez(path, points=self.points, labels=self.labels, category=self.category,
                 class_names=np.array(self.class_names, dtype=str))

    @classmethod
    def load(cls, path):
        try:
            with np.load(path) as z:
                return cls(z["points"], z["labels"], int(z["category"]), tuple(str(s) for s in z["class_names"]))
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"cannot read dataset {path}: {exc}") from exc


def _seed_grid(seed, count):
    return np.random.SeedSequence(seed).generate_state(count)


def make_toy_classification(n_train=200, n_test=50, n_points=512, seed=0, families=TOY_FAMILIES):
    """Unit-sphere-normalized synthetic shapes, one class per family."""
    seeds = _seed_grid(seed, len(families) * (n_train + n_test))
    clouds, labels = [], []
    for c, family in enumerate(families):
        for i in range(n_train + n_test):
            s = int(seeds[c * (n_train + n_test) + i])
            clouds.append(normalize_unit_sphere(generate_synthetic(SyntheticSpec(family, n_points, s))).xyz)
            labels.append(c)
    pts, labels = np.stack(clouds), np.array(labels)
    per = n_train + n_test
    train = np.concatenate([np.arange(c * per, c * per + n_train) for c in range(len(families))])
    test = np.concatenate([np.arange(c * per + n_train, (c + 1) * per) for c in range(len(families))])
    names = tuple(families)
    return Dataset(pts[train], labels[train], class_names=names), Dataset(pts[test], labels[test], class_names=names)


def make_cylinder_segmentation(n_train=64, n_test=16, n_points=512, seed=0):
    """Cap (1) versus body (0) labels on randomly z-rotated cylinders."""
    seeds = _seed_grid(seed, 2 * (n_train + n_test))
    clouds, labels = [], []
    for i in range(n_train + n_test):
        cloud = generate_synthetic(SyntheticSpec("cylinder-with-caps", n_points, int(seeds[2 * i]), part_labels=True))
        cloud = normalize_unit_sphere(cloud)
        angle = np.random.default_rng(int(seeds[2 * i + 1])).uniform(0, 2 * np.pi)
        clouds.append(cloud.xyz @ rotation_z(angle).T)
        labels.append(cloud.point_labels)
    pts, labels = np.stack(clouds), np.stack(labels).astype(np.int64)
    names = ("body", "cap")
    return (Dataset(pts[:n_train], labels[:n_train], class_names=names),
            Dataset(pts[n_train:], labels[n_train:], class_names=names))


# ------------------------------------------------------------ optimization


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    lr_schedule: str = "cosine"
    seed: int = 0
    deterministic: bool = True
    augment: bool = True
    scale_range: tuple = (0.8, 1.25)
    translate_range: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        self.validate()

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        # lr == 0 is accepted on purpose: it is the documented null update
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigError(f"lr must be finite and non-negative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        return self


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps, self.wd = eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        self.t += 1
        c1, c2 = 1 - self.b1**self.t, 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.wd * p.data if self.wd else p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - upd.astype(p.data.dtype)


class SGDMomentum:
    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.mu, self.wd = momentum, weight_decay
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.wd * p.data if self.wd else p.grad
            self.buf[k] = self.mu * self.buf[k] + g
            p.data = p.data - (lr * self.buf[k]).astype(p.data.dtype)


def make_optimizer(params, tcfg):
    if tcfg.optimizer == "adam":
        return Adam(params, tcfg.betas, tcfg.eps, tcfg.weight_decay)
    return SGDMomentum(params, tcfg.momentum, tcfg.weight_decay)


def learning_rate(tcfg, epoch):
    """Learning rate for 0-based ``epoch``."""
    if tcfg.lr_schedule == "constant":
        return tcfg.lr
    return 0.5 * tcfg.lr * (1 + math.cos(math.pi * epoch / tcfg.epochs))


def _augment_batch(pts, labels, rng, tcfg):
    """Random isotropic scale, translation and point shuffle per cloud."""
    b, n, _ = pts.shape
    out = pts.copy()
    lo, hi = tcfg.scale_range
    out[..., :3] *= rng.uniform(lo, hi, size=(b, 1, 1))
    out[..., :3] += rng.uniform(-tcfg.translate_range, tcfg.translate_range, size=(b, 1, 3))
    perm = np.argsort(rng.random((b, n)), axis=1)
    out = np.take_along_axis(out, perm[..., None], axis=1)
    if labels.ndim == 2:
        labels = np.take_along_axis(labels, perm, axis=1)
    return out, labels


def _logits(params, cfg, pts, category, training=False):
    if cfg.task == "classification":
        return classify_logits(params, cfg, pts, training=training)
    return segment_logits(params, cfg, pts, category, training=training)


def _batch_loss(params, cfg, pts, labels, category):
    logits = _logits(params, cfg, pts, category, training=True)
    if cfg.task == "classification":
        return T.cross_entropy(logits, labels), logits.data.argmax(-1) == labels
    flat = T.reshape(logits, (-1, logits.shape[-1]))
    return T.cross_entropy(flat, labels.reshape(-1)), logits.data.argmax(-1) == labels


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)  # (epoch, loss, train_acc[, eval_acc])
    stopped_epoch: int = 0


def train(params, cfg, dataset, tcfg, log_path=None, eval_set=None, target_accuracy=None, epoch_callback=None):
    """Minimize cross-entropy; returns the (mutated) params and the loss curve.

    One CSV row ``epoch,loss,acc`` per epoch is written to ``log_path``.
    With ``eval_set`` and ``target_accuracy``, training stops after the
    first epoch whose evaluation accuracy reaches the target; the learning
    rate schedule still spans ``tcfg.epochs``.
    """
    if cfg.task == "segmentation" and not dataset.is_segmentation:
        raise InvalidInputError("segmentation training needs per-point labels")
    if cfg.task == "classification" and dataset.is_segmentation:
        raise InvalidInputError("classification training needs one label per cloud")
    cfg.validate(dataset.points.shape[1])
    dtype = params["local1.w_center"].dtype
    weights = trainable(params)
    opt = make_optimizer(weights, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    result = TrainResult(params)
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "acc"] + (["eval_acc"] if eval_set is not None else []))
        step = 0
        for epoch in range(tcfg.epochs):
            lr = learning_rate(tcfg, epoch)
            order = rng.permutation(len(dataset))
            total_loss, correct, seen = 0.0, 0, 0
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start : start + tcfg.batch_size]
                pts, labels = dataset.points[idx], dataset.labels[idx]
                if tcfg.augment:
                    pts, labels = _augment_batch(pts, labels, rng, tcfg)
                for p in weights.values():
                    p.grad = None
                loss, hits = _batch_loss(params, cfg, pts.astype(dtype), labels, dataset.category)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergence(f"loss became {value} at step {step}", step=step)
                loss.backward()
                opt.step(lr)
                step += 1
                total_loss += value * len(idx)
                correct += int(hits.sum())
                seen += hits.size
            row = [epoch + 1, total_loss / len(order), correct / seen]
            if eval_set is not None:
                row.append(evaluate(params, cfg, eval_set).overall_accuracy)
            result.history.append(tuple(row))
            result.stopped_epoch = epoch + 1
            if writer:
                writer.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])
                fh.flush()
            if epoch_callback is not None:
                epoch_callback(row)
            if target_accuracy is not None and eval_set is not None and row[-1] >= target_accuracy:
                break
    finally:
        if fh:
            fh.close()
    return result


# -------------------------------------------------------------- evaluation


@dataclass(frozen=True, eq=False)
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    predictions: np.ndarray
    logits: np.ndarray
    class_miou: float | None = None
    instance_miou: float | None = None

    def summary(self):
        out = {"overall_accuracy": self.overall_accuracy,
               "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy]}
        if self.instance_miou is not None:
            out.update(instance_miou=self.instance_miou, class_miou=self.class_miou)
        return out


def accuracy(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise InvalidInputError(f"prediction shape {preds.shape} != label shape {labels.shape}")
    return float(np.mean(preds == labels)) if preds.size else 0.0


def confusion_matrix(preds, labels, n_classes):
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (np.asarray(labels).ravel(), np.asarray(preds).ravel()), 1)
    return mat


def average_votes(votes):
    """Mean of the vote logits, written so identical votes return the first exactly."""
    first = votes[0]
    if len(votes) == 1:
        return first
    return first + sum(v - first for v in votes[1:]) / len(votes)


def predict_logits(params, cfg, points, category=0, votes=1, scale_range=(1.0, 1.0), seed=0, batch_size=32):
    """Vote-averaged logits; each vote rescales every cloud by a uniform draw."""
    if votes < 1:
        raise ConfigError(f"votes must be >= 1, got {votes}")
    lo, hi = (float(s) for s in scale_range)
    if not 0 < lo <= hi:
        raise ConfigError(f"scale range must satisfy 0 < lo <= hi, got {scale_range}")
    pts = np.asarray(points)
    dtype = params["local1.w_center"].dtype
    rng = np.random.default_rng(seed)
    all_votes = []
    for _ in range(votes):
        scale = rng.uniform(lo, hi, size=(pts.shape[0], 1, 1))
        x = pts.astype(dtype, copy=True)
        x[..., :3] = x[..., :3] * scale.astype(dtype)
        chunks = []
        with T.no_grad():
            for s in range(0, len(x), batch_size):
                chunks.append(_logits(params, cfg, x[s : s + batch_size], category).data)
        all_votes.append(np.concatenate(chunks))
    return average_votes(all_votes)


def evaluate(params, cfg, dataset, votes=1, scale_range=(1.0, 1.0), seed=0, batch_size=32):
    """Accuracy, per-class accuracy and confusion (plus mIoU for segmentation)."""
    logits = predict_logits(params, cfg, dataset.points, dataset.category, votes, scale_range, seed, batch_size)
    preds = logits.argmax(-1)
    labels = np.asarray(dataset.labels)
    n_classes = logits.shape[-1]
    conf = confusion_matrix(preds, labels, n_classes)
    counts = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(conf) / np.maximum(counts, 1), np.nan)
    report = dict(overall_accuracy=accuracy(preds, labels), per_class_accuracy=per_class, confusion=conf,
                  predictions=preds, logits=logits)
    if dataset.is_segmentation:
        parts = {dataset.category: list(range(n_classes))}
        inst, cls = miou(preds, labels, parts, [dataset.category] * len(labels))
        report.update(instance_miou=inst, class_miou=cls)
    return EvalReport(**report)


def shape_iou(pred, label, parts):
    """Mean IoU over ``parts`` for one shape; a part absent from both counts as 1."""
    pred, label = np.asarray(pred), np.asarray(label)
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (label == p))
        union = np.sum((pred == p) | (label == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def miou(per_point_preds, per_point_labels, part_sets, categories=None):
    """Return ``(instance_miou, class_miou)``.

    ``part_sets`` maps a category to its part ids (a plain sequence means a
    single category 0); ``categories`` gives each shape's category.
    """
    if not isinstance(part_sets, dict):
        part_sets = {0: list(part_sets)}
    preds = list(per_point_preds)
    labels = list(per_point_labels)
    if len(preds) != len(labels):
        raise InvalidInputError("one prediction vector per labeled shape is required")
    if categories is None:
        categories = [next(iter(part_sets))] * len(preds)
    per_shape, by_cat = [], {}
    for pred, label, cat in zip(preds, labels, categories):
        if np.shape(pred) != np.shape(label):
            raise InvalidInputError(f"prediction shape {np.shape(pred)} != label shape {np.shape(label)}")
        if cat not in part_sets:
            raise InvalidInputError(f"no part set for category {cat!r}")
        value = shape_iou(pred, label, part_sets[cat])
        per_shape.append(value)
        by_cat.setdefault(cat, []).append(value)
    if not per_shape:
        return 1.0, 1.0
    return float(np.mean(per_shape)), float(np.mean([np.mean(v) for v in by_cat.values()]))


# ----------------------------------------------------------------- harnesses


@dataclass(frozen=True)
class AblationToggles:
    use_knn_local: bool = True
    use_self_attention: bool = False
    use_sharp: bool = True
    use_gentle: bool = True
    use_voting: bool = False

    def __post_init__(self):
        if self.use_self_attention and (self.use_sharp or self.use_gentle):
            raise ConfigError("self-attention and the sharp/gentle branches are alternative fusion paths")

    def apply(self, cfg):
        return replace(cfg, use_knn_local=self.use_knn_local, use_self_attention=self.use_self_attention,
                       use_sharp=self.use_sharp, use_gentle=self.use_gentle)

    def label(self):
        names = [("knn", self.use_knn_local), ("self-attention", self.use_self_attention),
                 ("sharp", self.use_sharp), ("gentle", self.use_gentle), ("voting", self.use_voting)]
        return "+".join(n for n, on in names if on) or "mlp"


FULL = AblationToggles()
KNN_ONLY = AblationToggles(use_sharp=False, use_gentle=False)


@dataclass
class AblationRow:
    toggles: AblationToggles
    seeds: tuple
    reports: list

    @property
    def accuracies(self):
        return [r.overall_accuracy for r in self.reports]

    @property
    def mean_accuracy(self):
        return float(np.mean(self.accuracies))


def run_ablation(train_set, test_set, toggles, base_cfg, tcfg, seeds=(0,), csv_path=None,
                 votes=10, scale_range=(0.8, 1.2)):
    """Train and evaluate one model per (toggle set, seed) on shared budgets."""
    rows = []
    for tg in toggles:
        reports = []
        for seed in seeds:
            cfg = tg.apply(replace(base_cfg, seed=int(seed)))
            params = init_model(cfg)
            train(params, cfg, train_set, replace(tcfg, seed=int(seed)))
            v, sr = (votes, scale_range) if tg.use_voting else (1, (1.0, 1.0))
            reports.append(evaluate(params, cfg, test_set, votes=v, scale_range=sr, seed=int(seed)))
        rows.append(AblationRow(tg, tuple(int(s) for s in seeds), reports))
    if csv_path:
        write_ablation_csv(rows, csv_path)
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["knn", "self_attention", "sharp", "gentle", "voting", "seeds", "mean_accuracy", "accuracies"])
        for r in rows:
            t = r.toggles
            w.writerow([int(t.use_knn_local), int(t.use_self_attention), int(t.use_sharp), int(t.use_gentle),
                        int(t.use_voting), ";".join(map(str, r.seeds)), f"{r.mean_accuracy:.6f}",
                        ";".join(f"{a:.6f}" for a in r.accuracies)])


def run_config_sweep(train_set, test_set, base_cfg, tcfg, field_name, values, seed=0, csv_path=None):
    """Retrain with one ``ModelConfig`` field swept (selection count, dynamic graph, ...)."""
    if field_name not in asdict(base_cfg):
        raise ConfigError(f"unknown model config field {field_name!r}")
    out = []
    for value in values:
        cfg = replace(base_cfg, **{field_name: value, "seed": seed})
        params = init_model(cfg)
        train(params, cfg, train_set, replace(tcfg, seed=seed))
        out.append((value, evaluate(params, cfg, test_set).overall_accuracy))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([field_name, "accuracy"])
            w.writerows([(v, f"{a:.6f}") for v, a in out])
    return out


def _perturb(points, mode, value, rng, rotation="z", noise="jitter"):
    pts = np.array(points, dtype=np.float64, copy=True)
    s, n, _ = pts.shape
    if mode == "dropout":
        count = int(value)
        if not 8 <= count <= n:
            raise ConfigError(f"dropout point count must lie in [8, {n}], got {count}")
        if count == n:
            return pts
        keep = np.sort(np.argsort(rng.random((s, n)), axis=1)[:, :count], axis=1)
        return np.take_along_axis(pts, keep[..., None], axis=1)
    if mode == "rotate":
        angle = np.deg2rad(float(value))
        for i in range(s):
            if rotation == "z":
                r = rotation_z(angle)
            else:
                axis = rng.normal(size=3)
                r = Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix()
            pts[i, :, :3] = pts[i, :, :3] @ r.T
        return pts
    if noise == "jitter":
        pts[..., :3] += rng.normal(0.0, float(value), size=pts[..., :3].shape)
        return pts
    extra = int(round(float(value) * n))
    if extra == 0:
        return pts
    clutter = np.zeros((s, extra, pts.shape[2]))
    clutter[..., :3] = rng.uniform(-1, 1, size=(s, extra, 3))
    return np.concatenate([pts, clutter], axis=1)


def run_robustness(params, cfg, dataset, mode, grid, seed=0, csv_path=None, rotation="z", noise="jitter"):
    """Accuracy of a trained model under dropout, rotation or noise perturbations.

    ``grid`` holds point counts (dropout), angles in degrees (rotate; about
    z or a random axis per cloud when ``rotation='so3'``) or jitter sigmas /
    clutter fractions (noise).
    """
    if mode not in ROBUSTNESS_MODES:
        raise ConfigError(f"unknown robustness mode {mode!r}")
    if rotation not in ("z", "so3") or noise not in ("jitter", "clutter"):
        raise ConfigError("rotation must be 'z' or 'so3' and noise 'jitter' or 'clutter'")
    out = []
    for g in grid:
        rng = np.random.default_rng(seed)
        pts = _perturb(dataset.points, mode, g, rng, rotation, noise)
        labels = dataset.labels
        if dataset.is_segmentation and pts.shape[1] != dataset.points.shape[1]:
            if mode == "noise":
                extra = pts.shape[1] - labels.shape[1]
                labels = np.concatenate([labels, np.full((len(labels), extra), CLUTTER_LABEL)], axis=1)
            else:
                raise ConfigError("dropout robustness is only defined for classification datasets")
        report = evaluate(params, cfg, replace(dataset, points=pts, labels=labels))
        out.append((float(g), report.overall_accuracy))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid_value", "accuracy"])
            w.writerows([(f"{g:g}", f"{a:.6f}") for g, a in out])
    return out


def load_history(path):
    """Read back an ``epoch,loss,acc`` CSV log as a list of tuples."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    return [tuple([int(r[0])] + [float(v) for v in r[1:]]) for r in rows[1:]]
