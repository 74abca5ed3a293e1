"""Two-step training, mutual-learning purification, fine-tuning and evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from . import tensor as tn
from .errors import ConfigError, TrainingError, UsageError
from .model import (ArchSpec, ModelCheckpoint, flatten_params, forward, init_model,
                    predict_logits)
from .poisoning import Dataset
from .rng import Rng

log = logging.getLogger(__name__)

STRUCTURES = ("ml", "ts", "st")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    early_stop_patience: int | None = None

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 when set")


@dataclass
class MetricsReport:
    asr: float
    ba: float
    pa: float
    topk: dict[int, float] = field(default_factory=dict)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    der: float | None = None
    stage: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topk"] = {str(k): v for k, v in self.topk.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(asr=d["asr"], ba=d["ba"], pa=d["pa"],
                   topk={int(k): v for k, v in d.get("topk", {}).items()},
                   loss_curves={k: list(v) for k, v in d.get("loss_curves", {}).items()},
                   der=d.get("der"), stage=d.get("stage", ""))


@dataclass
class SoftDataset:
    """D2: the training images paired with the TT model's stored raw logits."""

    images: np.ndarray
    soft: losses.SoftLabel
    poisoned: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


class SGD:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``w -= lr * v``."""

    def __init__(self, weights: dict[str, tn.Tensor], lr: float, momentum: float):
        self.weights = weights
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros(w.shape) for k, w in weights.items()}

    def step(self) -> None:
        for name, w in self.weights.items():
            if w.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += w.grad
            w.data -= self.lr * v
            w.grad = None


def _batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _check_loss(value: float, stage: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{stage}: non-finite loss at epoch {epoch}")


def _require_benign(ds: Dataset, what: str) -> None:
    if np.any(ds.poisoned):
        raise UsageError(f"{what} must be fully benign but contains poisoned samples")


def accuracy(model: ModelCheckpoint, ds: Dataset) -> float:
    if len(ds) == 0:
        raise UsageError("accuracy of an empty dataset")
    pred = predict_logits(model, ds.images).argmax(axis=1)
    return float(np.mean(pred == ds.labels))


def _fit_ce(model: ModelCheckpoint, train: Dataset, cfg: TrainConfig, stage: str,
            val: Dataset | None = None, history: dict | None = None) -> ModelCheckpoint:
    """Mini-batch cross-entropy training shared by TT and fine-tuning."""
    weights = model.tensors(requires_grad=True)
    opt = SGD(weights, cfg.lr, cfg.momentum)
    rng = Rng(cfg.seed).child(stage, "batches")
    curve = []
    best, best_acc, stale = model, -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            logits, _ = forward(model.arch, weights, train.images[idx])
            loss = losses.cross_entropy(logits, train.labels[idx])
            _check_loss(loss.item(), stage, epoch)
            tn.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(train))
        current = model.with_params(flatten_params(model.arch, weights), epoch=epoch, stage=stage)
        if val is None or cfg.early_stop_patience is None:
            best = current
            continue
        acc = accuracy(current, val)
        log.debug("%s epoch %d loss %.4f val acc %.4f", stage, epoch, curve[-1], acc)
        # ties move the checkpoint forward but do not reset patience
        stale = 0 if acc > best_acc else stale + 1
        if acc >= best_acc:
            best, best_acc = current, acc
        if stale >= cfg.early_stop_patience:
            break
    if history is not None:
        history[stage] = curve
    return best


def train_tt(arch: ArchSpec, d1: Dataset, val: Dataset, cfg: TrainConfig,
             history: dict | None = None) -> ModelCheckpoint:
    """Target training: plain cross-entropy on the (possibly poisoned) training set.

    With ``early_stop_patience`` set, training stops once validation accuracy
    has not improved for that many epochs and the best-validation checkpoint
    is returned.
    """
    cfg.validate()
    if len(d1) == 0:
        raise UsageError("empty training set")
    model = init_model(arch, Rng(cfg.seed).child("tt", "init"))
    if cfg.epochs == 0:
        return model.with_params(model.params, stage="tt")
    if val is not None and len(val) == 0:
        val = None
    return _fit_ce(model, d1, cfg, "tt", val, history)


def build_soft_dataset(f_tt: ModelCheckpoint, d1: Dataset, batch_size: int = 256) -> SoftDataset:
    """Pair every training image with the TT model's raw logits and its dataset label."""
    if d1.image_shape != (f_tt.arch.input_channels, f_tt.arch.input_size, f_tt.arch.input_size):
        raise UsageError(f"images {d1.image_shape} do not fit the model input")
    logits = predict_logits(f_tt, d1.images, batch_size)
    return SoftDataset(images=d1.images, soft=losses.SoftLabel(logits, d1.labels.copy()),
                       poisoned=d1.poisoned.copy())


def train_nt(arch: ArchSpec, d2: SoftDataset, cfg: TrainConfig,
             history: dict | None = None) -> ModelCheckpoint:
    """Non-target training of a freshly initialised model on the stored soft labels."""
    cfg.validate()
    if len(d2) == 0:
        raise UsageError("empty soft-label dataset")
    model = init_model(arch, Rng(cfg.seed).child("nt", "init"))
    if cfg.epochs == 0:
        return model.with_params(model.params, stage="nt")
    weights = model.tensors(requires_grad=True)
    opt = SGD(weights, cfg.lr, cfg.momentum)
    rng = Rng(cfg.seed).child("nt", "batches")
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(d2), cfg.batch_size, rng):
            logits, _ = forward(arch, weights, d2.images[idx])
            target = losses.SoftLabel(d2.soft.logits[idx], d2.soft.target_index[idx])
            loss = losses.nt_loss(target, logits)
            _check_loss(loss.item(), "nt", epoch)
            tn.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(d2))
    if history is not None:
        history["nt"] = curve
    return model.with_params(flatten_params(arch, weights), epoch=cfg.epochs, stage="nt")


def mutual_learning(f_tt: ModelCheckpoint, f_nt: ModelCheckpoint, clean: Dataset, alpha: float,
                    beta: float, T: float, cfg: TrainConfig, *, structure: str = "ml",
                    representation: str = "fm", t2_scaling: bool = False,
                    history: dict | None = None) -> tuple[ModelCheckpoint, ModelCheckpoint]:
    """Purify the NT student with the TT teacher on a small clean set.

    Per batch both networks run forward; the student takes a step on the
    softened-KL + CE loss against the teacher's logits, and the teacher takes
    a step on conv-block feature matching toward the student's taps + ``beta``
    CE.  Each side sees the other's pre-step outputs as constants.

    ``structure`` selects which side is updated: ``"ml"`` both, ``"ts"`` only
    the student, ``"st"`` only the teacher.  Returns ``(teacher', student')``.
    """
    cfg.validate()
    if structure not in STRUCTURES:
        raise ConfigError(f"unknown teacher-student structure {structure!r}")
    if f_tt.arch != f_nt.arch:
        raise UsageError("teacher and student architectures differ")
    if len(clean) == 0:
        raise UsageError("empty clean set")
    _require_benign(clean, "mutual-learning clean set")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if beta < 0 or not T > 0:
        raise ConfigError("beta must be >= 0 and T > 0")
    if cfg.epochs == 0:
        return f_tt, f_nt

    arch = f_tt.arch
    update_teacher = structure in ("ml", "st")
    update_student = structure in ("ml", "ts")
    tw = f_tt.tensors(requires_grad=update_teacher)
    sw = f_nt.tensors(requires_grad=update_student)
    t_opt = SGD(tw, cfg.lr, cfg.momentum)
    s_opt = SGD(sw, cfg.lr, cfg.momentum)
    rng = Rng(cfg.seed).child("ml", "batches")
    n_conv = len(arch.conv_filters)
    t_curve, s_curve = [], []
    for epoch in range(1, cfg.epochs + 1):
        t_total = s_total = 0.0
        for idx in _batches(len(clean), cfg.batch_size, rng):
            x, y = clean.images[idx], clean.labels[idx]
            t_logits, t_taps = forward(arch, tw, x)
            s_logits, s_taps = forward(arch, sw, x)
            s_loss = losses.ml_student_loss(s_logits, t_logits.data, y, alpha, T, t2_scaling)
            t_loss = losses.ml_teacher_loss(t_taps[:n_conv], [s.data for s in s_taps[:n_conv]],
                                            t_logits, y, beta, representation)
            _check_loss(s_loss.item() + t_loss.item(), "ml", epoch)
            if update_student:
                tn.backward(s_loss)
                s_opt.step()
            if update_teacher:
                tn.backward(t_loss)
                t_opt.step()
            t_total += t_loss.item() * len(idx)
            s_total += s_loss.item() * len(idx)
        t_curve.append(t_total / len(clean))
        s_curve.append(s_total / len(clean))
    if history is not None:
        history["ml-teacher"] = t_curve
        history["ml-student"] = s_curve
    teacher = f_tt.with_params(flatten_params(arch, tw), epoch=f_tt.epoch + cfg.epochs,
                               stage="ml-teacher") if update_teacher else f_tt
    student = f_nt.with_params(flatten_params(arch, sw), epoch=f_nt.epoch + cfg.epochs,
                               stage="ml-student") if update_student else f_nt
    return teacher, student


def fine_tune(f: ModelCheckpoint, clean: Dataset, cfg: TrainConfig,
              history: dict | None = None) -> ModelCheckpoint:
    """Fine-tuning baseline: continue cross-entropy training on the clean set only."""
    cfg.validate()
    if len(clean) == 0:
        raise UsageError("empty clean set")
    _require_benign(clean, "fine-tuning clean set")
    if cfg.epochs == 0:
        return f
    tuned = _fit_ce(f, clean, replace(cfg, early_stop_patience=None), "ft", None, history)
    return tuned.with_params(tuned.params, epoch=f.epoch + cfg.epochs)


# ---------------------------------------------------------------- evaluation

def metrics_from_logits(benign_logits: np.ndarray, benign_labels: np.ndarray,
                        poisoned_logits: np.ndarray, original_labels: np.ndarray,
                        y_t: int, ks=(1, 2)) -> MetricsReport:
    if len(benign_labels) == 0 or len(original_labels) == 0:
        raise UsageError("empty test set")
    k_classes = poisoned_logits.shape[1]
    p_pred = poisoned_logits.argmax(axis=1)
    asr = float(np.mean(p_pred == y_t))
    pa = float(np.mean(p_pred == original_labels))
    ba = float(np.mean(benign_logits.argmax(axis=1) == benign_labels))
    own = poisoned_logits[np.arange(len(original_labels)), original_labels]
    rank = np.sum(poisoned_logits > own[:, None], axis=1)
    topk = {}
    for k in ks:
        if not 1 <= k <= k_classes:
            raise UsageError(f"top-k needs 1 <= k <= {k_classes}, got {k}")
        topk[int(k)] = float(np.mean(rank < k))
    return MetricsReport(asr=asr, ba=ba, pa=pa, topk=topk)


def evaluate(model: ModelCheckpoint, benign_test: Dataset, poisoned_test: Dataset, y_t: int,
             ks=(1, 2)) -> MetricsReport:
    """ASR, PA and top-k on the triggered set; BA on the benign set."""
    if len(benign_test) == 0 or len(poisoned_test) == 0:
        raise UsageError("empty test set")
    report = metrics_from_logits(predict_logits(model, benign_test.images), benign_test.labels,
                                 predict_logits(model, poisoned_test.images),
                                 poisoned_test.original_labels, y_t, ks)
    report.stage = model.stage
    return report


def penultimate_features(model: ModelCheckpoint, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    weights = model.tensors()
    out = []
    with tn.no_grad():
        for s in range(0, len(images), batch_size):
            _, taps = forward(model.arch, weights, images[s:s + batch_size])
            out.append(taps[-1].data)
    return np.concatenate(out)


def export_penultimate_features(model: ModelCheckpoint, ds: Dataset, path) -> Path:
    """CSV of penultimate activations with label, original label and poisoned flag per row."""
    if len(ds) == 0:
        raise UsageError("cannot export features of an empty dataset")
    feats = penultimate_features(model, ds.images)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(feats.shape[1])]
                   + ["label", "original_label", "poisoned"])
        for row, lab, orig, p in zip(feats, ds.labels, ds.original_labels, ds.poisoned):
            w.writerow([format(v, ".9g") for v in row] + [int(lab), int(orig), int(p)])
    return path
