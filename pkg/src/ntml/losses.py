"""Training objectives for target training, non-target training and mutual learning.

Every loss takes either one sample (logits of shape (K,)) or a batch
((N,K) logits with N labels) and averages over the batch.  Arguments that
come from the *other* network are always treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class SoftLabel:
    """Stored raw teacher logits and the index ``t`` of the sample's dataset label.

    ``logits`` may be (K,) with a scalar ``target_index`` or (N,K) with N indices.
    """

    logits: np.ndarray
    target_index: np.ndarray | int

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        t = np.asarray(self.target_index, dtype=np.int64)
        if not np.all(np.isfinite(logits)):
            raise UsageError("soft label logits must be finite")
        k = logits.shape[-1]
        if np.any(t < 0) or np.any(t >= k):
            raise UsageError(f"target index outside [0, {k})")
        if logits.ndim == 2 and t.shape != (logits.shape[0],):
            raise UsageError("one target index per row required")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "target_index", t)


def _labels(logits: Tensor, label) -> np.ndarray:
    k = logits.shape[-1]
    lab = np.asarray(label, dtype=np.int64)
    if logits.ndim == 1 and lab.ndim != 0:
        raise UsageError("single logits vector takes a scalar label")
    if logits.ndim == 2 and lab.shape != (logits.shape[0],):
        raise UsageError(f"expected {logits.shape[0]} labels, got shape {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= k):
        raise UsageError(f"label outside [0, {k})")
    return lab


def _np_log_softmax(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``, batch-averaged."""
    lab = _labels(logits, label)
    return tn.mean(tn.mul(tn.pick(tn.log_softmax(logits), lab), -1.0))


def nontarget_log_probs(logits: Tensor, t) -> Tensor:
    if logits.shape[-1] < 2:
        raise UsageError("non-target softmax needs at least 2 classes")
    t = _labels(logits, t)
    return tn.log_softmax(tn.drop_column(logits, t))


def nontarget_probs(logits: Tensor, t) -> Tensor:
    """Softmax restricted to the classes other than ``t``.

    Output has K-1 entries in the original class order with ``t`` removed; the
    logit ``z_t`` never enters the computation.
    """
    if logits.shape[-1] < 2:
        raise UsageError("non-target softmax needs at least 2 classes")
    t = _labels(logits, t)
    return tn.softmax_temp(tn.drop_column(logits, t), 1.0)


def nt_loss(teacher: SoftLabel, student_logits: Tensor) -> Tensor:
    """``-sum_{i != t} p_i^teacher * log p_i^student`` over non-target classes.

    This is a cross-entropy; it differs from the non-target KL divergence only
    by the teacher's entropy, which is constant here, so gradients agree.
    """
    if teacher.logits.shape != student_logits.shape:
        raise UsageError(f"teacher logits {teacher.logits.shape} vs student {student_logits.shape}")
    t = teacher.target_index
    p_teacher = np.exp(_np_log_softmax(tn.drop_column(Tensor(teacher.logits), t).data))
    log_q = nontarget_log_probs(student_logits, t)
    per_sample = tn.sum(tn.mul(log_q, -p_teacher), axis=-1)
    return tn.mean(per_sample)


def kl_soft(student_logits: Tensor, teacher_logits, T: float) -> Tensor:
    """Batch mean of ``KL(p_teacher || p_student)``, both softened by ``T``."""
    log_p = _np_log_softmax(_data(teacher_logits), T)
    p = np.exp(log_p)
    log_q = tn.log_softmax(student_logits, T)
    const = np.sum(np.where(p > 0, p * log_p, 0.0), axis=-1)
    per_sample = tn.add(tn.sum(tn.mul(log_q, -p), axis=-1), const)
    return tn.mean(per_sample)


def ml_student_loss(student_logits: Tensor, teacher_logits, label, alpha: float, T: float,
                    t2_scaling: bool = False) -> Tensor:
    """``alpha * KL(p_teacher || p_student) + (1 - alpha) * CE(student, label)``.

    Softmaxes run at temperature ``T`` over all K classes.  With
    ``t2_scaling`` the KL term is multiplied by ``T**2`` (Hinton-style
    gradient compensation); off by default.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if not T > 0:
        raise ConfigError(f"temperature must be positive, got {T}")
    if _data(teacher_logits).shape != student_logits.shape:
        raise UsageError("teacher and student logits differ in shape")
    ce = cross_entropy(student_logits, label)
    if alpha == 0.0:
        return ce
    kl_weight = alpha * (T * T if t2_scaling else 1.0)
    kl = kl_soft(student_logits, teacher_logits, T)
    if alpha == 1.0:
        return tn.mul(kl, kl_weight)
    return tn.add(tn.mul(kl, kl_weight), tn.mul(ce, 1.0 - alpha))


def attention_map(tap: Tensor) -> Tensor:
    """Channel sum of squared activations: (C,H,W) -> (H,W), or batched (N,C,H,W) -> (N,H,W)."""
    if tap.ndim not in (3, 4):
        raise UsageError(f"attention map needs a 3-D or 4-D tap, got shape {tap.shape}")
    return tn.sum(tn.square(tap), axis=tap.ndim - 3)


def feature_distance(teacher_taps: Sequence[Tensor], student_taps: Sequence, representation: str = "fm") -> Tensor:
    """Sum over taps of the per-element mean squared difference; student side is constant."""
    if len(teacher_taps) != len(student_taps):
        raise UsageError(f"{len(teacher_taps)} teacher taps vs {len(student_taps)} student taps")
    if not teacher_taps:
        raise UsageError("no taps to compare")
    total = None
    for t_tap, s_tap in zip(teacher_taps, student_taps):
        s = _data(s_tap)
        if t_tap.shape != s.shape:
            raise UsageError(f"tap shapes differ: {t_tap.shape} vs {s.shape}")
        if representation == "am":
            t_tap = attention_map(t_tap)
            s = np.sum(s * s, axis=s.ndim - 3)
        elif representation != "fm":
            raise ConfigError(f"unknown feature representation {representation!r}")
        term = tn.mean(tn.square(tn.sub(t_tap, s)))
        total = term if total is None else tn.add(total, term)
    return total


def ml_teacher_loss(teacher_taps: Sequence[Tensor], student_taps: Sequence, teacher_logits: Tensor,
                    label, beta: float, representation: str = "fm") -> Tensor:
    """Feature matching toward the (constant) student taps plus ``beta`` times CE.

    ``representation="am"`` compares attention maps instead of raw feature maps.
    """
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    dist = feature_distance(teacher_taps, student_taps, representation)
    if beta == 0.0:
        return dist
    return tn.add(dist, tn.mul(cross_entropy(teacher_logits, label), beta))


def der(asr_before: float, asr_after: float, ba_before: float, ba_after: float) -> float:
    """Defense effectiveness rating from fractional ASR/BA before and after a defense."""
    for name, v in (("asr_before", asr_before), ("asr_after", asr_after),
                    ("ba_before", ba_before), ("ba_after", ba_after)):
        if not 0.0 <= v <= 1.0:
            raise UsageError(f"{name}={v} outside [0, 1]")
    d_asr = asr_before - asr_after
    d_ba = ba_before - ba_after
    return (max(0.0, d_asr) - max(0.0, d_ba) + 1.0) / 2.0
