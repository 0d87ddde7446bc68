"""Training losses and the hard Dice evaluation metric."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable

import numpy as np

from .errors import InvalidConfig, InvalidProbability, LabelOutOfRange, ShapeMismatch


@dataclass
class LossConfig:
    num_classes: int
    smoothing: float = 0.05
    dice_eps: float = 1e-5

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidConfig("need at least two classes")
        if not 0.0 <= self.smoothing < 1.0:
            raise InvalidConfig("label smoothing must lie in [0, 1)")
        if not self.dice_eps > 0:
            raise InvalidConfig("dice epsilon must be positive")


def _check_labels(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeMismatch(f"{n} rows but {labels.shape[0]} labels")
    if n == 0:
        raise ShapeMismatch("loss over zero voxels")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    return labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def smoothed_targets(labels: np.ndarray, k: int, smoothing: float, dtype=np.float64) -> np.ndarray:
    q = np.full((labels.shape[0], k), smoothing / (k - 1), dtype=dtype)
    q[np.arange(labels.shape[0]), labels] = 1.0 - smoothing
    return q


def ce_label_smoothing(logits: np.ndarray, labels, cfg: LossConfig):
    """Mean label-smoothed cross-entropy and its gradient w.r.t. logits."""
    n, k = logits.shape
    if k != cfg.num_classes:
        raise ShapeMismatch(f"expected {cfg.num_classes} logit columns, got {k}")
    labels = _check_labels(labels, n, k)
    q = smoothed_targets(labels, k, cfg.smoothing, logits.dtype)
    logp = log_softmax(logits)
    loss = -(q * logp).sum() / n
    grad = (np.exp(logp) - q) / n
    return float(loss), grad


def soft_dice(probs: np.ndarray, labels, cfg: LossConfig, check: bool = True):
    """Soft Dice averaged over foreground classes, with gradient w.r.t. probs."""
    n, k = probs.shape
    if k != cfg.num_classes:
        raise ShapeMismatch(f"expected {cfg.num_classes} probability columns, got {k}")
    labels = _check_labels(labels, n, k)
    if check:
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-5):
            raise InvalidProbability("rows must be nonnegative and sum to 1")
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    eps = cfg.dice_eps
    inter = (probs * onehot).sum(axis=0)[1:]
    denom = probs.sum(axis=0)[1:] + onehot.sum(axis=0)[1:] + eps
    numer = 2.0 * inter + eps
    value = float(np.mean(numer / denom))
    grad = np.zeros_like(probs)
    grad[:, 1:] = (2.0 * onehot[:, 1:] * denom - numer) / (denom * denom) / (k - 1)
    return value, grad


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    return probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))


def combined_loss(logits: np.ndarray, labels, cfg: LossConfig):
    """Cross-entropy plus ``1 - SoftDice`` with equal weights."""
    ce, d_ce = ce_label_smoothing(logits, labels, cfg)
    probs = softmax(logits)
    dice, d_dice = soft_dice(probs, labels, cfg, check=False)
    grad = d_ce - softmax_backward(probs, d_dice)
    return ce + (1.0 - dice), grad


@dataclass
class ClassGrouping:
    """Named sets of class ids; ``overall`` always means any foreground label."""

    groups: Dict[str, frozenset]

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Iterable[int]]) -> "ClassGrouping":
        groups = {}
        for name, ids in mapping.items():
            ids = frozenset(int(i) for i in ids)
            if any(i < 0 or i > 0xFFFF for i in ids):
                raise InvalidConfig(f"group {name!r} has an id outside uint16")
            groups[str(name)] = ids
        return cls(groups)

    @classmethod
    def load(cls, path) -> "ClassGrouping":
        with open(path) as f:
            return cls.from_mapping(json.load(f))

    @classmethod
    def per_class(cls, num_classes: int) -> "ClassGrouping":
        return cls.from_mapping({f"class_{c}": [c] for c in range(1, num_classes)})

    def validate(self, num_classes: int) -> None:
        for name, ids in self.groups.items():
            if any(i >= num_classes for i in ids):
                raise InvalidConfig(f"group {name!r} references an id >= {num_classes}")


def _members(vol: np.ndarray, ids) -> np.ndarray:
    if ids is None:
        return vol > 0
    return np.isin(vol, np.fromiter(ids, dtype=np.int64))


def hard_dice(pred: np.ndarray, gt: np.ndarray, grouping: ClassGrouping) -> dict:
    """Dice percentage per group, plus ``overall`` over all foreground labels.

    Returns ``{"dice": {group: value}, "empty_both": [groups...]}``; a group
    absent from both volumes scores 100 and is listed under ``empty_both``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    items = list(grouping.groups.items())
    if "overall" not in grouping.groups:
        items.append(("overall", None))
    dice, empty = {}, []
    for name, ids in items:
        a = _members(pred, ids)
        b = _members(gt, ids)
        sa, sb = int(a.sum()), int(b.sum())
        if sa + sb == 0:
            dice[name] = 100.0
            empty.append(name)
        else:
            dice[name] = 200.0 * int(np.count_nonzero(a & b)) / (sa + sb)
    return {"dice": dice, "empty_both": empty}


def write_dice_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
