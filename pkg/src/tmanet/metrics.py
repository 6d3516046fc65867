"""Confusion-matrix bookkeeping, IoU and evaluation over test snippets."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .data import TEST_SEED, VideoClip, select_memory
from .errors import ContractError, ShapeError
from .tensor import IGNORE_INDEX


class ConfusionMatrix:
    """C×C integer counts, rows ground truth, columns prediction."""

    def __init__(self, num_classes: int):
        if num_classes <= 0:
            raise ContractError("num_classes must be positive")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    C = cm.num_classes
    keep = gt != ignore_index
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= C):
        raise ContractError(f"predicted class outside [0, {C})")
    if g.size and (g.min() < 0 or g.max() >= C):
        raise ContractError(f"ground-truth class outside [0, {C}) and not {ignore_index}")
    cm.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
    return cm


def miou(cm: ConfusionMatrix) -> dict:
    """Per-class IoU (NaN where a class never occurs) and their mean over present classes."""
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - diag
    present = union > 0
    if not present.any():
        raise ContractError("no evaluated classes")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = diag[present] / union[present]
    return {"per_class_iou": iou.tolist(), "mean_iou": float(iou[present].mean())}


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    return float(np.trace(cm.counts) / total) if total else float("nan")


class Predictor(Protocol):
    def predict(self, clip: VideoClip) -> np.ndarray: ...


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    mean_iou: float
    per_class: list[float]
    pixel_acc: float


def evaluate(
    model: Predictor,
    dataset: Iterable[VideoClip],
    T: int,
    sampler_mode: str = "continuous",
    num_classes: int | None = None,
    window: int = 10,
    seed: int = TEST_SEED,
) -> EvalResult:
    """Argmax predictions on every clip's query frame, pooled into one confusion matrix.

    Clips that store more than T past frames get their memory drawn with
    ``sampler_mode`` from a generator keyed on (seed, clip position).
    """
    if num_classes is None:
        num_classes = model.config.num_classes
    cm = ConfusionMatrix(num_classes)
    for i, clip in enumerate(dataset):
        if clip.T != T:
            clip = select_memory(clip, T, sampler_mode, window, np.random.default_rng([seed, i]))
        accumulate(cm, model.predict(clip), clip.label)
    scores = miou(cm)
    return EvalResult(cm, scores["mean_iou"], scores["per_class_iou"], pixel_accuracy(cm))


def format_report(result: EvalResult, class_names: list[str] | None = None) -> str:
    lines = ["class\tIoU"]
    for c, v in enumerate(result.per_class):
        name = class_names[c] if class_names else str(c)
        lines.append(f"{name}\t{'n/a' if np.isnan(v) else f'{v:.6f}'}")
    lines.append(f"mIoU {result.mean_iou:.6f} pixel_acc {result.pixel_acc:.6f}")
    return "\n".join(lines) + "\n"
