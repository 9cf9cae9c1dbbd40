# evaluation.py
# 混同行列・マクロF1・正解率・感度/特異度・層化k分割

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.model_selection import StratifiedKFold

from errors import DataError, InvalidConfigError, InvalidDatasetError


@dataclass
class ConfusionMatrix:
    """行 = 正解クラス、列 = 予測クラス"""
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise DataError("confusion matrix counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_frame(self, class_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        names = list(class_names) if class_names else [str(i) for i in range(self.num_classes)]
        frame = pd.DataFrame(self.counts, columns=[f"pred_{n}" for n in names])
        frame.insert(0, 'true', names)
        return frame


def _safe_divide(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    # 0/0 は 0
    numerator = np.asarray(numerator, dtype=np.float64)
    denominator = np.asarray(denominator, dtype=np.float64)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out


def confusion_matrix(true_labels, predicted_labels, C: int) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if C < 1:
        raise InvalidConfigError(f"class count must be >= 1, got {C}")
    if len(true_labels) == 0:
        raise DataError("confusion matrix needs at least one sample")
    if len(true_labels) != len(predicted_labels):
        raise DataError(f"label length mismatch: {len(true_labels)} true vs {len(predicted_labels)} predicted")
    for name, labels in (('true', true_labels), ('predicted', predicted_labels)):
        if labels.min() < 0 or labels.max() >= C:
            raise DataError(f"{name} labels must lie in [0, {C})")
    return ConfusionMatrix(sk_confusion_matrix(true_labels, predicted_labels, labels=list(range(C))))


def per_class_scores(cm: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """クラスごとの (precision, recall, F1)"""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    return _safe_divide(tp, tp + fp), _safe_divide(tp, tp + fn), _safe_divide(2 * tp, 2 * tp + fp + fn)


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(per_class_scores(cm)[2].mean())


def macro_precision_recall(cm: ConfusionMatrix) -> Tuple[float, float]:
    precision, recall, _ = per_class_scores(cm)
    return float(precision.mean()), float(recall.mean())


def accuracy(cm: ConfusionMatrix) -> float:
    return float(_safe_divide(np.trace(cm.counts), cm.total))


def sensitivity_specificity(cm: ConfusionMatrix) -> Tuple[float, float]:
    """二値のみ。陽性はクラス1（疾患側）"""
    if cm.num_classes != 2:
        raise InvalidConfigError(f"sensitivity/specificity need a binary matrix, got C={cm.num_classes}")
    (tn, fp), (fn, tp) = cm.counts
    return float(_safe_divide(tp, tp + fn)), float(_safe_divide(tn, tn + fp))


@dataclass
class MetricsReport:
    accuracy: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    macro_f1: float
    macro_precision: float
    macro_recall: float
    confusion: ConfusionMatrix
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    class_names: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        """key: value 形式のテキスト"""
        names = self.class_names or [str(i) for i in range(len(self.f1))]
        lines = [
            f"samples: {self.confusion.total}",
            f"accuracy: {self.accuracy:.6f}",
            f"macro_f1: {self.macro_f1:.6f}",
            f"macro_precision: {self.macro_precision:.6f}",
            f"macro_recall: {self.macro_recall:.6f}",
        ]
        if self.sensitivity is not None:
            lines.append(f"sensitivity: {self.sensitivity:.6f}")
            lines.append(f"specificity: {self.specificity:.6f}")
        for i, name in enumerate(names):
            lines.append(f"class[{name}]: precision={self.precision[i]:.6f} "
                         f"recall={self.recall[i]:.6f} f1={self.f1[i]:.6f}")
        return '\n'.join(lines) + '\n'


def build_report(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    precision, recall, f1 = per_class_scores(cm)
    sen = spe = None
    if cm.num_classes == 2:
        sen, spe = sensitivity_specificity(cm)
    return MetricsReport(
        accuracy=accuracy(cm),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        macro_f1=float(f1.mean()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        confusion=cm,
        sensitivity=sen,
        specificity=spe,
        class_names=list(class_names or []),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """k分割の平均（混同行列は合計）"""
    if not reports:
        raise DataError("mean_report needs at least one report")

    def avg(values):
        return float(np.mean(values))

    binary = all(r.sensitivity is not None for r in reports)
    return MetricsReport(
        accuracy=avg([r.accuracy for r in reports]),
        precision=np.mean([r.precision for r in reports], axis=0).tolist(),
        recall=np.mean([r.recall for r in reports], axis=0).tolist(),
        f1=np.mean([r.f1 for r in reports], axis=0).tolist(),
        macro_f1=avg([r.macro_f1 for r in reports]),
        macro_precision=avg([r.macro_precision for r in reports]),
        macro_recall=avg([r.macro_recall for r in reports]),
        confusion=ConfusionMatrix(np.sum([r.confusion.counts for r in reports], axis=0)),
        sensitivity=avg([r.sensitivity for r in reports]) if binary else None,
        specificity=avg([r.specificity for r in reports]) if binary else None,
        class_names=list(reports[0].class_names),
    )


def stratified_kfold(labels, k: int, seed: int) -> List[np.ndarray]:
    """層化k分割。各分割のテスト側インデックス（昇順）を返す"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if k < 2:
        raise InvalidConfigError(f"k must be >= 2, got {k}")
    classes, counts = np.unique(labels, return_counts=True)
    small = [int(c) for c, n in zip(classes, counts) if n < k]
    if small:
        raise InvalidDatasetError(f"classes {small} have fewer than k={k} members")

    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    placeholder = np.zeros((len(labels), 1))
    return [np.sort(test) for _, test in splitter.split(placeholder, labels)]
