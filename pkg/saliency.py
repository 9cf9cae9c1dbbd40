# saliency.py
# 入力勾配によるサリエンシーマップと、予測クラスごとの平均サマリー

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import tensor_core as tc
from errors import EmptyClassError, InvalidStateError
from signal_pipeline import SegmentSequence
from tensor_core import Tensor


@dataclass
class SaliencyMap:
    values: np.ndarray
    predicted_class: int
    record_id: str = ''


@dataclass
class ClassSaliency:
    class_index: int
    mean_segment: np.ndarray
    mean_saliency: np.ndarray
    count: int
    top_segment: Optional[np.ndarray] = None


def input_saliency(model, seq: SegmentSequence) -> SaliencyMap:
    """|∂ logit_ĉ / ∂ 入力|（ĉ は予測クラス）。パディングセグメントは0

    model は logits(segments[B, T, S], mask[B, T]) と has_classifier を持つもの。
    """
    if not getattr(model, 'has_classifier', False):
        raise InvalidStateError("model has no trained classifier head")
    x = Tensor(seq.values[None].astype(np.float64), requires_grad=True, dtype=np.float64)
    mask = seq.pad_mask[None]
    logits = model.logits(x, mask)
    predicted = int(np.argmax(logits.data[0]))
    tc.backward(tc.slice_(logits, (0, predicted)))

    grad = np.zeros(seq.values.shape) if x.grad is None else x.grad[0]
    values = np.abs(grad)
    values[~seq.pad_mask] = 0.0
    if hasattr(model, 'zero_grad'):
        model.zero_grad()
    return SaliencyMap(values=values, predicted_class=predicted, record_id=seq.record_id)


def saliency_maps(model, dataset: Sequence[SegmentSequence]) -> List[SaliencyMap]:
    return [input_saliency(model, seq) for seq in dataset]


def _members(model, dataset, c: int, maps: Optional[List[SaliencyMap]]):
    maps = maps if maps is not None else saliency_maps(model, dataset)
    members = [(seq, m) for seq, m in zip(dataset, maps) if m.predicted_class == c and seq.n_real > 0]
    if not members:
        raise EmptyClassError(f"no samples predicted as class {c}")
    return members


def class_average_saliency(model, dataset: Sequence[SegmentSequence], c: int,
                           maps: Optional[List[SaliencyMap]] = None) -> ClassSaliency:
    """予測クラス c の全サンプルの実セグメントで平均（R波は共通の anchor 位置）"""
    members = _members(model, dataset, c, maps)
    segments = np.concatenate([seq.values[seq.pad_mask] for seq, _ in members]).astype(np.float64)
    saliency = np.concatenate([m.values[seq.pad_mask] for seq, m in members])
    return ClassSaliency(class_index=c, mean_segment=segments.mean(axis=0),
                         mean_saliency=saliency.mean(axis=0), count=len(segments))


def highest_saliency_segment(model, dataset: Sequence[SegmentSequence], c: int,
                             maps: Optional[List[SaliencyMap]] = None) -> np.ndarray:
    """サンプルごとにサリエンシー総和が最大の実セグメントを選び平均（同点は小さい番号）"""
    members = _members(model, dataset, c, maps)
    picked = []
    for seq, m in members:
        real = np.flatnonzero(seq.pad_mask)
        best = real[int(np.argmax(m.values[real].sum(axis=1)))]
        picked.append(seq.values[best].astype(np.float64))
    return np.mean(picked, axis=0)


def summarize_classes(model, dataset: Sequence[SegmentSequence],
                      num_classes: int) -> Dict[int, ClassSaliency]:
    """予測されたクラスだけのサマリー"""
    maps = saliency_maps(model, dataset)
    predicted = {m.predicted_class for m in maps}
    summaries = {}
    for c in range(num_classes):
        if c not in predicted:
            continue
        summary = class_average_saliency(model, dataset, c, maps)
        summary.top_segment = highest_saliency_segment(model, dataset, c, maps)
        summaries[c] = summary
    return summaries


def saliency_frame(summaries: Dict[int, ClassSaliency]) -> pd.DataFrame:
    """行 = サンプル位置 0..S-1、列 = クラスごとの平均セグメント / 平均サリエンシー / 最大セグメント"""
    if not summaries:
        return pd.DataFrame({'position': []})
    S = len(next(iter(summaries.values())).mean_segment)
    columns = {'position': np.arange(S)}
    for c, summary in sorted(summaries.items()):
        columns[f"mean_segment_c{c}"] = summary.mean_segment
        columns[f"mean_saliency_c{c}"] = summary.mean_saliency
        if summary.top_segment is not None:
            columns[f"top_segment_c{c}"] = summary.top_segment
    return pd.DataFrame(columns)
