# tests/conftest.py
# テスト共通の小さなモデル設定とデータ

import numpy as np
import pytest

from model import ModelConfig, StructuralEncoderConfig, TransformerConfig, init_model
from signal_pipeline import SegmentSequence


def tiny_config(num_classes: int = 3) -> ModelConfig:
    """S=16, d=8, 1層2ヘッド（勾配チェック用）"""
    return ModelConfig(
        S=16,
        num_classes=num_classes,
        head_hidden=8,
        encoder=StructuralEncoderConfig(channels=[4, 4, 4, 4, 4, 4], kernel_size=5, embed_dim=8),
        transformer=TransformerConfig(num_layers=1, num_heads=2, model_dim=8, ffn_dim=16, dropout=0.0),
    )


def make_sequence(values: np.ndarray, label=None, record_id: str = '', n_real=None) -> SegmentSequence:
    values = np.asarray(values, dtype=np.float32)
    N = len(values)
    n_real = N if n_real is None else n_real
    return SegmentSequence(
        values=values,
        peak_index=np.full(N, 6),
        pre_len=np.full(N, 6),
        post_len=np.full(N, 9),
        degenerate=np.zeros(N, dtype=bool),
        pad_mask=np.arange(N) < n_real,
        record_id=record_id,
        label=label,
    )


def beat_segments(count: int, S: int = 16, seed: int = 0, label: int = 0) -> np.ndarray:
    """ガウス形の心拍らしいセグメント（値は [0, 1]）"""
    rng = np.random.default_rng(seed)
    t = np.arange(S)
    rows = []
    for _ in range(count):
        center = S * 0.4 + rng.normal(0, 0.5)
        width = 1.5 + 0.5 * label + 0.2 * rng.random()
        row = np.exp(-0.5 * ((t - center) / width) ** 2) + 0.02 * rng.random(S)
        rows.append((row - row.min()) / (row.max() - row.min()))
    return np.array(rows, dtype=np.float32)


def labeled_sequences(per_class: int = 2, num_classes: int = 3, T: int = 5, S: int = 16):
    sequences = []
    for c in range(num_classes):
        for i in range(per_class):
            seed = 100 * c + i
            sequences.append(make_sequence(beat_segments(T, S, seed, label=c), label=c,
                                           record_id=f"c{c}_{i}"))
    return sequences


@pytest.fixture
def tiny_state():
    return init_model(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
