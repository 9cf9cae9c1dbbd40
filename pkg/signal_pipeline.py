# signal_pipeline.py
# 単誘導ECGを心拍セグメント列に変換する前処理
# ハイパス → 電源ノイズ平滑化 → リサンプリング → R波検出 → セグメント化

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.signal import butter, find_peaks, sosfiltfilt

from errors import DataError, EmptyPeaksError, InvalidConfigError, SegmentationError

PAD_MODES = ('edge', 'zero', 'stretch')


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


@dataclass
class RawRecord:
    samples: np.ndarray
    fs: float
    record_id: str = ''
    label: Optional[int] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        self.fs = float(self.fs)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs

    def validate(self):
        if self.samples.size == 0:
            raise DataError(f"record '{self.record_id}' has no samples")
        if not self.fs > 0:
            raise DataError(f"record '{self.record_id}' has invalid fs={self.fs}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"record '{self.record_id}' contains non-finite samples")


@dataclass
class PeakList:
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.indices)


@dataclass
class HeartbeatSegment:
    values: np.ndarray
    peak_index: int
    pre_len: int
    post_len: int
    degenerate: bool = False


@dataclass
class SegmentationConfig:
    S: int = 100
    pre_fraction: float = 0.35
    post_fraction: float = 0.45
    pad_mode: str = 'edge'
    target_fs: float = 100.0
    highpass_cutoff: float = 0.5
    powerline: float = 50.0

    @property
    def anchor(self) -> int:
        """R波を置く位置（0.35:0.45 の比率を保つ）"""
        ratio = self.pre_fraction / (self.pre_fraction + self.post_fraction)
        return _round_half_up(ratio * (self.S - 1))

    def validate(self):
        if self.S < 8:
            raise InvalidConfigError(f"segment length S must be >= 8, got {self.S}")
        if self.pre_fraction <= 0 or self.post_fraction <= 0:
            raise InvalidConfigError("pre/post fractions must be positive")
        if self.pre_fraction + self.post_fraction > 1:
            raise InvalidConfigError("pre_fraction + post_fraction must be <= 1")
        if self.pad_mode not in PAD_MODES:
            raise InvalidConfigError(f"pad_mode must be one of {PAD_MODES}, got '{self.pad_mode}'")
        if not self.target_fs > 0:
            raise InvalidConfigError("target_fs must be positive")


@dataclass
class SegmentSequence:
    """心拍セグメント列 X = [x_1..x_N]（values は [N, S]）"""
    values: np.ndarray
    peak_index: np.ndarray
    pre_len: np.ndarray
    post_len: np.ndarray
    degenerate: np.ndarray
    pad_mask: np.ndarray
    record_id: str = ''
    label: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError(f"segment values must be [N, S], got shape {self.values.shape}")
        self.peak_index = np.asarray(self.peak_index, dtype=np.int64)
        self.pre_len = np.asarray(self.pre_len, dtype=np.int64)
        self.post_len = np.asarray(self.post_len, dtype=np.int64)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if len(self.pad_mask) != len(self.values):
            raise DataError("pad_mask length must equal the number of segments")

    def __len__(self):
        return len(self.values)

    @property
    def S(self) -> int:
        return self.values.shape[1]

    @property
    def n_real(self) -> int:
        return int(self.pad_mask.sum())

    @property
    def segments(self) -> List[HeartbeatSegment]:
        return [
            HeartbeatSegment(self.values[i], int(self.peak_index[i]), int(self.pre_len[i]),
                             int(self.post_len[i]), bool(self.degenerate[i]))
            for i in range(len(self.values))
        ]


# ============= フィルタ =============

def highpass_filter(record: RawRecord, cutoff: float = 0.5) -> RawRecord:
    """5次バターワースのハイパスをゼロ位相で適用"""
    record.validate()
    nyquist = record.fs / 2
    if not 0 < cutoff < nyquist:
        raise InvalidConfigError(f"cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz")

    sos = butter(5, cutoff, btype='highpass', fs=record.fs, output='sos')
    x = record.samples
    padlen = min(len(x) - 1, 3 * _round_half_up(record.fs / cutoff))

    # 前向き-後向きと後向き-前向きの平均で時間反転に対して厳密に対称にする
    forward_first = sosfiltfilt(sos, x, padlen=padlen)
    backward_first = sosfiltfilt(sos, x[::-1], padlen=padlen)[::-1]
    return replace(record, samples=0.5 * (forward_first + backward_first))


def powerline_smooth(record: RawRecord, powerline: float = 50.0) -> RawRecord:
    """電源ノイズ除去用の後ろ向き移動平均（窓幅 fs/powerline）"""
    if not powerline > 0:
        raise InvalidConfigError(f"powerline frequency must be positive, got {powerline}")
    window = max(1, _round_half_up(record.fs / powerline))
    x = record.samples
    if window == 1:
        return replace(record, samples=x.copy())

    # 履歴が足りない先頭は最初のサンプルで埋める
    padded = np.concatenate([np.full(window - 1, x[0]), x])
    smoothed = np.convolve(padded, np.ones(window) / window, mode='valid')
    return replace(record, samples=smoothed)


def resample(record: RawRecord, target_fs: float = 100.0) -> RawRecord:
    """線形補間で target_fs の等間隔グリッドへ"""
    if not target_fs > 0:
        raise InvalidConfigError(f"target_fs must be positive, got {target_fs}")
    n = len(record.samples)
    if n < 2:
        raise DataError(f"record '{record.record_id}' needs at least 2 samples to resample")
    if target_fs == record.fs:
        return replace(record, samples=record.samples.copy())

    n_out = int(np.floor((n - 1) * target_fs / record.fs + 1e-9)) + 1
    positions = np.arange(n_out) * (record.fs / target_fs)
    samples = np.interp(positions, np.arange(n), record.samples)
    return replace(record, samples=samples, fs=float(target_fs))


# ============= R波検出 =============

def detect_r_peaks(record: RawRecord) -> PeakList:
    """Pan–Tompkins 方式のR波検出

    バンドパス(5-15Hz) → 微分 → 二乗 → 150ms移動積分 → 適応しきい値(不応期200ms)
    → ±50ms以内の局所最大へ補正
    """
    record.validate()
    fs = record.fs
    x = record.samples
    if len(x) < 2 * fs:
        raise DataError(f"record '{record.record_id}' is shorter than 2 s")
    if fs <= 30:
        raise InvalidConfigError(f"fs={fs} Hz is too low for the 5-15 Hz QRS band")

    refractory = max(1, _round_half_up(0.2 * fs))
    sos = butter(2, [5.0, 15.0], btype='bandpass', fs=fs, output='sos')
    band = sosfiltfilt(sos, x)
    energy = np.gradient(band) ** 2
    width = max(1, _round_half_up(0.15 * fs))
    integrated = np.convolve(energy, np.ones(width) / width, mode='same')

    if not np.any(integrated > 0):
        raise EmptyPeaksError(f"no QRS energy in record '{record.record_id}'")

    candidates, _ = find_peaks(integrated, distance=refractory)
    if len(candidates) == 0:
        raise EmptyPeaksError(f"no peaks found in record '{record.record_id}'")

    learning = integrated[:int(2 * fs)]
    signal_level = 0.25 * learning.max()
    noise_level = 0.5 * learning.mean()
    threshold = noise_level + 0.25 * (signal_level - noise_level)

    detections: List[int] = []
    rejected: List[Tuple[int, float]] = []
    for candidate in candidates:
        value = integrated[candidate]
        if value > threshold:
            # 探索し直し: RRが平均の1.66倍を超えたら取りこぼしを拾う
            if len(detections) >= 2:
                mean_rr = np.mean(np.diff(detections[-8:]))
                if candidate - detections[-1] > 1.66 * mean_rr:
                    missed = [(c, v) for c, v in rejected
                              if v > threshold / 2
                              and c - detections[-1] >= refractory
                              and candidate - c >= refractory]
                    if missed:
                        best = max(missed, key=lambda cv: cv[1])
                        detections.append(int(best[0]))
                        signal_level = 0.25 * best[1] + 0.75 * signal_level
            detections.append(int(candidate))
            signal_level = 0.125 * value + 0.875 * signal_level
            rejected = []
        else:
            noise_level = 0.125 * value + 0.875 * noise_level
            rejected.append((int(candidate), value))
        threshold = noise_level + 0.25 * (signal_level - noise_level)

    if not detections:
        raise EmptyPeaksError(f"no peaks above threshold in record '{record.record_id}'")

    radius = max(1, _round_half_up(0.05 * fs))
    refined = []
    for peak in detections:
        lo = max(0, peak - radius)
        hi = min(len(x), peak + radius + 1)
        refined.append(lo + int(np.argmax(x[lo:hi])))

    # 補正後も不応期を守る（近すぎる場合は振幅の大きい方を残す）
    peaks: List[int] = []
    for peak in sorted(refined):
        if peaks and peak - peaks[-1] < refractory:
            if x[peak] > x[peaks[-1]]:
                peaks[-1] = peak
            continue
        peaks.append(peak)
    return PeakList(np.array(peaks, dtype=np.int64))


# ============= セグメント化 =============

def _minmax(window: np.ndarray) -> Tuple[np.ndarray, bool]:
    lo = window.min()
    hi = window.max()
    if hi == lo:
        return np.zeros_like(window), True
    return (window - lo) / (hi - lo), False


def _fit_window(window: np.ndarray, pre: int, post: int,
                cfg: SegmentationConfig) -> Tuple[np.ndarray, int, bool]:
    S = cfg.S
    anchor = cfg.anchor

    if cfg.pad_mode == 'stretch':
        if len(window) == 1:
            return np.zeros(S), anchor, True
        stretched = np.interp(np.linspace(0, len(window) - 1, S), np.arange(len(window)), window)
        values, degenerate = _minmax(stretched)
        return values, _round_half_up(pre * (S - 1) / (len(window) - 1)), degenerate

    # R波をanchorに合わせ、はみ出す分は外側から切り落とす
    left_room = anchor
    right_room = S - 1 - anchor
    keep_pre = min(pre, left_room)
    keep_post = min(post, right_room)
    cropped = window[pre - keep_pre:pre + keep_post + 1]
    values, degenerate = _minmax(cropped)
    widths = (left_room - keep_pre, right_room - keep_post)
    if cfg.pad_mode == 'edge':
        values = np.pad(values, widths, mode='edge')
    else:
        values = np.pad(values, widths, mode='constant', constant_values=0.0)
    return values, anchor, degenerate


def segment(record: RawRecord, peaks: PeakList, cfg: SegmentationConfig) -> SegmentSequence:
    """R波ごとに RR の 0.35 / 0.45 を切り出し、長さ S に揃える"""
    cfg.validate()
    indices = peaks.indices
    if len(indices) < 2:
        raise SegmentationError(
            f"record '{record.record_id}' has {len(indices)} peak(s); at least 2 are required")

    x = record.samples
    n = len(x)
    rr = np.diff(indices)
    count = len(indices)
    values = np.zeros((count, cfg.S), dtype=np.float32)
    peak_index = np.zeros(count, dtype=np.int64)
    pre_len = np.zeros(count, dtype=np.int64)
    post_len = np.zeros(count, dtype=np.int64)
    degenerate = np.zeros(count, dtype=bool)

    for i, peak in enumerate(indices):
        rr_prev = rr[i - 1] if i > 0 else rr[0]
        rr_next = rr[i] if i < len(rr) else rr[-1]
        start = max(0, peak - _round_half_up(cfg.pre_fraction * rr_prev))
        stop = min(n, peak + _round_half_up(cfg.post_fraction * rr_next) + 1)
        pre = int(peak - start)
        post = int(stop - 1 - peak)
        fitted, anchor, flat = _fit_window(x[start:stop], pre, post, cfg)
        values[i] = fitted
        peak_index[i] = anchor
        pre_len[i] = pre
        post_len[i] = post
        degenerate[i] = flat

    return SegmentSequence(values=values, peak_index=peak_index, pre_len=pre_len,
                           post_len=post_len, degenerate=degenerate,
                           pad_mask=np.ones(count, dtype=bool),
                           record_id=record.record_id, label=record.label)


def pad_sequences(batch: List[SegmentSequence]) -> List[SegmentSequence]:
    """ゼロセグメントを末尾に足してバッチ内の長さを揃える"""
    if not batch:
        raise InvalidConfigError("pad_sequences needs a nonempty batch")
    target = max(len(seq) for seq in batch)
    padded = []
    for seq in batch:
        extra = target - len(seq)
        if extra == 0:
            padded.append(seq)
            continue
        padded.append(SegmentSequence(
            values=np.concatenate([seq.values, np.zeros((extra, seq.S), dtype=np.float32)]),
            peak_index=np.concatenate([seq.peak_index, np.zeros(extra, dtype=np.int64)]),
            pre_len=np.concatenate([seq.pre_len, np.zeros(extra, dtype=np.int64)]),
            post_len=np.concatenate([seq.post_len, np.zeros(extra, dtype=np.int64)]),
            degenerate=np.concatenate([seq.degenerate, np.zeros(extra, dtype=bool)]),
            pad_mask=np.concatenate([seq.pad_mask, np.zeros(extra, dtype=bool)]),
            record_id=seq.record_id,
            label=seq.label,
        ))
    return padded


def preprocess_record(record: RawRecord,
                      cfg: SegmentationConfig) -> Tuple[RawRecord, PeakList, SegmentSequence]:
    """フィルタ → リサンプリング → R波検出 → セグメント化"""
    filtered = highpass_filter(record, cfg.highpass_cutoff)
    filtered = powerline_smooth(filtered, cfg.powerline)
    filtered = resample(filtered, cfg.target_fs)
    peaks = detect_r_peaks(filtered)
    return filtered, peaks, segment(filtered, peaks, cfg)


def segments_to_frame(sequence: SegmentSequence) -> pd.DataFrame:
    """デバッグ用CSV（1行1セグメント）"""
    segments = sequence.segments
    frame = pd.DataFrame([seg.values for seg in segments], columns=[f"v{i}" for i in range(sequence.S)])
    frame.insert(0, 'peak_index', [seg.peak_index for seg in segments])
    frame.insert(0, 'segment', np.arange(len(sequence)))
    frame.insert(0, 'record_id', sequence.record_id)
    return frame
