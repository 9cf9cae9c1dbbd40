# data_io.py
# ファイル形式: マニフェスト / レコード / R波正解 / セグメントコーパス / チェックポイント
# と、決定的な合成ECGの生成

import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import (BadMagicError, CheckpointError, InvalidConfigError, ManifestError,
                    ShapeMismatchError, TruncatedError, VersionError)
from model import ModelConfig, ModelState, OptimizerMoments, STAGES, parameter_shapes
from signal_pipeline import PeakList, RawRecord, SegmentationConfig, SegmentSequence
from tensor_core import Tensor

PathLike = Union[str, Path]

MANIFEST_HEADER = 'ECGSL-MANIFEST'
MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b'ECGSL'
CHECKPOINT_VERSION = 1
CORPUS_VERSION = 1
_PREAMBLE = struct.Struct('<HI')


# ============= アトミック書き込み =============

def atomic_write_bytes(path: PathLike, data: bytes):
    """一時ファイルに書いてから rename（途中で落ちても半端なファイルを残さない）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: PathLike, text: str):
    atomic_write_bytes(path, text.encode('utf-8'))


def write_frame_csv(path: PathLike, frame: pd.DataFrame):
    atomic_write_text(path, frame.to_csv(index=False))


# ============= マニフェスト / レコード =============

@dataclass
class ManifestEntry:
    record_id: str
    path: str
    fs: float
    length: int
    label: Optional[int] = None


@dataclass
class Manifest:
    root: Path
    records: List[ManifestEntry] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def entry(self, record_id: str) -> ManifestEntry:
        for entry in self.records:
            if entry.record_id == record_id:
                return entry
        raise ManifestError(f"record '{record_id}' is not in the manifest")

    def to_text(self) -> str:
        lines = [f"{MANIFEST_HEADER}\t{self.version}"]
        lines += [f"class\t{i}\t{name}" for i, name in enumerate(self.class_names)]
        for e in self.records:
            label = '-' if e.label is None else str(e.label)
            lines.append(f"record\t{e.record_id}\t{e.path}\t{e.fs!r}\t{e.length}\t{label}")
        return '\n'.join(lines) + '\n'


def _parse_int(text: str, what: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError as e:
        raise ManifestError(f"line {lineno}: invalid {what} '{text}'") from e


def load_manifest(path: PathLike) -> Manifest:
    """タブ区切りのマニフェストを読み、ID重複・ファイル欠損・長さ・ラベル範囲を検証する"""
    path = Path(path)
    lines = path.read_text(encoding='utf-8').splitlines()
    if not lines:
        raise ManifestError(f"{path} is empty (missing version header)")
    header = lines[0].split('\t')
    if len(header) != 2 or header[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path} does not start with a '{MANIFEST_HEADER}' header")
    version = _parse_int(header[1], 'version', 1)
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {version}")

    manifest = Manifest(root=path.parent, version=version)
    classes: Dict[int, str] = {}
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith('#'):
            continue
        fields = line.split('\t')
        if fields[0] == 'class' and len(fields) == 3:
            index = _parse_int(fields[1], 'class index', lineno)
            if index in classes:
                raise ManifestError(f"line {lineno}: duplicate class index {index}")
            classes[index] = fields[2]
        elif fields[0] == 'record' and len(fields) == 6:
            _, record_id, rel_path, fs_text, length_text, label_text = fields
            if record_id in seen:
                raise ManifestError(f"line {lineno}: duplicate record_id '{record_id}'")
            seen.add(record_id)
            try:
                fs = float(fs_text)
            except ValueError as e:
                raise ManifestError(f"line {lineno}: invalid fs '{fs_text}'") from e
            label = None if label_text == '-' else _parse_int(label_text, 'label', lineno)
            manifest.records.append(ManifestEntry(record_id, rel_path, fs,
                                                  _parse_int(length_text, 'length', lineno), label))
        else:
            raise ManifestError(f"line {lineno}: unrecognised manifest row")

    if sorted(classes) != list(range(len(classes))):
        raise ManifestError("class indices must be contiguous from 0")
    manifest.class_names = [classes[i] for i in range(len(classes))]

    for entry in manifest.records:
        file_path = manifest.root / entry.path
        if not file_path.is_file():
            raise ManifestError(f"record file for '{entry.record_id}' not found: {file_path}")
        if file_path.stat().st_size != 4 * entry.length:
            raise ManifestError(
                f"record '{entry.record_id}' has {file_path.stat().st_size // 4} samples, manifest says {entry.length}")
        if entry.label is not None and not 0 <= entry.label < manifest.num_classes:
            raise ManifestError(
                f"record '{entry.record_id}' label {entry.label} outside [0, {manifest.num_classes})")
    return manifest


def write_manifest(path: PathLike, manifest: Manifest):
    atomic_write_text(path, manifest.to_text())


def write_record(path: PathLike, samples: np.ndarray):
    """リトルエンディアン float32 の生サンプル列"""
    atomic_write_bytes(path, np.asarray(samples, dtype='<f4').tobytes())


def read_record(manifest: Manifest, record_id: str) -> RawRecord:
    entry = manifest.entry(record_id)
    samples = np.fromfile(manifest.root / entry.path, dtype='<f4')
    if len(samples) != entry.length:
        raise ManifestError(f"record '{record_id}' changed length on disk")
    return RawRecord(samples=samples.astype(np.float64), fs=entry.fs,
                     record_id=record_id, label=entry.label)


def write_peaks(path: PathLike, peaks: Dict[str, PeakList]):
    frame = pd.DataFrame({
        'record_id': list(peaks),
        'peaks': [' '.join(str(int(i)) for i in p.indices) for p in peaks.values()],
    })
    atomic_write_text(path, frame.to_csv(sep='\t', index=False))


def read_peaks(path: PathLike) -> Dict[str, PeakList]:
    frame = pd.read_csv(path, sep='\t', dtype={'record_id': str, 'peaks': str}, keep_default_na=False)
    return {row.record_id: PeakList(np.array(row.peaks.split(), dtype=np.int64))
            for row in frame.itertuples(index=False)}


# ============= 合成ECG =============

@dataclass
class SynthConfig:
    num_records: int = 100
    duration: float = 30.0
    fs: float = 100.0
    hr_range: Tuple[float, float] = (55.0, 95.0)
    rr_jitter: float = 0.03
    snr_db: Optional[float] = 25.0
    num_classes: int = 3
    t_amp_delta: float = 0.3
    rr_var_delta: float = 0.5
    baseline_wander: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 1:
            raise InvalidConfigError(f"class count must be >= 1, got {self.num_classes}")
        if self.num_records < 1:
            raise InvalidConfigError(f"num_records must be >= 1, got {self.num_records}")
        if not self.fs > 0 or not self.duration > 0:
            raise InvalidConfigError("fs and duration must be positive")
        lo, hi = self.hr_range
        if not 20 <= lo <= hi <= 250:
            raise InvalidConfigError(f"hr_range must satisfy 20 <= low <= high <= 250, got {self.hr_range}")
        if not 0 <= self.rr_jitter < 0.5:
            raise InvalidConfigError(f"rr_jitter must lie in [0, 0.5), got {self.rr_jitter}")
        if self.baseline_wander < 0:
            raise InvalidConfigError("baseline_wander must be >= 0")


# (中心[s], 振幅, 幅σ[s])
P_WAVE = (-0.16, 0.15, 0.025)
QRS_WAVE = (0.0, 1.0, 0.012)
T_WAVE = (0.28, 0.3, 0.06)
BEAT_SPAN = (0.25, 0.45)


def _synth_one(cfg: SynthConfig, label: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    fs = cfg.fs
    n = int(round(cfg.duration * fs))
    base_rr = 60.0 / rng.uniform(*cfg.hr_range)
    jitter = cfg.rr_jitter * (1.0 + cfg.rr_var_delta * label)
    t_amp = T_WAVE[1] * (1.0 + cfg.t_amp_delta * label)
    span_pre = int(np.ceil(BEAT_SPAN[0] * fs))
    span_post = int(np.ceil(BEAT_SPAN[1] * fs))

    # R波はサンプル格子上に置く
    peaks = []
    position = span_pre + int(rng.integers(0, max(1, int(round(base_rr * fs)))))
    while position + span_post < n:
        peaks.append(position)
        rr = base_rr * (1.0 + jitter * rng.standard_normal()) if jitter > 0 else base_rr
        position += max(int(round(0.3 * fs)), int(round(rr * fs)))

    t = np.arange(n) / fs
    signal = np.zeros(n)
    for peak in peaks:
        lo = peak - span_pre
        hi = peak + span_post + 1
        local = t[lo:hi] - peak / fs
        beat_t_amp = t_amp * (1.0 + 0.05 * rng.standard_normal())
        for center, amp, width in (P_WAVE, QRS_WAVE, (T_WAVE[0], beat_t_amp, T_WAVE[2])):
            signal[lo:hi] += amp * np.exp(-0.5 * ((local - center) / width) ** 2)

    if cfg.baseline_wander > 0:
        signal += cfg.baseline_wander * np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
    if cfg.snr_db is not None and np.isfinite(cfg.snr_db):
        power = np.mean(signal ** 2)
        signal += rng.standard_normal(n) * np.sqrt(power / 10 ** (cfg.snr_db / 10))
    return signal, np.array(peaks, dtype=np.int64)


def synth_ecg(cfg: SynthConfig) -> Tuple[List[RawRecord], List[PeakList], np.ndarray]:
    """P/QRS/T のガウス波の和で合成ECGを作る（シード固定で完全に決定的）"""
    cfg.validate()
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.num_records)
    records, peak_lists = [], []
    labels = np.arange(cfg.num_records, dtype=np.int64) % cfg.num_classes
    for i, stream in enumerate(streams):
        signal, peaks = _synth_one(cfg, int(labels[i]), np.random.default_rng(stream))
        records.append(RawRecord(samples=signal, fs=cfg.fs, record_id=f"rec{i:05d}", label=int(labels[i])))
        peak_lists.append(PeakList(peaks))
    return records, peak_lists, labels


# ============= セグメントコーパス =============

@dataclass
class SegmentCorpus:
    sequences: List[SegmentSequence]
    class_names: List[str]
    seg_config: SegmentationConfig
    signals: List[RawRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.sequences], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> 'SegmentCorpus':
        indices = list(indices)
        signals = [self.signals[i] for i in indices] if self.signals else []
        return SegmentCorpus([self.sequences[i] for i in indices], self.class_names, self.seg_config, signals)


def _offsets(lengths: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)


def write_corpus(path: PathLike, corpus: SegmentCorpus):
    """npz 形式（pickle 不使用）でまとめて書く"""
    seqs = corpus.sequences
    S = corpus.seg_config.S
    if corpus.signals and len(corpus.signals) != len(seqs):
        raise InvalidConfigError("corpus signals must align one-to-one with sequences")
    arrays = {
        'version': np.array(CORPUS_VERSION),
        'values': np.concatenate([s.values for s in seqs]) if seqs else np.zeros((0, S), np.float32),
        'peak_index': np.concatenate([s.peak_index for s in seqs]) if seqs else np.zeros(0, np.int64),
        'pre_len': np.concatenate([s.pre_len for s in seqs]) if seqs else np.zeros(0, np.int64),
        'post_len': np.concatenate([s.post_len for s in seqs]) if seqs else np.zeros(0, np.int64),
        'degenerate': np.concatenate([s.degenerate for s in seqs]) if seqs else np.zeros(0, bool),
        'offsets': _offsets([len(s) for s in seqs]),
        'record_ids': np.array([s.record_id for s in seqs], dtype=str),
        'labels': np.array([-1 if s.label is None else s.label for s in seqs], dtype=np.int64),
        'class_names': np.array(corpus.class_names, dtype=str),
        'seg_config': np.array(json.dumps(asdict(corpus.seg_config))),
        'signal_values': (np.concatenate([r.samples for r in corpus.signals]).astype(np.float32)
                          if corpus.signals else np.zeros(0, np.float32)),
        'signal_offsets': _offsets([len(r) for r in corpus.signals]),
        'signal_fs': np.array([r.fs for r in corpus.signals], dtype=np.float64),
    }
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    atomic_write_bytes(path, buffer.getvalue())


def read_corpus(path: PathLike) -> SegmentCorpus:
    with np.load(path, allow_pickle=False) as data:
        if int(data['version']) != CORPUS_VERSION:
            raise VersionError(f"unsupported corpus version {int(data['version'])}")
        offsets = data['offsets']
        record_ids = [str(r) for r in data['record_ids']]
        labels = data['labels']
        sequences = []
        for i, record_id in enumerate(record_ids):
            lo, hi = offsets[i], offsets[i + 1]
            sequences.append(SegmentSequence(
                values=data['values'][lo:hi], peak_index=data['peak_index'][lo:hi],
                pre_len=data['pre_len'][lo:hi], post_len=data['post_len'][lo:hi],
                degenerate=data['degenerate'][lo:hi], pad_mask=np.ones(hi - lo, dtype=bool),
                record_id=record_id, label=None if labels[i] < 0 else int(labels[i])))
        signals = []
        signal_offsets = data['signal_offsets']
        for i, fs in enumerate(data['signal_fs']):
            lo, hi = signal_offsets[i], signal_offsets[i + 1]
            signals.append(RawRecord(samples=data['signal_values'][lo:hi], fs=float(fs),
                                     record_id=record_ids[i], label=sequences[i].label))
        seg_config = SegmentationConfig(**json.loads(str(data['seg_config'])))
        class_names = [str(c) for c in data['class_names']]
    return SegmentCorpus(sequences, class_names, seg_config, signals)


# ============= チェックポイント =============

def _tensor_table(state: ModelState) -> List[Tuple[str, str, np.ndarray]]:
    names = state.parameter_names()
    table = [(name, 'param', state.params[name].data) for name in names]
    if state.moments is not None:
        table += [(name, 'adam_m', state.moments.m[name]) for name in names]
        table += [(name, 'adam_v', state.moments.v[name]) for name in names]
    return table


def write_checkpoint(state: ModelState, path: PathLike):
    """magic + version(u16) + ヘッダ長(u32) + JSONヘッダ + float32 LE のテンソル列"""
    table = _tensor_table(state)
    header = {
        'architecture': state.architecture,
        'stage': state.stage,
        'seed': state.seed,
        'config': state.config.to_dict(),
        'train': state.train_snapshot,
        'adam_step': state.moments.step if state.moments is not None else None,
        'tensors': [{'name': name, 'group': group, 'shape': list(array.shape)}
                    for name, group, array in table],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    chunks = [CHECKPOINT_MAGIC, _PREAMBLE.pack(CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    chunks += [np.ascontiguousarray(array, dtype='<f4').tobytes() for _, _, array in table]
    atomic_write_bytes(path, b''.join(chunks))


def _check_shapes(header: dict, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    try:
        expected = parameter_shapes(header['architecture'], config)
    except InvalidConfigError as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from e
    groups: Dict[str, Dict[str, Tuple[int, ...]]] = {}
    for entry in header['tensors']:
        groups.setdefault(entry['group'], {})[entry['name']] = tuple(entry['shape'])
    unknown = set(groups) - {'param', 'adam_m', 'adam_v'}
    if unknown:
        raise CheckpointError(f"unknown tensor groups {sorted(unknown)}")
    for group, shapes in groups.items():
        if group != 'param' and header.get('adam_step') is None:
            raise CheckpointError("optimizer moments present without an adam step")
        if set(shapes) != set(expected):
            missing = sorted(set(expected) - set(shapes))
            extra = sorted(set(shapes) - set(expected))
            raise ShapeMismatchError(f"{group} tensor names differ from config (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in shapes.items():
            if shape != expected[name]:
                raise ShapeMismatchError(f"{group} '{name}' has shape {shape}, config requires {expected[name]}")
    if header.get('adam_step') is not None and set(groups) != {'param', 'adam_m', 'adam_v'}:
        raise CheckpointError("adam step recorded but moments are missing")
    return expected


def read_checkpoint(path: PathLike) -> ModelState:
    """magic / version / 形状表を検証してから展開する（部分的な読み込みはしない）"""
    data = Path(path).read_bytes()
    magic_len = len(CHECKPOINT_MAGIC)
    head = data[:magic_len]
    if not CHECKPOINT_MAGIC.startswith(head):
        raise BadMagicError(f"{path} is not an ECG-SL checkpoint")
    if len(data) < magic_len + _PREAMBLE.size:
        raise TruncatedError(f"{path} is truncated (no header)")
    version, header_len = _PREAMBLE.unpack_from(data, magic_len)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path} has checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = magic_len + _PREAMBLE.size
    if len(data) < start + header_len:
        raise TruncatedError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[start:start + header_len].decode('utf-8'))
        config = ModelConfig.from_dict(header['config'])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path} has an unreadable header: {e}") from e
    if header.get('stage') not in STAGES:
        raise CheckpointError(f"{path} has unknown stage tag {header.get('stage')!r}")
    _check_shapes(header, config)

    offset = start + header_len
    needed = sum(4 * int(np.prod(entry['shape'], dtype=np.int64)) for entry in header['tensors'])
    if len(data) - offset < needed:
        raise TruncatedError(f"{path} is truncated: {len(data) - offset} of {needed} tensor bytes")
    if len(data) - offset > needed:
        raise CheckpointError(f"{path} has {len(data) - offset - needed} trailing bytes")

    arrays: Dict[str, Dict[str, np.ndarray]] = {'param': {}, 'adam_m': {}, 'adam_v': {}}
    for entry in header['tensors']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(data, dtype='<f4', count=count, offset=offset).reshape(shape)
        arrays[entry['group']][entry['name']] = array.astype(np.float32)
        offset += 4 * count

    moments = None
    if header.get('adam_step') is not None:
        moments = OptimizerMoments(int(header['adam_step']), arrays['adam_m'], arrays['adam_v'])
    params = {name: Tensor(array, requires_grad=True) for name, array in arrays['param'].items()}
    return ModelState(config=config, params=params, stage=header['stage'], seed=int(header['seed']),
                      architecture=header['architecture'], moments=moments,
                      train_snapshot=header.get('train') or {})
