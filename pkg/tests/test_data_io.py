import struct

import numpy as np
import pytest

from data_io import (CHECKPOINT_MAGIC, Manifest, ManifestEntry, SegmentCorpus, SynthConfig, load_manifest,
                     read_checkpoint, read_corpus, read_peaks, read_record, synth_ecg, write_checkpoint,
                     write_corpus, write_manifest, write_peaks, write_record)
from errors import (BadMagicError, CheckpointError, InvalidConfigError, ManifestError, ShapeMismatchError,
                    TruncatedError, VersionError)
from model import init_baseline_cnn
from signal_pipeline import PeakList, RawRecord, SegmentationConfig
from tensor_core import Tensor
from training import TrainConfig, _fresh_moments
from conftest import labeled_sequences


# ============= マニフェスト / レコード =============

def _write_dataset(root, lengths=(300, 400), labels=(0, 1)):
    manifest = Manifest(root=root, class_names=['normal', 'disease'])
    for i, (length, label) in enumerate(zip(lengths, labels)):
        rel = f"records/r{i}.f32"
        write_record(root / rel, np.arange(length, dtype=np.float32))
        manifest.records.append(ManifestEntry(f"r{i}", rel, 100.0, length, label))
    write_manifest(root / 'manifest.tsv', manifest)
    return root / 'manifest.tsv'


def test_manifest_round_trip(tmp_path):
    path = _write_dataset(tmp_path)
    manifest = load_manifest(path)
    assert [e.record_id for e in manifest.records] == ['r0', 'r1']
    assert manifest.class_names == ['normal', 'disease']
    record = read_record(manifest, 'r1')
    assert len(record) == 400 and record.fs == 100.0 and record.label == 1
    np.testing.assert_array_equal(record.samples[:3], [0.0, 1.0, 2.0])


def test_manifest_with_empty_body(tmp_path):
    path = tmp_path / 'manifest.tsv'
    path.write_text('ECGSL-MANIFEST\t1\n')
    manifest = load_manifest(path)
    assert len(manifest) == 0


def test_manifest_duplicate_record_id(tmp_path):
    path = _write_dataset(tmp_path)
    lines = path.read_text().splitlines()
    path.write_text('\n'.join(lines + [lines[-1]]) + '\n')
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_length_mismatch(tmp_path):
    path = _write_dataset(tmp_path)
    path.write_text(path.read_text().replace('\t400\t', '\t401\t'))
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_missing_file_and_bad_label(tmp_path):
    path = _write_dataset(tmp_path)
    (tmp_path / 'records' / 'r0.f32').unlink()
    with pytest.raises(ManifestError):
        load_manifest(path)

    other = _write_dataset(tmp_path / 'other', labels=(0, 5))
    with pytest.raises(ManifestError):
        load_manifest(other)


def test_manifest_requires_header(tmp_path):
    path = tmp_path / 'manifest.tsv'
    path.write_text('record\tr0\tx.f32\t100\t10\t-\n')
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_peaks_round_trip(tmp_path):
    peaks = {'a': PeakList([10, 110, 210]), 'b': PeakList([5, 80])}
    write_peaks(tmp_path / 'peaks.tsv', peaks)
    loaded = read_peaks(tmp_path / 'peaks.tsv')
    assert loaded.keys() == peaks.keys()
    assert loaded['a'].indices.tolist() == [10, 110, 210]


def test_atomic_write_leaves_no_temp_files(tmp_path):
    _write_dataset(tmp_path)
    leftovers = [p.name for p in tmp_path.rglob('*') if p.name.endswith('.tmp')]
    assert leftovers == []


# ============= 合成ECG =============

def test_synth_is_deterministic():
    cfg = SynthConfig(num_records=4, duration=10, seed=7)
    a, peaks_a, labels_a = synth_ecg(cfg)
    b, peaks_b, labels_b = synth_ecg(cfg)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.samples, y.samples)
    assert labels_a.tolist() == [0, 1, 2, 0]
    assert [r.record_id for r in a] == ['rec00000', 'rec00001', 'rec00002', 'rec00003']
    assert all(np.array_equal(p.indices, q.indices) for p, q in zip(peaks_a, peaks_b))


def test_synth_rejects_zero_classes():
    with pytest.raises(InvalidConfigError):
        synth_ecg(SynthConfig(num_classes=0))


def test_synth_t_wave_grows_with_class():
    records, peaks, labels = synth_ecg(SynthConfig(num_records=6, duration=20, snr_db=None, rr_jitter=0.0,
                                                   hr_range=(60, 60), seed=3))
    t_offset = 28
    means = {}
    for record, p, label in zip(records, peaks, labels):
        means.setdefault(int(label), []).extend(record.samples[p.indices + t_offset])
    assert np.mean(means[0]) < np.mean(means[1]) < np.mean(means[2])


# ============= コーパス =============

def test_corpus_round_trip(tmp_path):
    sequences = labeled_sequences(per_class=1)
    signals = [RawRecord(np.linspace(0, 1, 200 + i), fs=100, record_id=s.record_id, label=s.label)
               for i, s in enumerate(sequences)]
    corpus = SegmentCorpus(sequences, ['a', 'b', 'c'], SegmentationConfig(S=16), signals)
    write_corpus(tmp_path / 'corpus.npz', corpus)
    loaded = read_corpus(tmp_path / 'corpus.npz')
    assert loaded.class_names == ['a', 'b', 'c']
    assert loaded.seg_config == SegmentationConfig(S=16)
    assert loaded.labels.tolist() == [0, 1, 2]
    for x, y in zip(sequences, loaded.sequences):
        np.testing.assert_array_equal(x.values, y.values)
        assert x.record_id == y.record_id
    assert [len(r) for r in loaded.signals] == [200, 201, 202]
    np.testing.assert_allclose(loaded.signals[2].samples, signals[2].samples, atol=1e-7)


# ============= チェックポイント =============

def _trained_state(state):
    state = state.copy()
    state.stage = 'masked'
    state.moments = _fresh_moments(state)
    state.moments.step = 3
    state.moments.m['pool.bias'][:] = 0.5
    state.train_snapshot = {'seed': 0, 'epochs': 2}
    return state


def test_checkpoint_round_trip(tmp_path, tiny_state):
    state = _trained_state(tiny_state)
    path = tmp_path / 'masked.ckpt'
    write_checkpoint(state, path)
    loaded = read_checkpoint(path)
    assert loaded.stage == 'masked'
    assert loaded.config == state.config
    assert loaded.train_snapshot == {'seed': 0, 'epochs': 2}
    assert loaded.moments.step == 3
    for name, t in state.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, t.data)
    np.testing.assert_array_equal(loaded.moments.m['pool.bias'], 0.5)
    assert loaded.parameter_names() == state.parameter_names()


def test_checkpoint_baseline_round_trip(tmp_path):
    state = init_baseline_cnn(2, seed=1)
    write_checkpoint(state, tmp_path / 'baseline.ckpt')
    loaded = read_checkpoint(tmp_path / 'baseline.ckpt')
    assert loaded.architecture == 'baseline_cnn' and loaded.moments is None


def test_checkpoint_bad_magic(tmp_path, tiny_state):
    path = tmp_path / 'x.ckpt'
    write_checkpoint(tiny_state, path)
    data = bytearray(path.read_bytes())
    data[0:5] = b'NOPE!'
    path.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        read_checkpoint(path)


def test_checkpoint_version_bump(tmp_path, tiny_state):
    path = tmp_path / 'x.ckpt'
    write_checkpoint(tiny_state, path)
    data = bytearray(path.read_bytes())
    data[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 2] = struct.pack('<H', 2)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        read_checkpoint(path)


def test_checkpoint_truncated(tmp_path, tiny_state):
    path = tmp_path / 'x.ckpt'
    write_checkpoint(tiny_state, path)
    data = path.read_bytes()
    for cut in (3, 9, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(TruncatedError):
            read_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path, tiny_state):
    path = tmp_path / 'x.ckpt'
    write_checkpoint(tiny_state, path)
    path.write_bytes(path.read_bytes() + b'\0\0\0\0')
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path, tiny_state):
    state = tiny_state.copy()
    state.params['pool.bias'] = Tensor(np.zeros(9, dtype=np.float32), requires_grad=True)
    write_checkpoint(state, tmp_path / 'x.ckpt')
    with pytest.raises(ShapeMismatchError):
        read_checkpoint(tmp_path / 'x.ckpt')


def test_train_snapshot_restores_config(tmp_path, tiny_state):
    state = tiny_state.copy()
    state.train_snapshot = {'batch_size': 8, 'epochs': 3, 'learning_rate': 0.01, 'seed': 2}
    write_checkpoint(state, tmp_path / 'x.ckpt')
    cfg = TrainConfig(**read_checkpoint(tmp_path / 'x.ckpt').train_snapshot)
    assert cfg.batch_size == 8 and cfg.learning_rate == 0.01
