from dataclasses import replace

import numpy as np
import pytest

from data_io import SynthConfig, synth_ecg
from errors import InvalidConfigError, InvalidDatasetError, NumericError
from evaluation import confusion_matrix, macro_f1, stratified_kfold
from model import ModelConfig, OptimizerMoments, init_model
from signal_pipeline import SegmentationConfig, preprocess_record
from training import (TrainConfig, TrainHistory, adam_step, autoencoder_loss, epochs_to_target, finetune,
                      masked_loss, mean_segment_loss, predict, predict_baseline, pretrain_autoencoder,
                      pretrain_masked, select_mask, stack_batch, train_baseline_cnn)
from conftest import beat_segments, labeled_sequences, make_sequence, tiny_config


def _moments(params):
    return OptimizerMoments(0, {k: np.zeros_like(v) for k, v in params.items()},
                            {k: np.zeros_like(v) for k, v in params.items()})


def _unchanged(before, after, prefix):
    return all(np.array_equal(before.params[n].data, after.params[n].data)
               for n in before.params if n.startswith(prefix))


# ============= Adam =============

def test_adam_zero_learning_rate_keeps_params():
    params = {'w': np.array([1.0, -2.0], dtype=np.float32)}
    grads = {'w': np.array([0.5, -0.25], dtype=np.float32)}
    new, moments = adam_step(params, grads, _moments(params), TrainConfig(learning_rate=0.0), 1)
    np.testing.assert_array_equal(new['w'], params['w'])
    assert moments.step == 1


def test_adam_first_step_moves_by_learning_rate():
    params = {'w': np.array([1.0, -2.0, 0.5], dtype=np.float32)}
    grads = {'w': np.array([0.5, -0.25, 3.0], dtype=np.float32)}
    new, _ = adam_step(params, grads, _moments(params), TrainConfig(learning_rate=1e-3), 1)
    np.testing.assert_allclose(new['w'], params['w'] - 1e-3 * np.sign(grads['w']), atol=1e-6)


def test_adam_is_pure_and_deterministic():
    params = {'w': np.array([1.0, 2.0], dtype=np.float32), 'b': np.array([0.0], dtype=np.float32)}
    grads = {'w': np.array([0.1, 0.2], dtype=np.float32)}
    moments = _moments(params)
    a, _ = adam_step(params, grads, moments, TrainConfig(learning_rate=1e-2), 1)
    b, _ = adam_step(params, grads, moments, TrainConfig(learning_rate=1e-2), 1)
    np.testing.assert_array_equal(a['w'], b['w'])
    assert params['w'].tolist() == [1.0, 2.0]
    assert a['b'] is params['b']


def test_adam_rejects_non_finite_gradient():
    params = {'w': np.zeros(2, dtype=np.float32)}
    with pytest.raises(NumericError):
        adam_step(params, {'w': np.array([np.nan, 0.0])}, _moments(params), TrainConfig(), 1)


# ============= マスク選択 =============

def test_select_mask_counts():
    rng = np.random.default_rng(0)
    assert len(select_mask(50, 0.1, rng)) == 5
    assert len(select_mask(3, 0.1, rng)) == 1
    chosen = select_mask(50, 0.1, rng)
    assert np.all(np.diff(chosen) > 0)


def test_select_mask_is_deterministic():
    a = select_mask(40, 0.1, np.random.default_rng(9))
    b = select_mask(40, 0.1, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_select_mask_never_picks_padding():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        N = int(rng.integers(1, 40))
        n_real = int(rng.integers(1, N + 1))
        pad_mask = np.arange(N) < n_real
        fraction = float(rng.uniform(0.05, 0.5))
        chosen = select_mask(N, fraction, rng, pad_mask)
        assert 1 <= len(chosen) <= n_real
        assert np.all(pad_mask[chosen])


def test_select_mask_needs_real_segments():
    with pytest.raises(InvalidConfigError):
        select_mask(4, 0.1, np.random.default_rng(0), np.zeros(4, dtype=bool))


def test_stack_batch_pads_to_longest():
    batch = [make_sequence(np.ones((3, 16)), label=1), make_sequence(np.ones((5, 16)))]
    values, mask, labels = stack_batch(batch)
    assert values.shape == (2, 5, 16)
    assert mask.sum(axis=1).tolist() == [3, 5]
    assert labels.tolist() == [1, -1]


# ============= 事前学習 =============

def test_autoencoder_zero_epochs_returns_init(tiny_state):
    state, history = pretrain_autoencoder(beat_segments(8), TrainConfig(epochs=0), init=tiny_state)
    assert len(history) == 0
    assert state.stage == 'ae'
    assert _unchanged(tiny_state, state, '')


def test_autoencoder_loss_decreases(tiny_state):
    segments = beat_segments(128, seed=3)
    cfg = TrainConfig(epochs=4, batch_size=16, learning_rate=5e-3, seed=1)
    state, history = pretrain_autoencoder(segments, cfg, init=tiny_state, quiet=True)
    assert len(history) == 4
    assert history.loss[-1] < history.loss[0]
    # AE は分類ヘッドや Transformer を触らない
    assert _unchanged(tiny_state, state, 'transformer.')
    assert _unchanged(tiny_state, state, 'classifier.')
    assert not _unchanged(tiny_state, state, 'encoder.')


def test_masked_pretraining_skips_padding_only_sequences(tiny_state):
    sequences = labeled_sequences(per_class=2)
    sequences.append(make_sequence(np.zeros((5, 16)), record_id='empty', n_real=0))
    cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-3)
    state, history = pretrain_masked(sequences, tiny_state, cfg, quiet=True)
    assert state.stage == 'masked'
    assert len(history) == 1 and np.isfinite(history.loss[0])
    assert _unchanged(tiny_state, state, 'classifier.')
    assert _unchanged(tiny_state, state, 'pool.')
    assert not _unchanged(tiny_state, state, 'reconstruction.')


def test_masked_pretraining_can_freeze_encoder(tiny_state):
    cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-3, freeze_encoder=True)
    state, _ = pretrain_masked(labeled_sequences(per_class=2), tiny_state, cfg, quiet=True)
    assert _unchanged(tiny_state, state, 'encoder.')
    assert not _unchanged(tiny_state, state, 'transformer.')


def test_masked_pretraining_needs_real_segments(tiny_state):
    empty = [make_sequence(np.zeros((3, 16)), n_real=0)]
    with pytest.raises(InvalidDatasetError):
        pretrain_masked(empty, tiny_state, TrainConfig(epochs=1), quiet=True)


# ============= ファインチューニング =============

def test_finetune_rejects_missing_class(tiny_state):
    only_zero = [s for s in labeled_sequences(per_class=2) if s.label == 0]
    with pytest.raises(InvalidDatasetError):
        finetune(only_zero, tiny_state, TrainConfig(epochs=1), num_classes=3, quiet=True)


def test_finetune_with_zero_learning_rate_keeps_metric(tiny_state):
    sequences = labeled_sequences(per_class=2)
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=0.0)
    state, history = finetune(sequences, tiny_state, cfg, 3, validation=sequences, quiet=True)
    assert state.stage == 'finetuned' and state.has_classifier
    assert len(set(history.metric)) == 1
    assert _unchanged(tiny_state, state, '')


def test_finetune_is_reproducible(tiny_state):
    sequences = labeled_sequences(per_class=2)
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=5)
    a, _ = finetune(sequences, tiny_state, cfg, 3, quiet=True)
    b, _ = finetune(sequences, tiny_state, cfg, 3, quiet=True)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert a.train_snapshot['seed'] == 5


def test_finetune_replaces_classifier_for_new_class_count():
    init = init_model(tiny_config(num_classes=3), seed=0)
    sequences = [s for s in labeled_sequences(per_class=2) if s.label < 2]
    state, _ = finetune(sequences, init, TrainConfig(epochs=1, batch_size=4), 2, quiet=True)
    assert state.config.num_classes == 2
    assert state.params['classifier.out.weight'].shape == (8, 2)


def test_predict_returns_probabilities(tiny_state):
    sequences = labeled_sequences(per_class=1)
    labels, probs = predict(tiny_state, sequences, batch_size=2)
    assert labels.shape == (3,)
    assert probs.shape == (3, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(labels, probs.argmax(axis=1))


def test_history_text_round_trip(tmp_path):
    history = TrainHistory()
    history.append(0.5, None, 1.25)
    history.append(0.25, 0.75, 1.0)
    path = tmp_path / 'history.tsv'
    path.write_text(history.to_text())
    loaded = TrainHistory.read(path)
    assert loaded.loss == pytest.approx([0.5, 0.25])
    assert loaded.metric[0] is None and loaded.metric[1] == pytest.approx(0.75)


def test_epochs_to_target():
    history = TrainHistory()
    for metric in (0.2, 0.6, 0.9, 0.95):
        history.append(1.0, metric, 0.0)
    assert epochs_to_target(history, 0.85) == 3
    assert epochs_to_target(history, 0.99) is None


# ============= ベースラインCNN =============

def test_baseline_cnn_trains_and_predicts():
    rng = np.random.default_rng(0)
    signals = [rng.normal(size=80).astype(np.float32) for _ in range(6)]
    signals.append(rng.normal(size=96).astype(np.float32))
    labels = np.array([0, 1, 2, 0, 1, 2, 0])
    state, history = train_baseline_cnn(signals, labels, 3, TrainConfig(epochs=1, batch_size=4), quiet=True)
    assert state.architecture == 'baseline_cnn' and state.stage == 'baseline'
    assert len(history) == 1
    predicted = predict_baseline(state, signals)
    assert predicted.shape == (7,)
    assert np.all((predicted >= 0) & (predicted < 3))


def test_baseline_cnn_label_count_mismatch():
    with pytest.raises(InvalidDatasetError):
        train_baseline_cnn([np.zeros(80)], [0, 1], 2, TrainConfig(epochs=1))


# ============= 合成コーパスでの学習の向き =============

AE_TRAINING = TrainConfig(epochs=5, batch_size=32, learning_rate=1e-3, seed=0)
MASK_TRAINING = TrainConfig(epochs=10, batch_size=16, learning_rate=1e-3, seed=0)
FROZEN_MASK_TRAINING = replace(MASK_TRAINING, freeze_encoder=True)
FROZEN_FINETUNE_TRAINING = TrainConfig(epochs=15, batch_size=16, learning_rate=1e-3, seed=0, freeze_encoder=True)


def _preprocessed(num_records: int, duration: float, pad_mode: str = 'edge', seed: int = 0):
    records, _, _ = synth_ecg(SynthConfig(num_records=num_records, duration=duration, seed=seed))
    seg_cfg = SegmentationConfig(pad_mode=pad_mode)
    outputs = [preprocess_record(record, seg_cfg) for record in records]
    return [seq for _, _, seq in outputs], [filtered for filtered, _, _ in outputs]


@pytest.fixture(scope='module')
def corpus():
    sequences, signals = _preprocessed(200, 10.0)
    labels = np.array([s.label for s in sequences])
    held_out = stratified_kfold(labels, 5, seed=0)[0]
    train = np.setdiff1d(np.arange(len(sequences)), held_out)
    return sequences, signals, labels, train, held_out


@pytest.fixture(scope='module')
def ae_state(corpus):
    sequences = corpus[0]
    segments = np.concatenate([s.values for s in sequences])
    state, _ = pretrain_autoencoder(segments, AE_TRAINING, quiet=True)
    return state


@pytest.fixture(scope='module')
def masked_state(corpus, ae_state):
    state, _ = pretrain_masked(corpus[0], ae_state, MASK_TRAINING, quiet=True)
    return state


def test_edge_padding_reconstructs_better_than_zero_padding():
    losses = {}
    for mode in ('edge', 'zero'):
        sequences, _ = _preprocessed(24, 30.0, pad_mode=mode)
        segments = np.concatenate([s.values for s in sequences])
        state, _ = pretrain_autoencoder(segments, AE_TRAINING, quiet=True)
        losses[mode] = autoencoder_loss(state, segments)
    assert losses['edge'] < losses['zero']


def test_trained_autoencoder_reconstruction_error(corpus, ae_state):
    segments = np.concatenate([s.values for s in corpus[0]])
    assert autoencoder_loss(ae_state, segments) < 1e-2


def test_masked_pretraining_beats_mean_segment(corpus, masked_state):
    sequences = corpus[0]
    assert masked_loss(masked_state, sequences, 0.1, seed=1) < mean_segment_loss(sequences, 0.1, seed=1)


def test_masked_pretraining_from_scratch_ends_higher(corpus, ae_state):
    sequences = corpus[0]
    # 両方とも構造エンコーダを固定し、違いは初期エンコーダだけ
    scratch, _ = pretrain_masked(sequences, None, FROZEN_MASK_TRAINING, ModelConfig(), quiet=True)
    from_ae, _ = pretrain_masked(sequences, ae_state, FROZEN_MASK_TRAINING, quiet=True)
    assert masked_loss(scratch, sequences, 0.1, seed=1) > masked_loss(from_ae, sequences, 0.1, seed=1)


def test_pretrained_init_reaches_target_no_later(corpus, masked_state):
    sequences, _, _, train, held_out = corpus
    train_set = [sequences[i] for i in train]
    validation = [sequences[i] for i in held_out]
    _, pretrained = finetune(train_set, masked_state, FROZEN_FINETUNE_TRAINING, 3, validation=validation, quiet=True)
    _, scratch = finetune(train_set, None, FROZEN_FINETUNE_TRAINING, 3, ModelConfig(), validation=validation, quiet=True)
    pretrained_epochs = epochs_to_target(pretrained, 0.90)
    scratch_epochs = epochs_to_target(scratch, 0.90)
    assert pretrained_epochs is not None
    assert scratch_epochs is None or pretrained_epochs <= scratch_epochs


def test_baseline_cnn_beats_chance(corpus):
    _, signals, labels, train, held_out = corpus
    cfg = TrainConfig(epochs=10, batch_size=16, learning_rate=1e-3, seed=0)
    state, _ = train_baseline_cnn([signals[i] for i in train], labels[train], 3, cfg, quiet=True)
    predicted = predict_baseline(state, [signals[i] for i in held_out])
    assert macro_f1(confusion_matrix(labels[held_out], predicted, 3)) > 1 / 3
