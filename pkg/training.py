# training.py
# 2段階の自己教師あり事前学習（AE → マスク再構成）と教師ありファインチューニング
# Adam・マスク選択・推論・ベースラインCNNの学習

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

import console
import tensor_core as tc
from errors import InvalidConfigError, InvalidDatasetError, NumericError
from evaluation import confusion_matrix, macro_f1
from model import (ModelConfig, ModelState, OptimizerMoments, autoencode, baseline_cnn_forward,
                   forward_logits, forward_reconstruction, init_baseline_cnn, init_model)
from signal_pipeline import RawRecord, SegmentSequence, pad_sequences
from tensor_core import Tensor


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_fraction: float = 0.10
    freeze_encoder: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise InvalidConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.mask_fraction < 1:
            raise InvalidConfigError(f"mask_fraction must lie in (0, 1), got {self.mask_fraction}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise InvalidConfigError("adam betas must lie in [0, 1) and eps must be positive")


@dataclass
class TrainHistory:
    """エポックごとの損失・検証指標・所要秒数"""
    loss: List[float] = field(default_factory=list)
    metric: List[Optional[float]] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def append(self, loss: float, metric: Optional[float], seconds: float):
        self.loss.append(float(loss))
        self.metric.append(None if metric is None else float(metric))
        self.seconds.append(float(seconds))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': np.arange(1, len(self) + 1),
            'loss': self.loss,
            'metric': [np.nan if m is None else m for m in self.metric],
            'seconds': self.seconds,
        })

    def to_text(self) -> str:
        return self.to_frame().to_csv(sep='\t', index=False, na_rep='-', float_format='%.8g')

    @classmethod
    def read(cls, path: Union[str, Path]) -> 'TrainHistory':
        frame = pd.read_csv(path, sep='\t', na_values=['-'])
        history = cls()
        for row in frame.itertuples(index=False):
            history.append(row.loss, None if pd.isna(row.metric) else row.metric, row.seconds)
        return history


# ============= 最適化 =============

def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], moments: OptimizerMoments,
              cfg: TrainConfig, step_index: int) -> Tuple[Dict[str, np.ndarray], OptimizerMoments]:
    """バイアス補正付き Adam。grads に無いパラメータはそのまま"""
    if step_index < 1:
        raise InvalidConfigError(f"step_index must be >= 1, got {step_index}")
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for '{name}', step aborted")
        if grad.shape != params[name].shape:
            raise NumericError(f"gradient shape {grad.shape} does not match '{name}' {params[name].shape}")

    beta1, beta2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - beta1 ** step_index
    correction2 = 1.0 - beta2 ** step_index
    new_params = dict(params)
    m = dict(moments.m)
    v = dict(moments.v)
    for name, grad in grads.items():
        g = grad.astype(np.float64)
        m_prev = m.get(name, np.zeros_like(params[name])).astype(np.float64)
        v_prev = v.get(name, np.zeros_like(params[name])).astype(np.float64)
        m_new = beta1 * m_prev + (1.0 - beta1) * g
        v_new = beta2 * v_prev + (1.0 - beta2) * g * g
        update = cfg.learning_rate * (m_new / correction1) / (np.sqrt(v_new / correction2) + cfg.adam_eps)
        dtype = params[name].dtype
        new_params[name] = (params[name].astype(np.float64) - update).astype(dtype)
        m[name] = m_new.astype(dtype)
        v[name] = v_new.astype(dtype)
    return new_params, OptimizerMoments(step_index, m, v)


def _fresh_moments(state: ModelState) -> OptimizerMoments:
    zeros = {name: np.zeros_like(t.data) for name, t in state.params.items()}
    return OptimizerMoments(0, zeros, {name: z.copy() for name, z in zeros.items()})


def _optimize(state: ModelState, loss: Tensor, cfg: TrainConfig, trainable: Set[str]):
    """勾配をゼロにして逆伝播し、Adam で1ステップ更新する"""
    state.zero_grad()
    tc.backward(loss)
    grads = {name: t.grad for name, t in state.params.items()
             if name in trainable and t.grad is not None}
    params, moments = adam_step(state.arrays(), grads, state.moments, cfg, state.moments.step + 1)
    for name, array in params.items():
        state.params[name].data = array
    state.moments = moments
    state.zero_grad()


def _trainable(state: ModelState, prefixes: Sequence[str], exclude: Sequence[str] = ()) -> Set[str]:
    return {name for name in state.params
            if any(name.startswith(p) for p in prefixes) and not any(name.startswith(e) for e in exclude)}


def _batches(count: int, batch_size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    order = rng.permutation(count) if rng is not None else np.arange(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def select_mask(N: int, fraction: float, rng: np.random.Generator,
                pad_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """実セグメントから max(1, round(fraction·n)) 個を非復元抽出（昇順）"""
    if N < 1:
        raise InvalidConfigError(f"N must be >= 1, got {N}")
    candidates = np.arange(N) if pad_mask is None else np.flatnonzero(np.asarray(pad_mask, dtype=bool)[:N])
    if len(candidates) == 0:
        raise InvalidConfigError("no real segments to mask")
    count = min(len(candidates), max(1, _round_half_up(fraction * len(candidates))))
    return np.sort(rng.choice(candidates, size=count, replace=False))


def stack_batch(sequences: Sequence[SegmentSequence]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(values [B, T, S], pad_mask [B, T], labels [B]; ラベル無しは -1)"""
    padded = pad_sequences(list(sequences))
    values = np.stack([s.values for s in padded]).astype(np.float32)
    mask = np.stack([s.pad_mask for s in padded])
    labels = np.array([-1 if s.label is None else s.label for s in padded], dtype=np.int64)
    return values, mask, labels


def _real_segments(sequences: Sequence[SegmentSequence]) -> np.ndarray:
    blocks = [s.values[s.pad_mask] for s in sequences if s.n_real > 0]
    if not blocks:
        return np.zeros((0, sequences[0].S if sequences else 0), dtype=np.float32)
    return np.concatenate(blocks).astype(np.float32)


def _stage_state(state: ModelState, stage: str, cfg: TrainConfig) -> ModelState:
    state = state.copy()
    state.stage = stage
    state.moments = _fresh_moments(state)
    state.train_snapshot = asdict(cfg)
    return state


# ============= 段階1: 構造オートエンコーダ =============

def pretrain_autoencoder(corpus: Union[np.ndarray, Sequence[SegmentSequence]], cfg: TrainConfig,
                         model_cfg: Optional[ModelConfig] = None, init: Optional[ModelState] = None,
                         quiet: bool = False) -> Tuple[ModelState, TrainHistory]:
    """セグメント単位の再構成MSEで構造エンコーダ/デコーダを学習"""
    cfg.validate()
    segments = corpus if isinstance(corpus, np.ndarray) else _real_segments(corpus)
    segments = np.asarray(segments, dtype=np.float32)
    if segments.ndim != 2 or len(segments) == 0:
        raise InvalidDatasetError("autoencoder corpus is empty")
    if init is None:
        init = init_model(model_cfg or ModelConfig(S=segments.shape[1]), cfg.seed)

    state = _stage_state(init, 'ae', cfg)
    trainable = _trainable(state, ('encoder.', 'decoder.'))
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        total = 0.0
        for batch in console.progress(_batches(len(segments), cfg.batch_size, rng), f"ae {epoch}", quiet):
            x = segments[batch]
            recon = autoencode(state, x)
            loss = tc.masked_mse(recon, Tensor(x, dtype=recon.dtype), np.ones(len(x), dtype=bool))
            total += loss.item() * len(x)
            _optimize(state, loss, cfg, trainable)
        history.append(total / len(segments), None, time.time() - started)
        if not quiet:
            console.log(f"ae epoch {epoch}/{cfg.epochs} loss={history.loss[-1]:.6f} ({history.seconds[-1]:.1f}s)")
    return state, history


def autoencoder_loss(state: ModelState, segments: np.ndarray, batch_size: int = 256) -> float:
    """コーパス全体の平均再構成MSE"""
    segments = np.asarray(segments, dtype=np.float32)
    total = 0.0
    with tc.no_grad():
        for i in range(0, len(segments), batch_size):
            x = segments[i:i + batch_size]
            total += float(((autoencode(state, x).data - x) ** 2).mean(axis=1).sum())
    return total / len(segments)


# ============= 段階2: マスクセグメント再構成 =============

def _usable(sequences: Sequence[SegmentSequence]) -> List[SegmentSequence]:
    usable = []
    for seq in sequences:
        if seq.n_real == 0:
            console.warn(f"sequence '{seq.record_id}' has only padding segments, skipped")
            continue
        usable.append(seq)
    return usable


def _masked_batch(sequences: Sequence[SegmentSequence], fraction: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    values, pad_mask, _ = stack_batch(sequences)
    selected = np.zeros_like(pad_mask)
    for b in range(len(values)):
        selected[b, select_mask(values.shape[1], fraction, rng, pad_mask[b])] = True
    inputs = values.copy()
    # マスク位置はゼロセグメントに置き換えて入力する
    inputs[selected] = 0.0
    return values, inputs, pad_mask, selected


def pretrain_masked(sequences: Sequence[SegmentSequence], init: Optional[ModelState], cfg: TrainConfig,
                    model_cfg: Optional[ModelConfig] = None,
                    quiet: bool = False) -> Tuple[ModelState, TrainHistory]:
    """セグメントの約10%をゼロで隠し、Transformer 出力から元セグメントを再構成する"""
    cfg.validate()
    usable = _usable(sequences)
    if not usable:
        raise InvalidDatasetError("no sequence with real segments for masked pre-training")
    if init is None or init.stage == 'init':
        console.warn("masked pre-training from a randomly initialised structural encoder")
        if init is None:
            init = init_model(model_cfg or ModelConfig(S=usable[0].S), cfg.seed)

    state = _stage_state(init, 'masked', cfg)
    exclude = ('encoder.',) if cfg.freeze_encoder else ()
    trainable = _trainable(state, ('encoder.', 'transformer.', 'reconstruction.'), exclude)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        total, rows = 0.0, 0
        for batch in console.progress(_batches(len(usable), cfg.batch_size, rng), f"mask {epoch}", quiet):
            targets, inputs, pad_mask, selected = _masked_batch([usable[i] for i in batch],
                                                                cfg.mask_fraction, rng)
            recon = forward_reconstruction(state, inputs, pad_mask, training=True, rng=rng)
            loss = tc.masked_mse(recon, Tensor(targets, dtype=recon.dtype), selected)
            count = int(selected.sum())
            total += loss.item() * count
            rows += count
            _optimize(state, loss, cfg, trainable)
        history.append(total / rows, None, time.time() - started)
        if not quiet:
            console.log(f"mask epoch {epoch}/{cfg.epochs} loss={history.loss[-1]:.6f} ({history.seconds[-1]:.1f}s)")
    return state, history


def masked_loss(state: ModelState, sequences: Sequence[SegmentSequence], fraction: float,
                seed: int, batch_size: int = 64) -> float:
    """評価モードでのマスク再構成MSE（選択行の平均）"""
    usable = _usable(sequences)
    rng = np.random.default_rng(seed)
    total, rows = 0.0, 0
    with tc.no_grad():
        for i in range(0, len(usable), batch_size):
            targets, inputs, pad_mask, selected = _masked_batch(usable[i:i + batch_size], fraction, rng)
            recon = forward_reconstruction(state, inputs, pad_mask).data
            total += float(((recon - targets) ** 2).mean(axis=-1)[selected].sum())
            rows += int(selected.sum())
    return total / rows


def mean_segment_loss(sequences: Sequence[SegmentSequence], fraction: float, seed: int) -> float:
    """コーパス平均セグメントで予測した場合のマスクMSE（比較用ベースライン）"""
    usable = _usable(sequences)
    mean_segment = _real_segments(usable).mean(axis=0)
    rng = np.random.default_rng(seed)
    total, rows = 0.0, 0
    for seq in usable:
        picked = select_mask(len(seq), fraction, rng, seq.pad_mask)
        total += float(((seq.values[picked] - mean_segment) ** 2).mean(axis=1).sum())
        rows += len(picked)
    return total / rows


# ============= 段階3: ファインチューニング =============

def _check_labels(sequences: Sequence[SegmentSequence], num_classes: int) -> np.ndarray:
    labels = np.array([-1 if s.label is None else s.label for s in sequences], dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InvalidDatasetError(f"every training sequence needs a label in [0, {num_classes})")
    missing = sorted(set(range(num_classes)) - set(labels.tolist()))
    if missing:
        raise InvalidDatasetError(f"classes {missing} are absent from the training labels")
    return labels


def _with_classes(state: ModelState, num_classes: int, seed: int) -> ModelState:
    """クラス数が違う場合は分類ヘッドを作り直す"""
    if state.config.num_classes == num_classes:
        return state
    config = replace(state.config, num_classes=num_classes)
    fresh = init_model(config, seed)
    params = dict(state.params)
    for name in ('classifier.out.weight', 'classifier.out.bias'):
        params[name] = fresh.params[name]
    return replace(state, config=config, params=params, moments=None)


def finetune(sequences: Sequence[SegmentSequence], init: Optional[ModelState], cfg: TrainConfig,
             num_classes: int, model_cfg: Optional[ModelConfig] = None,
             validation: Optional[Sequence[SegmentSequence]] = None,
             quiet: bool = False) -> Tuple[ModelState, TrainHistory]:
    """クロスエントロピーで全パラメータを更新。検証セットがあればマクロF1最良のエポックを残す"""
    cfg.validate()
    sequences = [s for s in sequences if s.n_real > 0]
    labels = _check_labels(sequences, num_classes)
    if init is None:
        base = model_cfg or ModelConfig(S=sequences[0].S)
        init = init_model(replace(base, num_classes=num_classes), cfg.seed)
    state = _stage_state(_with_classes(init, num_classes, cfg.seed), 'finetuned', cfg)
    exclude = ('encoder.',) if cfg.freeze_encoder else ()
    trainable = _trainable(state, ('encoder.', 'transformer.', 'pool.', 'classifier.'), exclude)

    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_state, best_metric = state.copy(), None
    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        total = 0.0
        for batch in console.progress(_batches(len(sequences), cfg.batch_size, rng), f"finetune {epoch}", quiet):
            values, pad_mask, _ = stack_batch([sequences[i] for i in batch])
            logits, _ = forward_logits(state, values, pad_mask, training=True, rng=rng)
            loss = tc.cross_entropy(logits, labels[batch])
            total += loss.item() * len(batch)
            _optimize(state, loss, cfg, trainable)

        metric = None
        if validation:
            predicted, _ = predict(state, validation, cfg.batch_size)
            truth = np.array([s.label for s in validation], dtype=np.int64)
            metric = macro_f1(confusion_matrix(truth, predicted, num_classes))
            if best_metric is None or metric > best_metric:
                best_state, best_metric = state.copy(), metric
        history.append(total / len(sequences), metric, time.time() - started)
        if not quiet:
            shown = '-' if metric is None else f"{metric:.4f}"
            console.log(f"finetune epoch {epoch}/{cfg.epochs} loss={history.loss[-1]:.6f} "
                        f"val_macro_f1={shown} ({history.seconds[-1]:.1f}s)")

    if validation and best_metric is not None:
        return best_state, history
    return state, history


def predict(state: ModelState, sequences: Sequence[SegmentSequence],
            batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """評価モードで (予測ラベル, クラス確率) を返す"""
    labels, probs = [], []
    with tc.no_grad():
        for i in range(0, len(sequences), batch_size):
            values, pad_mask, _ = stack_batch(sequences[i:i + batch_size])
            logits, _ = forward_logits(state, values, pad_mask)
            p = tc.softmax(logits).data.astype(np.float64)
            probs.append(p)
            labels.append(p.argmax(axis=1))
    if not labels:
        return np.zeros(0, dtype=np.int64), np.zeros((0, state.config.num_classes))
    return np.concatenate(labels).astype(np.int64), np.concatenate(probs)


def epochs_to_target(history: TrainHistory, target: float) -> Optional[int]:
    """検証マクロF1が target に初めて届いたエポック（1始まり）"""
    for epoch, metric in enumerate(history.metric, start=1):
        if metric is not None and metric >= target:
            return epoch
    return None


# ============= ベースラインCNN =============

def _length_groups(signals: Sequence[np.ndarray]) -> Dict[int, np.ndarray]:
    lengths = np.array([len(s) for s in signals])
    return {int(L): np.flatnonzero(lengths == L) for L in np.unique(lengths)}


def _baseline_batches(signals, batch_size: int, rng: Optional[np.random.Generator]) -> Iterator[np.ndarray]:
    # 同じ長さのレコード同士でまとめる
    for _, members in sorted(_length_groups(signals).items()):
        order = rng.permutation(members) if rng is not None else members
        for i in range(0, len(order), batch_size):
            yield order[i:i + batch_size]


def _signal_arrays(signals: Sequence[Union[RawRecord, np.ndarray]]) -> List[np.ndarray]:
    return [np.asarray(s.samples if isinstance(s, RawRecord) else s, dtype=np.float32) for s in signals]


def train_baseline_cnn(signals: Sequence[Union[RawRecord, np.ndarray]], labels, num_classes: int,
                       cfg: TrainConfig, quiet: bool = False) -> Tuple[ModelState, TrainHistory]:
    cfg.validate()
    arrays = _signal_arrays(signals)
    labels = np.asarray(labels, dtype=np.int64)
    if len(arrays) == 0 or len(arrays) != len(labels):
        raise InvalidDatasetError("baseline training needs one label per signal")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InvalidDatasetError(f"labels must lie in [0, {num_classes})")

    state = _stage_state(init_baseline_cnn(num_classes, cfg.seed), 'baseline', cfg)
    trainable = set(state.params)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        total = 0.0
        batches = list(_baseline_batches(arrays, cfg.batch_size, rng))
        for batch in console.progress(batches, f"baseline {epoch}", quiet):
            x = np.stack([arrays[i] for i in batch])
            loss = tc.cross_entropy(baseline_cnn_forward(state, x), labels[batch])
            total += loss.item() * len(batch)
            _optimize(state, loss, cfg, trainable)
        history.append(total / len(arrays), None, time.time() - started)
        if not quiet:
            console.log(f"baseline epoch {epoch}/{cfg.epochs} loss={history.loss[-1]:.6f} ({history.seconds[-1]:.1f}s)")
    return state, history


def predict_baseline(state: ModelState, signals: Sequence[Union[RawRecord, np.ndarray]],
                     batch_size: int = 64) -> np.ndarray:
    arrays = _signal_arrays(signals)
    predicted = np.zeros(len(arrays), dtype=np.int64)
    with tc.no_grad():
        for batch in _baseline_batches(arrays, batch_size, None):
            logits = baseline_cnn_forward(state, np.stack([arrays[i] for i in batch]))
            predicted[batch] = logits.data.argmax(axis=1)
    return predicted
