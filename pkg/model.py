# model.py
# ECG-SL ネットワーク: 構造エンコーダ/デコーダ、位置エンコーディング、Transformer、
# アテンションプーリング、分類ヘッド、マスク再構成ヘッド、ベースラインCNN

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from errors import InvalidConfigError, ShapeError
from tensor_core import Tensor

STAGES = ('init', 'ae', 'masked', 'finetuned', 'baseline')
ARCHITECTURES = ('ecgsl', 'baseline_cnn')
BASELINE_CHANNELS = (32, 32, 64, 64, 128, 256)
BASELINE_MIN_LENGTH = 64


# ============= 設定 =============

@dataclass
class StructuralEncoderConfig:
    channels: List[int] = field(default_factory=lambda: [16, 32, 32, 64, 64, 128])
    kernel_size: int = 5
    stride: int = 2
    embed_dim: int = 64

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def lengths(self, S: int) -> List[int]:
        """各層の出力長（先頭は入力長 S）"""
        lengths = [S]
        for _ in self.channels:
            lengths.append((lengths[-1] + 2 * self.padding - self.kernel_size) // self.stride + 1)
        return lengths

    def flat_size(self, S: int) -> int:
        return self.channels[-1] * self.lengths(S)[-1]

    def validate(self, S: int):
        if len(self.channels) != 6:
            raise InvalidConfigError(f"structural encoder needs exactly 6 conv layers, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise InvalidConfigError("encoder channels must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.stride < 1:
            raise InvalidConfigError(f"stride must be >= 1, got {self.stride}")
        if self.embed_dim < 1:
            raise InvalidConfigError("embed_dim must be positive")
        if min(self.lengths(S)) < 1:
            raise InvalidConfigError(f"segment length {S} is too short for the encoder stack")


@dataclass
class StructuralDecoderConfig:
    """エンコーダの鏡像（転置畳み込み6層、出力はシグモイド）"""
    channels: List[int]
    output_padding: List[int]
    kernel_size: int = 5
    stride: int = 2
    output_activation: str = 'sigmoid'

    @classmethod
    def mirror(cls, encoder: StructuralEncoderConfig, S: int) -> 'StructuralDecoderConfig':
        lengths = encoder.lengths(S)
        channels = list(reversed(encoder.channels[:-1])) + [1]
        output_padding = []
        for i in range(len(encoder.channels)):
            source = lengths[-1 - i]
            target = lengths[-2 - i]
            natural = (source - 1) * encoder.stride - 2 * encoder.padding + encoder.kernel_size
            extra = target - natural
            if not 0 <= extra < encoder.stride:
                raise InvalidConfigError(
                    f"decoder cannot reach length {target} from {source} with stride {encoder.stride}")
            output_padding.append(extra)
        return cls(channels=channels, output_padding=output_padding,
                   kernel_size=encoder.kernel_size, stride=encoder.stride)


@dataclass
class TransformerConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128
    dropout: float = 0.1

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def validate(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.ffn_dim < 1:
            raise InvalidConfigError("transformer layers, heads and ffn_dim must be positive")
        if self.model_dim % self.num_heads != 0:
            raise InvalidConfigError(
                f"model_dim {self.model_dim} must be divisible by num_heads {self.num_heads}")
        if self.model_dim % 2 != 0:
            raise InvalidConfigError(f"model_dim must be even for positional encoding, got {self.model_dim}")
        if not 0 <= self.dropout < 1:
            raise InvalidConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class ModelConfig:
    S: int = 100
    num_classes: int = 3
    head_hidden: int = 64
    encoder: StructuralEncoderConfig = field(default_factory=StructuralEncoderConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    @property
    def decoder(self) -> StructuralDecoderConfig:
        return StructuralDecoderConfig.mirror(self.encoder, self.S)

    @property
    def d(self) -> int:
        return self.encoder.embed_dim

    def validate(self):
        if self.num_classes < 2:
            raise InvalidConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.head_hidden < 1:
            raise InvalidConfigError("head_hidden must be positive")
        self.encoder.validate(self.S)
        self.transformer.validate()
        if self.transformer.model_dim != self.encoder.embed_dim:
            raise InvalidConfigError(
                f"transformer model_dim {self.transformer.model_dim} must equal embed_dim {self.encoder.embed_dim}")
        StructuralDecoderConfig.mirror(self.encoder, self.S)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> 'ModelConfig':
        values = dict(values)
        encoder = StructuralEncoderConfig(**values.pop('encoder', {}))
        transformer = TransformerConfig(**values.pop('transformer', {}))
        return cls(encoder=encoder, transformer=transformer, **values)


@dataclass
class OptimizerMoments:
    """Adam の一次・二次モーメント"""
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    def copy(self) -> 'OptimizerMoments':
        return OptimizerMoments(self.step, {k: a.copy() for k, a in self.m.items()},
                                {k: a.copy() for k, a in self.v.items()})


@dataclass
class ModelState:
    config: ModelConfig
    params: Dict[str, Tensor]
    stage: str = 'init'
    seed: int = 0
    architecture: str = 'ecgsl'
    moments: Optional[OptimizerMoments] = None
    train_snapshot: Dict[str, object] = field(default_factory=dict)

    @property
    def has_classifier(self) -> bool:
        return self.stage in ('finetuned', 'baseline')

    def parameter_names(self) -> List[str]:
        return list(self.params)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def copy(self) -> 'ModelState':
        params = {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.params.items()}
        return replace(self, params=params,
                       moments=self.moments.copy() if self.moments is not None else None,
                       train_snapshot=dict(self.train_snapshot))

    def astype(self, dtype) -> 'ModelState':
        """検証用に倍精度へ変換したコピー"""
        state = self.copy()
        state.params = {name: Tensor(t.data.astype(dtype), requires_grad=True)
                        for name, t in state.params.items()}
        return state

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def logits(self, segments: Tensor, mask: np.ndarray) -> Tensor:
        return forward_logits(self, segments, mask)[0]


# ============= パラメータ形状と初期化 =============

def ecgsl_parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    enc = cfg.encoder
    d = cfg.d
    in_ch = 1
    for i, out_ch in enumerate(enc.channels):
        shapes[f"encoder.conv{i}.weight"] = (out_ch, in_ch, enc.kernel_size)
        shapes[f"encoder.conv{i}.bias"] = (out_ch,)
        in_ch = out_ch
    flat = enc.flat_size(cfg.S)
    shapes['encoder.proj.weight'] = (flat, d)
    shapes['encoder.proj.bias'] = (d,)

    dec = cfg.decoder
    shapes['decoder.proj.weight'] = (d, flat)
    shapes['decoder.proj.bias'] = (flat,)
    in_ch = enc.channels[-1]
    for i, out_ch in enumerate(dec.channels):
        shapes[f"decoder.deconv{i}.weight"] = (in_ch, out_ch, dec.kernel_size)
        shapes[f"decoder.deconv{i}.bias"] = (out_ch,)
        in_ch = out_ch

    tf = cfg.transformer
    for layer in range(tf.num_layers):
        prefix = f"transformer.layer{layer}"
        for norm in ('norm1', 'norm2'):
            shapes[f"{prefix}.{norm}.scale"] = (d,)
            shapes[f"{prefix}.{norm}.shift"] = (d,)
        for proj in ('query', 'key', 'value', 'out'):
            shapes[f"{prefix}.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.{proj}.bias"] = (d,)
        shapes[f"{prefix}.ffn1.weight"] = (d, tf.ffn_dim)
        shapes[f"{prefix}.ffn1.bias"] = (tf.ffn_dim,)
        shapes[f"{prefix}.ffn2.weight"] = (tf.ffn_dim, d)
        shapes[f"{prefix}.ffn2.bias"] = (d,)
    shapes['transformer.final_norm.scale'] = (d,)
    shapes['transformer.final_norm.shift'] = (d,)

    shapes['pool.weight'] = (d, d)
    shapes['pool.bias'] = (d,)
    shapes['pool.vector'] = (d, 1)

    shapes['classifier.hidden.weight'] = (d, cfg.head_hidden)
    shapes['classifier.hidden.bias'] = (cfg.head_hidden,)
    shapes['classifier.out.weight'] = (cfg.head_hidden, cfg.num_classes)
    shapes['classifier.out.bias'] = (cfg.num_classes,)

    shapes['reconstruction.weight'] = (d, cfg.S)
    shapes['reconstruction.bias'] = (cfg.S,)
    return shapes


def baseline_parameter_shapes(num_classes: int, kernel_size: int = 5) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    in_ch = 1
    for i, out_ch in enumerate(BASELINE_CHANNELS):
        shapes[f"cnn.conv{i}.weight"] = (out_ch, in_ch, kernel_size)
        shapes[f"cnn.conv{i}.bias"] = (out_ch,)
        in_ch = out_ch
    shapes['cnn.out.weight'] = (BASELINE_CHANNELS[-1], num_classes)
    shapes['cnn.out.bias'] = (num_classes,)
    return shapes


def parameter_shapes(architecture: str, cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    if architecture == 'ecgsl':
        return ecgsl_parameter_shapes(cfg)
    if architecture == 'baseline_cnn':
        return baseline_parameter_shapes(cfg.num_classes, cfg.encoder.kernel_size)
    raise InvalidConfigError(f"unknown architecture '{architecture}'")


def _init_array(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith('.bias') or name.endswith('.shift'):
        return np.zeros(shape, dtype=np.float32)
    if name.endswith('.scale'):
        return np.ones(shape, dtype=np.float32)
    if 'conv' in name:
        # 畳み込みは He 初期化
        fan_in = shape[1] * shape[2] if 'deconv' not in name else shape[0] * shape[2]
        std = np.sqrt(2.0 / fan_in)
    else:
        std = np.sqrt(1.0 / shape[0])
    return (rng.standard_normal(shape) * std).astype(np.float32)


def _build(architecture: str, cfg: ModelConfig, seed: int, stage: str) -> ModelState:
    rng = np.random.default_rng(seed)
    params = {name: Tensor(_init_array(name, shape, rng), requires_grad=True)
              for name, shape in parameter_shapes(architecture, cfg).items()}
    return ModelState(config=cfg, params=params, stage=stage, seed=seed, architecture=architecture)


def init_model(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """ECG-SL 全体をランダム初期化（stage 'init'）"""
    cfg.validate()
    return _build('ecgsl', cfg, seed, 'init')


def init_baseline_cnn(num_classes: int, seed: int = 0) -> ModelState:
    if num_classes < 2:
        raise InvalidConfigError(f"num_classes must be >= 2, got {num_classes}")
    return _build('baseline_cnn', ModelConfig(num_classes=num_classes), seed, 'baseline')


# ============= 構造エンコーダ / デコーダ =============

def _as_input(state: ModelState, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = next(iter(state.params.values())).dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _encode(state: ModelState, x: Tensor) -> Tensor:
    """[M, S] → [M, d]"""
    p = state.params
    enc = state.config.encoder
    M = x.shape[0]
    h = tc.reshape(x, (M, 1, x.shape[1]))
    for i in range(len(enc.channels)):
        h = tc.relu(tc.conv1d(h, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"],
                              stride=enc.stride, padding=enc.padding))
    h = tc.reshape(h, (M, -1))
    return tc.dense(h, p['encoder.proj.weight'], p['encoder.proj.bias'])


def _decode(state: ModelState, e: Tensor) -> Tensor:
    """[M, d] → [M, S]"""
    p = state.params
    cfg = state.config
    dec = cfg.decoder
    M = e.shape[0]
    h = tc.relu(tc.dense(e, p['decoder.proj.weight'], p['decoder.proj.bias']))
    h = tc.reshape(h, (M, cfg.encoder.channels[-1], cfg.encoder.lengths(cfg.S)[-1]))
    last = len(dec.channels) - 1
    for i in range(len(dec.channels)):
        h = tc.conv1d_transpose(h, p[f"decoder.deconv{i}.weight"], p[f"decoder.deconv{i}.bias"],
                                stride=dec.stride, padding=cfg.encoder.padding,
                                output_padding=dec.output_padding[i])
        h = tc.sigmoid(h) if i == last else tc.relu(h)
    return tc.reshape(h, (M, cfg.S))


def encode_segment(state: ModelState, x) -> Tensor:
    """セグメント [S] または [N, S] を構造埋め込み [d] / [N, d] へ"""
    x = _as_input(state, x)
    S = state.config.S
    if x.shape[-1] != S or x.ndim not in (1, 2):
        raise ShapeError(f"segments must be [S] or [N, S] with S={S}, got {x.shape}")
    if x.ndim == 1:
        return tc.reshape(_encode(state, tc.reshape(x, (1, S))), (state.config.d,))
    return _encode(state, x)


def decode_embedding(state: ModelState, e) -> Tensor:
    e = _as_input(state, e)
    d = state.config.d
    if e.shape[-1] != d or e.ndim not in (1, 2):
        raise ShapeError(f"embeddings must be [d] or [N, d] with d={d}, got {e.shape}")
    if e.ndim == 1:
        return tc.reshape(_decode(state, tc.reshape(e, (1, d))), (state.config.S,))
    return _decode(state, e)


def autoencode(state: ModelState, x) -> Tensor:
    return decode_embedding(state, encode_segment(state, x))


# ============= 時系列モデル =============

def positional_encoding(T: int, d: int) -> np.ndarray:
    """正弦波の位置エンコーディング [T, d]"""
    if T < 1:
        raise InvalidConfigError(f"T must be >= 1, got {T}")
    if d < 2 or d % 2 != 0:
        raise InvalidConfigError(f"positional encoding dimension must be even, got {d}")
    positions = np.arange(T, dtype=np.float64)[:, None]
    rates = 1.0 / np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(positions * rates)
    pe[:, 1::2] = np.cos(positions * rates)
    return pe


def _check_mask(mask: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} must equal {shape}")
    if not np.all(mask.any(axis=-1)):
        raise InvalidConfigError("every sequence needs at least one unmasked position")
    return mask


def _attention(state: ModelState, prefix: str, x: Tensor, mask: np.ndarray,
               training: bool, rng) -> Tuple[Tensor, np.ndarray]:
    p = state.params
    tf = state.config.transformer
    B, T, d = x.shape
    H, dh = tf.num_heads, tf.head_dim

    def heads(name):
        proj = tc.dense(x, p[f"{prefix}.{name}.weight"], p[f"{prefix}.{name}.bias"])
        return tc.transpose(tc.reshape(proj, (B, T, H, dh)), 1, 2)

    q, k, v = heads('query'), heads('key'), heads('value')
    scores = tc.mul(tc.matmul(q, tc.transpose(k, 2, 3)), 1.0 / np.sqrt(dh))
    # パディング位置は query / key の両方向で重み0
    pair_mask = mask[:, None, :, None] & mask[:, None, None, :]
    weights = tc.softmax(scores, pair_mask)
    weights = tc.dropout(weights, tf.dropout, rng, training)
    context = tc.reshape(tc.transpose(tc.matmul(weights, v), 1, 2), (B, T, d))
    out = tc.dense(context, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])
    return out, weights.data


def transformer_forward(state: ModelState, embeddings: Tensor, attn_mask: np.ndarray,
                        training: bool = False, rng: Optional[np.random.Generator] = None,
                        return_attention: bool = False):
    """pre-norm Transformer。embeddings は [T, d] または [B, T, d]"""
    p = state.params
    tf = state.config.transformer
    embeddings = _as_input(state, embeddings)
    squeeze = embeddings.ndim == 2
    if squeeze:
        embeddings = tc.reshape(embeddings, (1,) + embeddings.shape)
        attn_mask = np.asarray(attn_mask, dtype=bool)[None, :]
    B, T, d = embeddings.shape
    if d != state.config.d:
        raise ShapeError(f"embedding dimension {d} does not match model dimension {state.config.d}")
    mask = _check_mask(attn_mask, (B, T))

    h = tc.add(embeddings, tc.as_tensor(positional_encoding(T, d).astype(embeddings.dtype)))
    h = tc.dropout(h, tf.dropout, rng, training)
    attention = []
    for layer in range(tf.num_layers):
        prefix = f"transformer.layer{layer}"
        a = tc.layer_norm(h, p[f"{prefix}.norm1.scale"], p[f"{prefix}.norm1.shift"])
        a, weights = _attention(state, prefix, a, mask, training, rng)
        attention.append(weights)
        h = tc.add(h, tc.dropout(a, tf.dropout, rng, training))
        f = tc.layer_norm(h, p[f"{prefix}.norm2.scale"], p[f"{prefix}.norm2.shift"])
        f = tc.relu(tc.dense(f, p[f"{prefix}.ffn1.weight"], p[f"{prefix}.ffn1.bias"]))
        f = tc.dense(tc.dropout(f, tf.dropout, rng, training), p[f"{prefix}.ffn2.weight"], p[f"{prefix}.ffn2.bias"])
        h = tc.add(h, tc.dropout(f, tf.dropout, rng, training))
    h = tc.layer_norm(h, p['transformer.final_norm.scale'], p['transformer.final_norm.shift'])

    if squeeze:
        h = tc.reshape(h, (T, d))
        attention = [w[0] for w in attention]
    return (h, attention) if return_attention else h


def attention_pool(state: ModelState, hidden: Tensor, mask: np.ndarray) -> Tuple[Tensor, Tensor]:
    """score_t = v·tanh(W h_t + b) の softmax で重み付き平均"""
    p = state.params
    squeeze = hidden.ndim == 2
    if squeeze:
        hidden = tc.reshape(hidden, (1,) + hidden.shape)
        mask = np.asarray(mask, dtype=bool)[None, :]
    B, T, d = hidden.shape
    mask = _check_mask(mask, (B, T))

    scores = tc.matmul(tc.tanh(tc.dense(hidden, p['pool.weight'], p['pool.bias'])), p['pool.vector'])
    weights = tc.softmax(tc.reshape(scores, (B, T)), mask)
    pooled = tc.reshape(tc.matmul(tc.reshape(weights, (B, 1, T)), hidden), (B, d))
    if squeeze:
        return tc.reshape(pooled, (d,)), tc.reshape(weights, (T,))
    return pooled, weights


def classify(state: ModelState, pooled: Tensor) -> Tensor:
    """dense(d→64) + ReLU + dense(64→C)。softmax は損失・評価側で取る"""
    p = state.params
    pooled = _as_input(state, pooled)
    squeeze = pooled.ndim == 1
    if squeeze:
        pooled = tc.reshape(pooled, (1, pooled.shape[0]))
    h = tc.relu(tc.dense(pooled, p['classifier.hidden.weight'], p['classifier.hidden.bias']))
    logits = tc.dense(h, p['classifier.out.weight'], p['classifier.out.bias'])
    return tc.reshape(logits, (logits.shape[1],)) if squeeze else logits


def reconstruct_masked(state: ModelState, hidden: Tensor) -> Tensor:
    """隠れ状態 [..., d] → 再構成セグメント [..., S]"""
    p = state.params
    return tc.sigmoid(tc.dense(hidden, p['reconstruction.weight'], p['reconstruction.bias']))


def _embed_sequences(state: ModelState, segments: Tensor) -> Tensor:
    B, T, S = segments.shape
    if S != state.config.S:
        raise ShapeError(f"segment length {S} does not match model S={state.config.S}")
    flat = _encode(state, tc.reshape(segments, (B * T, S)))
    return tc.reshape(flat, (B, T, state.config.d))


def forward_logits(state: ModelState, segments, mask: np.ndarray, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """[B, T, S] のセグメント列 → (logits [B, C], プーリング重み [B, T])"""
    segments = _as_input(state, segments)
    if segments.ndim != 3:
        raise ShapeError(f"segments must be [B, T, S], got {segments.shape}")
    hidden = transformer_forward(state, _embed_sequences(state, segments), mask, training, rng)
    pooled, weights = attention_pool(state, hidden, mask)
    return classify(state, pooled), weights


def forward_reconstruction(state: ModelState, segments, mask: np.ndarray, training: bool = False,
                           rng: Optional[np.random.Generator] = None) -> Tensor:
    """全位置の再構成 [B, T, S]（損失は選んだマスク位置だけで取る）"""
    segments = _as_input(state, segments)
    if segments.ndim != 3:
        raise ShapeError(f"segments must be [B, T, S], got {segments.shape}")
    hidden = transformer_forward(state, _embed_sequences(state, segments), mask, training, rng)
    return reconstruct_masked(state, hidden)


# ============= ベースラインCNN =============

def baseline_cnn_forward(state: ModelState, signal) -> Tensor:
    """生信号 [L] / [B, L] → logits。畳み込み6層 + MaxPool、長さ方向の平均で可変長を吸収"""
    if state.architecture != 'baseline_cnn':
        raise InvalidConfigError(f"state architecture is '{state.architecture}', not 'baseline_cnn'")
    x = _as_input(state, signal)
    squeeze = x.ndim == 1
    if squeeze:
        x = tc.reshape(x, (1, x.shape[0]))
    if x.ndim != 2:
        raise ShapeError(f"signal must be [L] or [B, L], got {x.shape}")
    B, L = x.shape
    if L < BASELINE_MIN_LENGTH:
        raise ShapeError(f"signal length {L} shorter than the minimum {BASELINE_MIN_LENGTH}")

    p = state.params
    h = tc.reshape(x, (B, 1, L))
    for i in range(len(BASELINE_CHANNELS)):
        weight = p[f"cnn.conv{i}.weight"]
        h = tc.conv1d(h, weight, p[f"cnn.conv{i}.bias"], stride=1, padding=weight.shape[2] // 2)
        h = tc.max_pool1d(tc.relu(h), 2)
    logits = tc.dense(tc.mean(h, axis=2), p['cnn.out.weight'], p['cnn.out.bias'])
    return tc.reshape(logits, (logits.shape[1],)) if squeeze else logits
