# config.py
# 実行設定（key = value 形式のファイル + コマンドライン上書き）

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from data_io import atomic_write_text
from errors import InvalidConfigError
from model import ModelConfig, StructuralEncoderConfig, TransformerConfig
from signal_pipeline import SegmentationConfig
from training import TrainConfig

SNAPSHOT_NAME = 'resolved_config.txt'
_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


@dataclass
class RunConfig:
    # セグメント化
    segment_len: int = 100
    pre_fraction: float = 0.35
    post_fraction: float = 0.45
    pad_mode: str = 'edge'
    target_fs: float = 100.0
    highpass_cutoff: float = 0.5
    powerline: float = 50.0
    # モデル
    encoder_channels: List[int] = field(default_factory=lambda: [16, 32, 32, 64, 64, 128])
    kernel_size: int = 5
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    head_hidden: int = 64
    # 学習
    batch_size: int = 64
    epochs: int = 20
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_fraction: float = 0.10
    freeze_encoder: bool = False
    seed: int = 0
    # 入出力
    out_dir: str = '.'
    workers: int = 1

    def segmentation(self) -> SegmentationConfig:
        return SegmentationConfig(S=self.segment_len, pre_fraction=self.pre_fraction,
                                  post_fraction=self.post_fraction, pad_mode=self.pad_mode,
                                  target_fs=self.target_fs, highpass_cutoff=self.highpass_cutoff,
                                  powerline=self.powerline)

    def model(self, num_classes: int) -> ModelConfig:
        encoder = StructuralEncoderConfig(channels=list(self.encoder_channels),
                                          kernel_size=self.kernel_size, embed_dim=self.embed_dim)
        transformer = TransformerConfig(num_layers=self.num_layers, num_heads=self.num_heads,
                                        model_dim=self.embed_dim, ffn_dim=self.ffn_dim,
                                        dropout=self.dropout)
        return ModelConfig(S=self.segment_len, num_classes=num_classes, head_hidden=self.head_hidden,
                           encoder=encoder, transformer=transformer)

    def training(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
                           adam_beta2=self.adam_beta2, adam_eps=self.adam_eps, seed=self.seed,
                           mask_fraction=self.mask_fraction, freeze_encoder=self.freeze_encoder)

    def validate(self):
        if self.workers < 1:
            raise InvalidConfigError(f"workers must be >= 1, got {self.workers}")
        self.segmentation().validate()
        self.model(num_classes=2).validate()
        self.training().validate()

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, list):
                value = ','.join(str(v) for v in value)
            elif isinstance(value, bool):
                value = 'true' if value else 'false'
            lines.append(f"{key} = {value}")
        return '\n'.join(lines) + '\n'


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        if kind == List[int]:
            return [int(v) for v in raw]
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == List[int]:
            return [int(v) for v in text.replace(' ', '').split(',') if v]
        return text
    except ValueError as e:
        raise InvalidConfigError(f"invalid value for '{key}': '{raw}'") from e


def load_config(path: Union[str, Path]) -> RunConfig:
    """key = value の行を読む（# 以降はコメント、空行は無視、未知のキーはエラー）"""
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding='utf-8').splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise InvalidConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split('=', 1))
        if key not in _FIELD_TYPES:
            raise InvalidConfigError(f"{path}:{lineno}: unknown key '{key}'")
        if key in values:
            raise InvalidConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        values[key] = _coerce(key, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """None 以外の値で上書きして検証する"""
    changes = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise InvalidConfigError(f"unknown config key '{key}'")
        changes[key] = _coerce(key, value)
    cfg = replace(cfg, **changes)
    cfg.validate()
    return cfg


def write_snapshot(cfg: RunConfig, out_dir: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """出力の隣に解決済み設定を残す"""
    path = Path(out_dir) / SNAPSHOT_NAME
    text = cfg.to_text()
    if extra:
        text += ''.join(f"# {key} = {value}\n" for key, value in sorted(extra.items()))
    atomic_write_text(path, text)
    return path
