# errors.py
# ECG-SL 全体で使う例外クラス（CLIは code を1行で出力する）


class ECGSLError(Exception):
    """ECG-SL の基底例外"""
    code = 'E_ECGSL'


class InvalidConfigError(ECGSLError):
    code = 'E_CONFIG'


class DataError(ECGSLError):
    code = 'E_DATA'


class EmptyPeaksError(DataError):
    code = 'E_EMPTY_PEAKS'


class SegmentationError(DataError):
    code = 'E_SEGMENT'


class ShapeError(ECGSLError):
    code = 'E_SHAPE'


class NumericError(ECGSLError):
    code = 'E_NUMERIC'


class InvalidDatasetError(ECGSLError):
    code = 'E_DATASET'


class InvalidStateError(ECGSLError):
    code = 'E_STATE'


class EmptyClassError(ECGSLError):
    code = 'E_EMPTY_CLASS'


class ManifestError(ECGSLError):
    code = 'E_MANIFEST'


class CheckpointError(ECGSLError):
    code = 'E_CHECKPOINT'


class BadMagicError(CheckpointError):
    code = 'E_BAD_MAGIC'


class VersionError(CheckpointError):
    code = 'E_VERSION'


class TruncatedError(CheckpointError):
    code = 'E_TRUNCATED'


class ShapeMismatchError(CheckpointError):
    code = 'E_SHAPE_MISMATCH'


class StageOrderError(ECGSLError):
    """前段のチェックポイントが無い場合"""
    code = 'E_STAGE_ORDER'

    def __init__(self, missing_stage: str, message: str = ''):
        self.missing_stage = missing_stage
        super().__init__(message or f"missing prerequisite stage '{missing_stage}'")
