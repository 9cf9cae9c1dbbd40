# ecgsl.py
# ECG-SL コマンドライン
# synth → preprocess → pretrain-ae → pretrain-mask → finetune → evaluate / saliency / baseline

import argparse
import asyncio
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

import console
from config import RunConfig, apply_overrides, load_config, write_snapshot
from data_io import (Manifest, ManifestEntry, SegmentCorpus, SynthConfig, atomic_write_text,
                     load_manifest, read_checkpoint, read_corpus, read_record, synth_ecg,
                     write_checkpoint, write_corpus, write_frame_csv, write_manifest, write_peaks,
                     write_record)
from errors import DataError, ECGSLError, InvalidConfigError, StageOrderError
from evaluation import build_report, confusion_matrix, mean_report, stratified_kfold
from model import ModelState, init_model
from saliency import saliency_frame, summarize_classes
from signal_pipeline import SegmentationConfig, preprocess_record, segments_to_frame
from training import (TrainConfig, finetune, predict, predict_baseline, pretrain_autoencoder,
                      pretrain_masked, train_baseline_cnn)

CORPUS_NAME = 'corpus.npz'
STAGE_FILES = {'ae': 'ae.ckpt', 'masked': 'masked.ckpt', 'finetuned': 'finetuned.ckpt'}


def _preprocess_one(root: str, entry: ManifestEntry, seg_cfg: SegmentationConfig):
    """ワーカープロセスで1レコード分を処理"""
    manifest = Manifest(root=Path(root), records=[entry])
    record = read_record(manifest, entry.record_id)
    filtered, _, sequence = preprocess_record(record, seg_cfg)
    return filtered, sequence


def _parse_hr_range(text: str) -> Tuple[float, float]:
    try:
        low, high = (float(v) for v in text.split(','))
    except ValueError as e:
        raise InvalidConfigError(f"--hr-range must look like 'low,high', got '{text}'") from e
    return low, high


def _parse_snr(text: Optional[str]) -> Optional[float]:
    if text is None or text.lower() in ('none', 'inf', 'off'):
        return None
    try:
        return float(text)
    except ValueError as e:
        raise InvalidConfigError(f"invalid --snr '{text}'") from e


class ECGSLRunner:
    def __init__(self, cfg: RunConfig, out_dir: Optional[str] = None, quiet: bool = False):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.out_dir)
        self.quiet = quiet

    def log(self, message: str):
        if not self.quiet:
            console.log(message)

    def _prepare_out(self, **extra):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_snapshot(self.cfg, self.out_dir, extra)

    def _load_stage(self, path: Optional[str], accepted: Sequence[str], missing_stage: str) -> ModelState:
        if path is None or not Path(path).is_file():
            raise StageOrderError(missing_stage)
        state = read_checkpoint(path)
        if state.stage not in accepted:
            raise StageOrderError(missing_stage,
                                  f"checkpoint {path} has stage '{state.stage}', '{missing_stage}' is required")
        return state

    def _corpus(self, path: str, labeled: bool = False) -> SegmentCorpus:
        corpus = read_corpus(path)
        if labeled and np.any(corpus.labels < 0):
            raise DataError(f"corpus {path} contains unlabeled sequences")
        if corpus.seg_config.S != self.cfg.segment_len:
            self.log(f"using corpus segment length S={corpus.seg_config.S}")
            self.cfg = replace(self.cfg, segment_len=corpus.seg_config.S)
        return corpus

    def _num_classes(self, corpus: SegmentCorpus) -> int:
        if corpus.num_classes:
            return corpus.num_classes
        labels = corpus.labels
        return max(2, int(labels.max()) + 1) if len(labels) else 2

    def _write_report(self, report, prefix: str, class_names: List[str]):
        atomic_write_text(self.out_dir / f"{prefix}metrics.txt", report.to_text())
        write_frame_csv(self.out_dir / f"{prefix}confusion.csv", report.confusion.to_frame(class_names))

    # ============= synth =============

    def synth(self, records: int, classes: int, snr: Optional[float], hr_range: Tuple[float, float],
              duration: float, fs: float):
        synth_cfg = SynthConfig(num_records=records, num_classes=classes, snr_db=snr, hr_range=hr_range,
                                duration=duration, fs=fs, seed=self.cfg.seed)
        synth_cfg.validate()
        self._prepare_out(synth_records=records, synth_classes=classes, synth_snr=snr,
                          synth_hr_range=f"{hr_range[0]},{hr_range[1]}", synth_duration=duration, synth_fs=fs)
        signals, peaks, labels = synth_ecg(synth_cfg)
        manifest = Manifest(root=self.out_dir, class_names=[f"class_{c}" for c in range(classes)])
        for record in signals:
            rel_path = f"records/{record.record_id}.f32"
            write_record(self.out_dir / rel_path, record.samples)
            manifest.records.append(ManifestEntry(record.record_id, rel_path, record.fs,
                                                  len(record.samples), record.label))
        write_manifest(self.out_dir / 'manifest.tsv', manifest)
        write_peaks(self.out_dir / 'peaks.tsv', {r.record_id: p for r, p in zip(signals, peaks)})
        self.log(f"synth: {records} records, {classes} classes, labels {np.bincount(labels).tolist()}")

    # ============= preprocess =============

    async def preprocess(self, manifest_path: str, dump_csv: bool = False):
        manifest = load_manifest(manifest_path)
        seg_cfg = self.cfg.segmentation()
        seg_cfg.validate()
        self._prepare_out(manifest=manifest_path)

        loop = asyncio.get_running_loop()
        semaphore = asyncio.Semaphore(self.cfg.workers)
        executor = ProcessPoolExecutor(max_workers=self.cfg.workers) if self.cfg.workers > 1 else None

        async def run_one(entry: ManifestEntry):
            async with semaphore:
                return await loop.run_in_executor(executor, _preprocess_one,
                                                  str(manifest.root), entry, seg_cfg)

        try:
            results = await asyncio.gather(*(run_one(e) for e in manifest.records), return_exceptions=True)
        finally:
            if executor is not None:
                executor.shutdown()

        sequences, signals, skipped = [], [], []
        for entry, result in zip(manifest.records, results):
            if isinstance(result, ECGSLError):
                skipped.append((entry.record_id, result))
                continue
            if isinstance(result, BaseException):
                raise result
            filtered, sequence = result
            sequences.append(sequence)
            signals.append(filtered)
            self.log(f"{entry.record_id}: {len(sequence)} segments from {filtered.duration:.1f} s")

        corpus = SegmentCorpus(sequences, manifest.class_names, seg_cfg, signals)
        write_corpus(self.out_dir / CORPUS_NAME, corpus)
        if dump_csv:
            for sequence in sequences:
                write_frame_csv(self.out_dir / 'segments' / f"{sequence.record_id}.csv",
                                segments_to_frame(sequence))
        atomic_write_text(self.out_dir / 'skipped.txt',
                          ''.join(f"{rid}\t{err.code}\t{err}\n" for rid, err in skipped))
        for record_id, error in skipped:
            console.warn(f"skipped {record_id}: {error}")
        self.log(f"preprocess: {len(sequences)} records, {sum(len(s) for s in sequences)} segments, "
                 f"{len(skipped)} skipped (pad_mode={seg_cfg.pad_mode}, S={seg_cfg.S})")

    # ============= 事前学習 =============

    def pretrain_ae(self, corpus_path: str):
        corpus = self._corpus(corpus_path)
        self._prepare_out(corpus=corpus_path)
        model_cfg = self.cfg.model(self._num_classes(corpus))
        state, history = pretrain_autoencoder(corpus.sequences, self.cfg.training(), model_cfg, quiet=self.quiet)
        write_checkpoint(state, self.out_dir / STAGE_FILES['ae'])
        atomic_write_text(self.out_dir / 'ae_history.tsv', history.to_text())
        if len(history):
            self.log(f"pretrain-ae: final loss {history.loss[-1]:.6f}")

    def pretrain_mask(self, corpus_path: str, init_ckpt: Optional[str], from_scratch: bool):
        init = None if from_scratch else self._load_stage(init_ckpt, ('ae', 'masked'), 'ae')
        corpus = self._corpus(corpus_path)
        self._prepare_out(corpus=corpus_path, init_ckpt=init_ckpt, from_scratch=from_scratch)
        model_cfg = self.cfg.model(self._num_classes(corpus))
        state, history = pretrain_masked(corpus.sequences, init, self.cfg.training(), model_cfg, quiet=self.quiet)
        write_checkpoint(state, self.out_dir / STAGE_FILES['masked'])
        atomic_write_text(self.out_dir / 'masked_history.tsv', history.to_text())
        if len(history):
            self.log(f"pretrain-mask: final masked loss {history.loss[-1]:.6f}")

    # ============= ファインチューニング / 評価 =============

    def _initial_state(self, init: str, init_ckpt: Optional[str]) -> Optional[ModelState]:
        if init == 'random':
            return None
        return self._load_stage(init_ckpt, (init,), init)

    def finetune(self, corpus_path: str, init: str, init_ckpt: Optional[str],
                 validation_fold: Optional[int], folds: int):
        initial = self._initial_state(init, init_ckpt)
        corpus = self._corpus(corpus_path, labeled=True)
        self._prepare_out(corpus=corpus_path, init=init, init_ckpt=init_ckpt, validation_fold=validation_fold)
        num_classes = self._num_classes(corpus)
        train, validation = corpus, None
        if validation_fold is not None:
            splits = stratified_kfold(corpus.labels, folds, self.cfg.seed)
            if not 0 <= validation_fold < folds:
                raise InvalidConfigError(f"--validation-fold must lie in [0, {folds})")
            held_out = set(splits[validation_fold].tolist())
            train = corpus.subset([i for i in range(len(corpus)) if i not in held_out])
            validation = corpus.subset(sorted(held_out)).sequences

        state, history = finetune(train.sequences, initial, self.cfg.training(), num_classes,
                                  self.cfg.model(num_classes), validation, quiet=self.quiet)
        write_checkpoint(state, self.out_dir / STAGE_FILES['finetuned'])
        atomic_write_text(self.out_dir / 'finetune_history.tsv', history.to_text())
        self.log(f"finetune ({init} init): {len(history)} epochs written")

    def evaluate(self, corpus_path: str, ckpt: Optional[str], kfold: Optional[int],
                 init: str, init_ckpt: Optional[str]):
        finetuned = self._load_stage(ckpt, ('finetuned',), 'finetuned')
        corpus = self._corpus(corpus_path, labeled=True)
        num_classes = finetuned.config.num_classes
        self._prepare_out(corpus=corpus_path, ckpt=ckpt, kfold=kfold, init=init, init_ckpt=init_ckpt)

        if not kfold:
            predicted, _ = predict(finetuned, corpus.sequences, self.cfg.batch_size)
            report = build_report(confusion_matrix(corpus.labels, predicted, num_classes), corpus.class_names)
            self._write_report(report, '', corpus.class_names)
            self.log(f"evaluate: accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f}")
            return

        # 各分割で、保存済みのハイパーパラメータを使って初期状態から学習し直す
        train_cfg = TrainConfig(**finetuned.train_snapshot) if finetuned.train_snapshot else self.cfg.training()
        initial = self._initial_state(init, init_ckpt)
        if initial is None:
            initial = init_model(finetuned.config, train_cfg.seed)
        reports = []
        for i, test in enumerate(stratified_kfold(corpus.labels, kfold, train_cfg.seed)):
            held_out = set(test.tolist())
            train = corpus.subset([j for j in range(len(corpus)) if j not in held_out])
            state, _ = finetune(train.sequences, initial, train_cfg, num_classes, quiet=self.quiet)
            predicted, _ = predict(state, [corpus.sequences[j] for j in test], train_cfg.batch_size)
            report = build_report(confusion_matrix(corpus.labels[test], predicted, num_classes), corpus.class_names)
            self._write_report(report, f"fold{i}_", corpus.class_names)
            reports.append(report)
            self.log(f"fold {i}: accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f}")
        summary = mean_report(reports)
        atomic_write_text(self.out_dir / 'kfold_mean_metrics.txt', summary.to_text())
        self.log(f"{kfold}-fold mean: accuracy={summary.accuracy:.4f} macro_f1={summary.macro_f1:.4f}")

    def saliency(self, corpus_path: str, ckpt: Optional[str]):
        finetuned = self._load_stage(ckpt, ('finetuned',), 'finetuned')
        corpus = self._corpus(corpus_path)
        self._prepare_out(corpus=corpus_path, ckpt=ckpt)
        summaries = summarize_classes(finetuned, corpus.sequences, finetuned.config.num_classes)
        write_frame_csv(self.out_dir / 'saliency.csv', saliency_frame(summaries))
        for c, summary in sorted(summaries.items()):
            self.log(f"saliency class {c}: {summary.count} segments")

    def baseline(self, corpus_path: str, test_fold: int, folds: int):
        corpus = self._corpus(corpus_path, labeled=True)
        if not corpus.signals:
            raise DataError(f"corpus {corpus_path} carries no filtered signals for the baseline CNN")
        self._prepare_out(corpus=corpus_path, test_fold=test_fold, folds=folds)
        num_classes = self._num_classes(corpus)
        splits = stratified_kfold(corpus.labels, folds, self.cfg.seed)
        if not 0 <= test_fold < folds:
            raise InvalidConfigError(f"--test-fold must lie in [0, {folds})")
        held_out = set(splits[test_fold].tolist())
        train_idx = [i for i in range(len(corpus)) if i not in held_out]
        test_idx = sorted(held_out)

        state, history = train_baseline_cnn([corpus.signals[i] for i in train_idx], corpus.labels[train_idx],
                                            num_classes, self.cfg.training(), quiet=self.quiet)
        predicted = predict_baseline(state, [corpus.signals[i] for i in test_idx])
        report = build_report(confusion_matrix(corpus.labels[test_idx], predicted, num_classes), corpus.class_names)
        write_checkpoint(state, self.out_dir / 'baseline.ckpt')
        atomic_write_text(self.out_dir / 'baseline_history.tsv', history.to_text())
        self._write_report(report, 'baseline_', corpus.class_names)
        self.log(f"baseline: accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f}")


# ============= 引数 =============

def _common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='key = value 形式の設定ファイル')
    parser.add_argument('--out', help='出力ディレクトリ（デフォルト: 設定の out_dir）')
    parser.add_argument('--seed', type=int, help='乱数シード')
    parser.add_argument('--quiet', action='store_true', help='進捗表示を抑制')


def _training_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--corpus', required=True, help='preprocess が書いた corpus.npz')
    parser.add_argument('--epochs', type=int, help='エポック数')
    parser.add_argument('--lr', type=float, help='学習率')
    parser.add_argument('--batch-size', type=int, help='バッチサイズ')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='ECG-SL: self-supervised heartbeat sequence learning')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='合成ECGコーパスを生成')
    _common(p)
    p.add_argument('--records', type=int, default=100, help='レコード数（デフォルト: 100）')
    p.add_argument('--classes', type=int, default=3, help='クラス数（デフォルト: 3）')
    p.add_argument('--snr', default='25', help='SNR dB（none で雑音なし）')
    p.add_argument('--hr-range', default='55,95', help='心拍数の範囲 bpm（デフォルト: 55,95）')
    p.add_argument('--duration', type=float, default=30.0, help='レコード長 秒')
    p.add_argument('--fs', type=float, default=100.0, help='サンプリング周波数 Hz')

    p = sub.add_parser('preprocess', help='フィルタ・R波検出・セグメント化')
    _common(p)
    p.add_argument('--in', dest='manifest', required=True, help='マニフェストファイル')
    p.add_argument('--pad-mode', choices=['edge', 'zero', 'stretch'], help='短い窓の埋め方')
    p.add_argument('--segment-len', type=int, help='セグメント長 S')
    p.add_argument('--workers', type=int, help='並列ワーカー数')
    p.add_argument('--dump-csv', action='store_true', help='レコードごとのセグメントCSVも書く')

    p = sub.add_parser('pretrain-ae', help='構造オートエンコーダの事前学習')
    _common(p)
    _training_flags(p)

    p = sub.add_parser('pretrain-mask', help='マスクセグメント再構成の事前学習')
    _common(p)
    _training_flags(p)
    p.add_argument('--init-ckpt', help='ae チェックポイント')
    p.add_argument('--from-scratch', action='store_true', help='ランダムな構造エンコーダから開始')
    p.add_argument('--mask-fraction', type=float, help='マスクするセグメントの割合')
    p.add_argument('--freeze-encoder', action='store_true', default=None, help='構造エンコーダを固定')

    p = sub.add_parser('finetune', help='下流タスクへのファインチューニング')
    _common(p)
    _training_flags(p)
    p.add_argument('--init', choices=['ae', 'masked', 'random'], default='masked', help='初期化元')
    p.add_argument('--init-ckpt', help='初期化元のチェックポイント')
    p.add_argument('--validation-fold', type=int, help='検証用に取り置く層化分割の番号')
    p.add_argument('--folds', type=int, default=5, help='分割数（デフォルト: 5）')
    p.add_argument('--freeze-encoder', action='store_true', default=None, help='構造エンコーダを固定')

    p = sub.add_parser('evaluate', help='指標・混同行列・層化k分割交差検証')
    _common(p)
    p.add_argument('--corpus', required=True, help='評価に使う corpus.npz')
    p.add_argument('--ckpt', help='finetuned チェックポイント')
    p.add_argument('--kfold', type=int, help='k分割交差検証（例: 5）')
    p.add_argument('--init', choices=['ae', 'masked', 'random'], default='random', help='k分割の初期化元')
    p.add_argument('--init-ckpt', help='k分割の初期化元チェックポイント')

    p = sub.add_parser('saliency', help='予測クラスごとのサリエンシーCSV')
    _common(p)
    p.add_argument('--corpus', required=True, help='corpus.npz')
    p.add_argument('--ckpt', help='finetuned チェックポイント')

    p = sub.add_parser('baseline', help='生信号のベースラインCNN')
    _common(p)
    _training_flags(p)
    p.add_argument('--test-fold', type=int, default=0, help='テストに使う層化分割の番号')
    p.add_argument('--folds', type=int, default=5, help='分割数（デフォルト: 5）')
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        'seed': args.seed,
        'out_dir': args.out,
        'epochs': getattr(args, 'epochs', None),
        'learning_rate': getattr(args, 'lr', None),
        'batch_size': getattr(args, 'batch_size', None),
        'pad_mode': getattr(args, 'pad_mode', None),
        'segment_len': getattr(args, 'segment_len', None),
        'workers': getattr(args, 'workers', None),
        'mask_fraction': getattr(args, 'mask_fraction', None),
        'freeze_encoder': getattr(args, 'freeze_encoder', None),
    }
    return apply_overrides(cfg, overrides)


def _report_error(code: str, text: str):
    """stderr に error=<CODE> の1行だけを書く"""
    print(f"error={code} {' '.join(text.split())}", file=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """コマンドを実行して終了コードを返す（成功 0、失敗 1）"""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # --help は終了コード0のまま通す
        if not e.code:
            raise
        _report_error('E_USAGE', f"invalid command line (argparse exit {e.code})")
        return 1
    try:
        cfg = _resolve_config(args)
        runner = ECGSLRunner(cfg, args.out, args.quiet)
        if args.command == 'synth':
            runner.synth(args.records, args.classes, _parse_snr(args.snr), _parse_hr_range(args.hr_range),
                         args.duration, args.fs)
        elif args.command == 'preprocess':
            asyncio.run(runner.preprocess(args.manifest, args.dump_csv))
        elif args.command == 'pretrain-ae':
            runner.pretrain_ae(args.corpus)
        elif args.command == 'pretrain-mask':
            runner.pretrain_mask(args.corpus, args.init_ckpt, args.from_scratch)
        elif args.command == 'finetune':
            runner.finetune(args.corpus, args.init, args.init_ckpt, args.validation_fold, args.folds)
        elif args.command == 'evaluate':
            runner.evaluate(args.corpus, args.ckpt, args.kfold, args.init, args.init_ckpt)
        elif args.command == 'saliency':
            runner.saliency(args.corpus, args.ckpt)
        elif args.command == 'baseline':
            runner.baseline(args.corpus, args.test_fold, args.folds)
    except ECGSLError as e:
        _report_error(e.code, str(e))
        return 1
    except OSError as e:
        _report_error('E_IO', str(e))
        return 1
    except Exception as e:
        _report_error('E_INTERNAL', f"{type(e).__name__}: {e}")
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
