# console.py
# タイムスタンプ付きのコンソール出力（tqdmの進捗バーを崩さない）

from datetime import datetime

from tqdm import tqdm


def log(message: str):
    tqdm.write(f"[{datetime.now().strftime('%H:%M:%S')}] {message}")


def warn(message: str):
    tqdm.write(f"[{datetime.now().strftime('%H:%M:%S')}] WARNING {message}")


def progress(iterable, desc: str, quiet: bool = False, total=None):
    """バッチ進捗バー"""
    return tqdm(iterable, desc=desc, total=total, leave=False, disable=quiet)
