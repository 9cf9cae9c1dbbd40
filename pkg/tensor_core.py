# tensor_core.py
# numpy上の最小限の逆伝播自動微分
# ECG-SL のモデルが使う演算だけを実装し、有限差分による検証ハーネスを備える

import contextlib
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidConfigError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """計算グラフを記録しない（評価・推論用）"""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _record_kink(signature: np.ndarray):
    # grad_check 実行中だけ ReLU/MaxPool の分岐パターンを記録する
    log = getattr(_state, 'kink_log', None)
    if log is not None:
        log.append(signature.tobytes())


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', '_parents', '_backward', 'op')

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Tuple['Tensor', ...] = (), op: str = ''):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op='{self.op}')"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> 'Tensor':
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype).reshape(self.shape)
        else:
            self.grad = self.grad + grad

    # 演算子
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    needs_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype,
                 _parents=tuple(parents) if needs_grad else (), op=op)
    if needs_grad:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで広がった軸を足し戻す"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============= Tape / backward =============

class Tape:
    """loss から辿った演算の位相順リスト"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> 'Tape':
        order: List[Tensor] = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor):
    """loss から勾配を逆順に累積する（ゼロ化は呼び出し側の責任）"""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_loss(loss)
    # 中間ノードの勾配は辞書で受け渡し、葉にだけ grad を残す
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node._accumulate(grad)
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


# ============= 要素ごとの演算 =============

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(a.data + b.data, (a, b), 'add',
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(a.data - b.data, (a, b), 'sub',
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _make(a.data * b.data, (a, b), 'mul',
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    _record_kink(active)
    return _make(np.where(active, x.data, 0).astype(x.dtype), (x,), 'relu',
                 lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    positive = x.data >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x.data[positive]))
    exp_x = np.exp(x.data[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return _make(out, (x,), 'sigmoid', lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), 'tanh', lambda g: (g * (1.0 - out * out),))


# ============= 形状操作 =============

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {original} to {tuple(shape)}") from e
    return _make(data, (x,), 'reshape', lambda g: (g.reshape(original),))


def transpose(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return _make(np.swapaxes(x.data, axis1, axis2).copy(), (x,), 'transpose',
                 lambda g: (np.swapaxes(g, axis1, axis2),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                for i in range(len(tensors))]
    return _make(data, tensors, 'concat', _backward)


def slice_(x: Tensor, index) -> Tensor:
    def _backward(g):
        full = np.zeros_like(x.data)
        # スカラー添字の出力も shape (1,) で保持されるので元の形に戻す
        np.add.at(full, index, np.reshape(g, np.shape(x.data[index])))
        return (full,)
    return _make(np.array(x.data[index]), (x,), 'slice', _backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), 'sum', _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


# ============= 線形演算 =============

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b), 'matmul', _backward)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W + b（W は [in, out]）"""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def _conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _correlate(padded: np.ndarray, kernel: np.ndarray, stride: int, out_len: int) -> np.ndarray:
    # padded [B, C_in, Lp], kernel [C_out, C_in, K] -> [B, C_out, out_len]
    K = kernel.shape[2]
    span = stride * (out_len - 1) + 1
    cols = np.stack([padded[:, :, k:k + span:stride] for k in range(K)], axis=-1)
    return np.einsum('bclk,ock->bol', cols, kernel, optimize=True)


def _correlate_adjoint(grad: np.ndarray, kernel: np.ndarray, stride: int, padded_len: int) -> np.ndarray:
    # _correlate の入力に関する随伴: grad [B, C_out, out_len] -> [B, C_in, padded_len]
    B, _, out_len = grad.shape
    K = kernel.shape[2]
    span = stride * (out_len - 1) + 1
    result = np.zeros((B, kernel.shape[1], padded_len), dtype=grad.dtype)
    for k in range(K):
        result[:, :, k:k + span:stride] += np.einsum('bol,oc->bcl', grad, kernel[:, :, k], optimize=True)
    return result


def _kernel_grad(padded: np.ndarray, grad: np.ndarray, stride: int, K: int) -> np.ndarray:
    out_len = grad.shape[2]
    span = stride * (out_len - 1) + 1
    cols = np.stack([padded[:, :, k:k + span:stride] for k in range(K)], axis=-1)
    return np.einsum('bclk,bol->ock', cols, grad, optimize=True)


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [C, L] or [B, C, L], got {x.shape}")
    return x, False


def conv1d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1次元の相互相関（ストライド・左右対称ゼロパディング付き）"""
    x, squeeze = _batched(x)
    B, C_in, L = x.shape
    C_out, C_k, K = kernel.shape
    if C_k != C_in:
        raise ShapeError(f"conv1d channel mismatch: input {C_in}, kernel {C_k}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if K > L + 2 * padding:
        raise ShapeError(f"kernel {K} longer than padded input {L + 2 * padding}")
    out_len = _conv_output_length(L, K, stride, padding)
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))

    def _backward(g):
        gx = _correlate_adjoint(g, kernel.data, stride, L + 2 * padding)[:, :, padding:padding + L]
        return gx, _kernel_grad(padded, g, stride, K)
    out = _make(_correlate(padded, kernel.data, stride, out_len), (x, kernel), 'conv1d', _backward)
    if bias is not None:
        out = add(out, reshape(bias, (C_out, 1)))
    return reshape(out, out.shape[1:]) if squeeze else out


def conv1d_transpose(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """conv1d の入力に関する随伴（転置畳み込み）

    kernel は conv1d と同じ並び [C_y, C_out, K]（x のチャンネル数が C_y）。
    出力長 = (L - 1) * stride - 2 * padding + K + output_padding
    """
    x, squeeze = _batched(x)
    B, C_y, L = x.shape
    C_k, C_out, K = kernel.shape
    if C_k != C_y:
        raise ShapeError(f"conv1d_transpose channel mismatch: input {C_y}, kernel {C_k}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"invalid output_padding {output_padding}")
    out_len = (L - 1) * stride - 2 * padding + K + output_padding
    if out_len < 1:
        raise ShapeError("conv1d_transpose output would be empty")
    full_len = out_len + 2 * padding
    # 随伴を full_len 上で取り、左右の padding を切り落とす
    span_len = max(full_len, (L - 1) * stride + K)
    full = _correlate_adjoint(x.data, kernel.data, stride, span_len)[:, :, :full_len]
    data = full[:, :, padding:padding + out_len]

    def _backward(g):
        g_full = np.zeros((B, C_out, span_len), dtype=g.dtype)
        g_full[:, :, padding:padding + out_len] = g
        gx = _correlate(g_full, kernel.data, stride, L)
        return gx, _kernel_grad(g_full, x.data, stride, K)
    out = _make(np.ascontiguousarray(data), (x, kernel), 'conv1d_transpose', _backward)
    if bias is not None:
        out = add(out, reshape(bias, (C_out, 1)))
    return reshape(out, out.shape[1:]) if squeeze else out


def max_pool1d(x: Tensor, size: int = 2) -> Tensor:
    """窓幅=ストライド=size の最大値プーリング（端数は切り捨て）"""
    B, C, L = x.shape
    out_len = L // size
    if out_len < 1:
        raise ShapeError(f"max_pool1d input length {L} shorter than window {size}")
    windows = x.data[:, :, :out_len * size].reshape(B, C, out_len, size)
    choice = windows.argmax(axis=-1)
    _record_kink(choice)
    data = np.take_along_axis(windows, choice[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, choice[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :out_len * size] = gw.reshape(B, C, out_len * size)
        return (gx,)
    return _make(data, (x,), 'max_pool1d', _backward)


# ============= 正規化・確率 =============

def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """最終軸のソフトマックス。mask=False の位置は厳密に0（全て False の行は0ベクトル）"""
    if mask is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    logits = np.where(valid, x.data, -np.inf)
    row_max = logits.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    exp = np.where(valid, np.exp(np.where(valid, x.data - row_max, 0.0)), 0.0)
    total = exp.sum(axis=-1, keepdims=True)
    out = (exp / np.where(total > 0, total, 1.0)).astype(x.dtype)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _make(out, (x,), 'softmax', _backward)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """最終軸の LayerNorm（学習可能な scale / shift）"""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    D = x.shape[-1]

    def _backward(g):
        g_normed = g * scale.data
        gx = inv_std / D * (D * g_normed - g_normed.sum(axis=-1, keepdims=True)
                            - normed * (g_normed * normed).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * normed, scale.shape), _unbroadcast(g, shift.shape))
    return _make(normed * scale.data + shift.data, (x, scale, shift), 'layer_norm', _backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """学習時のみ。評価時は恒等写像"""
    if not training or p <= 0:
        return x
    if rng is None:
        raise InvalidConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.dtype))


# ============= 損失 =============

def masked_mse(pred: Tensor, target: TensorLike, mask: np.ndarray) -> Tensor:
    """mask=True の行だけで平均した二乗誤差（行ごとに最終軸で平均）"""
    target = as_tensor(target, pred)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeError(f"masked_mse shape mismatch {pred.shape} vs {target.shape}")
    if mask.shape != pred.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} must equal {pred.shape[:-1]}")
    count = int(mask.sum())
    if count == 0:
        raise InvalidConfigError("masked_mse needs at least one masked row")
    S = pred.shape[-1]
    weight = mask[..., None].astype(pred.dtype)
    diff = pred.data - target.data
    loss = np.asarray((weight * diff * diff).sum() / (count * S), dtype=pred.dtype)

    def _backward(g):
        gp = g * 2.0 * weight * diff / (count * S)
        return gp, -gp
    return _make(loss, (pred, target), 'masked_mse', _backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """log-softmax 形のクロスエントロピー（バッチ平均）"""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} must be ({B},)")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    loss = np.asarray(-log_probs[np.arange(B), labels].mean(), dtype=logits.dtype)

    def _backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(B), labels] -= 1.0
        return (g * probs / B,)
    return _make(loss, (logits,), 'cross_entropy', _backward)


# ============= 有限差分チェック =============

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """中心差分と解析勾配の最大相対誤差

    倍精度で評価する。x±eps の評価で ReLU / MaxPool の分岐が変わる座標は
    微分不可能点をまたぐため除外する。
    """
    base = np.array(x.data, dtype=np.float64)
    point = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    loss = f(point)
    if loss.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        values = []
        patterns = []
        for sign in (1.0, -1.0):
            shifted = flat.copy()
            shifted[i] += sign * eps
            _state.kink_log = []
            try:
                with no_grad():
                    value = f(Tensor(shifted.reshape(base.shape), dtype=np.float64))
            finally:
                patterns.append(_state.kink_log)
                _state.kink_log = None
            if not np.all(np.isfinite(value.data)):
                raise NumericError(f"non-finite value while probing coordinate {i}")
            values.append(float(value.data.reshape(-1)[0]))
        if patterns[0] != patterns[1]:
            continue
        numeric = (values[0] - values[1]) / (2 * eps)
        exact = float(analytic.reshape(-1)[i])
        error = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
        worst = max(worst, error)
    return worst
