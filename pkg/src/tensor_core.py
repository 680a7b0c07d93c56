"""
テンソル演算・リバースモード自動微分エンジン

numpy の float64 配列を値として持つ Tensor と、演算履歴を記録する ComputeTape を提供する。
勾配が必要な値は ``tape.variable(...)`` で作成し、その値から派生した演算だけが
同じテープに記録される。テープを持たない Tensor は定数として扱われる。

ブロードキャスト規則（二項要素演算 add / subtract / multiply / divide）:
    1. 両オペランドの形状が同一
    2. 一方の形状が他方の形状の末尾軸と完全一致する（先頭軸を補うだけ）
       例: (64,) と (2, 16, 64)、(16, 64) と (2, 16, 64)
    3. 一方がスカラー（形状 ()）
上記以外（サイズ1軸の拡張を含む）は ShapeError とする。
matmul のバッチ軸も同じ規則に従う。

テープは1ジョブ専用で、複数スレッドから同時に操作してはならない。
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .error_handler import ContractError, InvalidValueError, ShapeError


DTYPE = np.float64
GELU_COEF = 0.044715
SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """値と勾配記録を保持する密テンソル"""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, tape: Optional["ComputeTape"] = None):
        data = np.asarray(data, dtype=DTYPE)
        self.data = data if data.flags.c_contiguous else data.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.node_id: Optional[int] = None
        if requires_grad and tape is None:
            raise ContractError("requires_grad のテンソルは ComputeTape.variable で作成してください")

    # ---- 基本情報 -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() はスカラー専用です: shape={self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        """NaN / Inf を含まない場合 True"""
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise InvalidValueError(f"{what} に NaN/Inf が含まれています", shape=self.shape)
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ---- 演算子 ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class TapeRecord:
    """テープ上の1演算"""
    name: str
    input_ids: Tuple[Optional[int], ...]
    output_id: int
    backward: BackwardRule


class ComputeTape:
    """演算履歴（トポロジカル順）と逆伝播"""

    def __init__(self, name: str = "tape"):
        self.name = name
        self._records: List[TapeRecord] = []
        self._tensors: Dict[int, Tensor] = {}
        self._next_id = 0
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> List[TapeRecord]:
        return list(self._records)

    def variable(self, data) -> Tensor:
        """勾配を計算する葉テンソルを作成"""
        tensor = Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, tape=self)
        self._register(tensor)
        return tensor

    def _register(self, tensor: Tensor) -> None:
        if self._consumed:
            raise ContractError("backward 済みのテープには記録できません。reset() してください")
        tensor.tape = self
        tensor.requires_grad = True
        tensor.node_id = self._next_id
        self._tensors[self._next_id] = tensor
        self._next_id += 1

    def record(self, name: str, inputs: Sequence[Optional[Tensor]], output: Tensor,
               backward: BackwardRule) -> None:
        self._register(output)
        input_ids = tuple(t.node_id if t is not None else None for t in inputs)
        self._records.append(TapeRecord(name, input_ids, output.node_id, backward))

    def backward(self, loss: Tensor) -> None:
        """
        スカラー損失から逆伝播し、テープ上の全テンソルの grad に書き込む

        Raises:
            ContractError: 非スカラー、別テープの値、reset なしの二重 backward
        """
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss はこのテープ上で計算された値ではありません")
        if loss.shape != ():
            raise ContractError(f"backward はスカラー専用です: shape={loss.shape}")
        if self._consumed:
            raise ContractError("同じテープで backward を二度呼び出しました。reset() してください")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=DTYPE)}
        for record in reversed(self._records):
            output = self._tensors[record.output_id]
            g = grads.pop(record.output_id, None)
            if g is None:
                output.grad = np.zeros_like(output.data)
                continue
            output.grad = g
            input_grads = record.backward(g)
            for input_id, input_grad in zip(record.input_ids, input_grads):
                if input_id is None or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        # 葉テンソル（記録の出力でないもの）
        produced = {r.output_id for r in self._records}
        for node_id, tensor in self._tensors.items():
            if node_id in produced:
                continue
            g = grads.get(node_id)
            tensor.grad = np.array(g, dtype=DTYPE) if g is not None else np.zeros_like(tensor.data)

    def reset(self) -> None:
        """記録と勾配を破棄し、次のジョブに備える"""
        for tensor in self._tensors.values():
            tensor.grad = None
            tensor.tape = None
            tensor.node_id = None
            tensor.requires_grad = False
        self._records.clear()
        self._tensors.clear()
        self._next_id = 0
        self._consumed = False


def backward(loss: Tensor) -> None:
    """loss が属するテープで逆伝播する"""
    if loss.tape is None:
        raise ContractError("loss が記録された演算から得られていません")
    loss.tape.backward(loss)


# ======================================================================
# 内部ヘルパー
# ======================================================================

def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*tensors: Tensor) -> Optional[ComputeTape]:
    tape = None
    for t in tensors:
        if t.tape is not None and t.requires_grad:
            if tape is not None and t.tape is not tape:
                raise ContractError("異なるテープ上の値を混在させることはできません")
            tape = t.tape
    return tape


def _result(name: str, data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    out = Tensor(data)
    tape = _tape_of(*inputs)
    if tape is not None:
        tracked = [t if (t.tape is tape and t.requires_grad) else None for t in inputs]

        def masked_rule(g: np.ndarray, _rule=rule, _tracked=tracked):
            grads = _rule(g)
            return tuple(gr if t is not None else None for gr, t in zip(grads, _tracked))

        tape.record(name, tracked, out, masked_rule)
    return out


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str = "broadcast") -> Tuple[int, ...]:
    """末尾軸ブロードキャストの結果形状"""
    if a == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(f"{op}: 形状をブロードキャストできません", a, b)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


# ======================================================================
# 要素演算
# ======================================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "add")
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "subtract")
    return _result("subtract", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "multiply")
    return _result("multiply", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def divide(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "divide")
    out = a.data / b.data

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result("divide", out, (a, b), rule)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise InvalidValueError("log の引数に 0 以下の値が含まれています")
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x: ArrayLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)
    out = np.power(x.data, p)
    if not np.isfinite(out).all() and np.isfinite(x.data).all():
        raise InvalidValueError(f"power({p}) が非有限値を生成しました")
    return _result("power", out, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),))


def sigmoid(x: ArrayLike) -> Tensor:
    """符号で分岐する数値安定なシグモイド"""
    x = as_tensor(x)
    x.check_finite("sigmoid の入力")
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: ArrayLike) -> Tensor:
    """GELU (tanh 近似)"""
    x = as_tensor(x)
    u = SQRT_2_OVER_PI * (x.data + GELU_COEF * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def rule(g):
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result("gelu", out, (x,), rule)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    return _result("relu", np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


# ======================================================================
# 縮約・行列演算
# ======================================================================

def tensor_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", out, (x,), rule)


def tensor_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result("mean", out, (x,), rule)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """行列積。バッチ軸は末尾軸ブロードキャスト規則に従う"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: 内積軸が一致しません", a.shape, b.shape)
    broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", out, (a, b), rule)


def softmax(x: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    最終軸のソフトマックス（log-sum-exp 安定化）

    Args:
        x: 入力
        mask: x と同一形状の bool 配列。False の位置は -inf として扱う
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError("softmax: マスク形状が入力と一致しません", mask.shape, x.shape)
        z = np.where(mask, z, -np.inf)
    z_max = z.max(axis=-1, keepdims=True)
    if not np.isfinite(z_max).all():
        raise InvalidValueError("softmax: 全要素がマスクされた行、または非有限値があります")
    e = np.exp(z - z_max)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax", out, (x,), rule)


def log_softmax(x: ArrayLike) -> Tensor:
    """最終軸の対数ソフトマックス"""
    x = as_tensor(x)
    x.check_finite("log_softmax の入力")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return _result("log_softmax", out, (x,),
                   lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """最終軸の正規化（アフィン変換なし）"""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def rule(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - xhat * gx_mean),)

    return _result("layer_norm", xhat, (x,), rule)


# ======================================================================
# 形状・インデックス操作
# ======================================================================

def gather_rows(table: ArrayLike, ids) -> Tensor:
    """埋め込み行の取得: 結果形状は ids.shape + (table.shape[1],)"""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("gather_rows: テーブルは2次元である必要があります", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("gather_rows: id がテーブル範囲外です", ids.shape, table.shape)

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result("gather_rows", table.data[ids], (table,), rule)


def take(x: ArrayLike, index: int, axis: int) -> Tensor:
    """指定軸の1要素を取り出す（その軸は消える）"""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = np.take(x.data, index, axis=axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        gx[tuple(slicer)] = g
        return (gx,)

    return _result("take", out, (x,), rule)


def take_along_last(x: ArrayLike, indices) -> Tensor:
    """最終軸から行ごとに1要素を取り出す: x (..., C), indices (...) -> (...)"""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError("take_along_last: インデックス形状が一致しません", idx.shape, x.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ShapeError("take_along_last: インデックスが範囲外です", idx.shape, x.shape)
    expanded = idx[..., None]
    out = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expanded, g[..., None], axis=-1)
        return (gx,)

    return _result("take_along_last", out, (x,), rule)


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concatenate: 入力が空です")
    ndim = parts[0].ndim
    axis = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or p.shape[:axis] + p.shape[axis + 1:] != parts[0].shape[:axis] + parts[0].shape[axis + 1:]:
            raise ShapeError("concatenate: 結合軸以外の形状が一致しません", parts[0].shape, p.shape)
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concatenate", out, parts, rule)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape: 要素数が一致しません", x.shape, tuple(shape)) from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose: 軸指定が不正です", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),))


# ======================================================================
# 勾配検証
# ======================================================================

def grad_check(fn: Callable[[Tensor], Tensor], point: ArrayLike, step: float = 1e-5) -> float:
    """
    テープ勾配と中心差分の最大相対誤差を返す

    相対誤差は |a - n| / max(|a|, |n|, 1) （単位下限付き）で計算する。

    Args:
        fn: Tensor -> スカラー Tensor
        point: 評価点
        step: 差分の刻み幅 (> 0)
    """
    if step <= 0:
        raise ContractError(f"step は正である必要があります: {step}")
    x0 = np.array(as_tensor(point).data, dtype=DTYPE, copy=True)

    tape = ComputeTape("grad_check")
    x = tape.variable(x0)
    y = fn(x)
    if y.shape != ():
        raise ContractError(f"grad_check の関数はスカラーを返す必要があります: shape={y.shape}")
    tape.backward(y)
    analytic = x.grad

    numeric = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        plus = x0.copy()
        minus = x0.copy()
        plus[idx] += step
        minus[idx] -= step
        f_plus = fn(Tensor(plus)).item()
        f_minus = fn(Tensor(minus)).item()
        numeric[idx] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
