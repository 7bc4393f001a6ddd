# 张量计算引擎：反向模式自动微分、卷积/池化/通道注意力算子、损失函数与SGD优化器

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evonas.exceptions import ConfigError, EvalGuardError, LabelRangeError, ShapeError

_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """在当前线程内关闭计算图记录"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """带梯度缓冲的稠密张量"""

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = ''
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        suffix = f", op={self.op}" if self.op else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{suffix})"

    def accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """从当前张量反向传播；结束后释放中间节点"""
        if not self.requires_grad:
            raise RuntimeError("该张量不需要梯度")
        if grad is None:
            grad = np.ones_like(self.data)

        order = []
        visited = set()
        stack = [(self, False)]
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

        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        for node in order:
            if node._backward is not None:
                node.grad = None
                node._backward = None
                node._parents = ()


class Parameter(Tensor):
    """可训练参数；decay 表示是否参与权重衰减"""

    def __init__(self, data, name, decay=True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.decay = decay

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value))


def _result(data, parents, backward, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _push(tensor, grad):
    if tensor is not None and tensor.requires_grad:
        tensor.accumulate(grad)


# ---------------------------------------------------------------------------
# 逐元素与结构算子
# ---------------------------------------------------------------------------

def add(a, b):
    """逐元素相加（计算节点的合并操作）"""
    if a.shape != b.shape:
        raise ShapeError(f"相加的形状不一致: {a.shape} vs {b.shape}")

    def backward(g):
        _push(a, g)
        _push(b, g)

    return _result(a.data + b.data, (a, b), backward, 'add')


def concat(tensors, axis=1):
    """沿深度（通道）维拼接"""
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _push(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')


def subsample(x, stride):
    """无参数的步长下采样（步长为2的恒等映射）"""
    if stride == 1:
        return x

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::stride, ::stride] = g
        _push(x, gx)

    return _result(np.ascontiguousarray(x.data[:, :, ::stride, ::stride]), (x,), backward, 'subsample')


def relu(x):
    mask = x.data > 0

    def backward(g):
        _push(x, g * mask)

    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), backward, 'relu')


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        _push(x, g * out * (1.0 - out))

    return _result(out, (x,), backward, 'sigmoid')


def softmax(logits):
    """逐行softmax，先减去行最大值保证数值稳定"""
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=1, keepdims=True)

    def backward(g):
        _push(logits, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _result(out, (logits,), backward, 'softmax')


def linear(x, weight, bias=None):
    """全连接映射 x·Wᵀ + b"""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        _push(x, g @ weight.data)
        _push(weight, g.T @ x.data)
        if bias is not None:
            _push(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, 'linear')


def global_avg_pool(x):
    """全局平均池化 (N,C,H,W) -> (N,C)"""
    area = x.shape[2] * x.shape[3]

    def backward(g):
        _push(x, np.broadcast_to(g[:, :, None, None] / area, x.shape).copy())

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, 'gap')


def scale_channels(x, coefficients):
    """按通道缩放：y = a ⊙ x"""
    a = coefficients.data[:, :, None, None]

    def backward(g):
        _push(x, g * a)
        _push(coefficients, (g * x.data).sum(axis=(2, 3)))

    return _result(x.data * a, (x, coefficients), backward, 'scale_channels')


def dropout(x, rate, training, rng=None):
    """反向缩放的dropout；评估模式为恒等映射"""
    if not 0.0 <= rate < 1.0:
        raise ConfigError('dropout', f"丢弃率必须在[0,1)内，得到 {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        _push(x, g * mask)

    return _result(x.data * mask, (x,), backward, 'dropout')


# ---------------------------------------------------------------------------
# 卷积与池化（SAME 补零）
# ---------------------------------------------------------------------------

def same_padding(size, kernel, stride):
    """返回 (输出尺寸, 前补零, 后补零)，输出尺寸为 ceil(size/stride)"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _pad(x, kh, kw, stride, value=0.0):
    n, c, h, w = x.shape
    ho, top, bottom = same_padding(h, kh, stride)
    wo, left, right = same_padding(w, kw, stride)
    padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)), constant_values=value)
    return padded, ho, wo, top, left


def _windows(padded, kh, kw, stride, ho, wo):
    view = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _tap(padded, i, j, stride, ho, wo):
    return padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]


def conv2d(x, weight, bias=None, stride=1):
    """互相关卷积（不翻转卷积核），SAME补零"""
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if in_c != c:
        raise ShapeError(f"卷积输入通道 {c} 与卷积核通道 {in_c} 不一致")
    if stride < 1:
        raise ShapeError(f"非法步长 {stride}")

    padded, ho, wo, top, left = _pad(x.data, kh, kw, stride)
    win = _windows(padded, kh, kw, stride, ho, wo)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        if weight.requires_grad:
            _push(weight, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None:
            _push(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    contribution = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    _tap(grad_padded, i, j, stride, ho, wo)[...] += contribution.transpose(0, 3, 1, 2)
            _push(x, grad_padded[:, :, top:top + h, left:left + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, 'conv2d')


def depthwise_conv2d(x, weight, bias=None, stride=1):
    """逐通道卷积，卷积核形状 (C,1,k,k)"""
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"逐通道卷积核形状 {weight.shape} 与输入通道 {c} 不一致")
    k = weight.shape[2]
    padded, ho, wo, top, left = _pad(x.data, k, k, stride)
    kernel = weight.data[:, 0]

    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += _tap(padded, i, j, stride, ho, wo) * kernel[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = (g * _tap(padded, i, j, stride, ho, wo)).sum(axis=(0, 2, 3))
            _push(weight, gw)
        if bias is not None:
            _push(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    _tap(grad_padded, i, j, stride, ho, wo)[...] += g * kernel[None, :, i, j, None, None]
            _push(x, grad_padded[:, :, top:top + h, left:left + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, 'depthwise_conv2d')


def depthwise_separable_conv(x, dw_weight, dw_bias, pw_weight, pw_bias, stride=1):
    """深度可分离卷积：逐通道 k×k 卷积后接逐点 1×1 卷积"""
    return conv2d(depthwise_conv2d(x, dw_weight, dw_bias, stride), pw_weight, pw_bias, 1)


def separable_parameter_count(channels, kernel, biases=False):
    count = channels * kernel * kernel + channels * channels
    return count + 2 * channels if biases else count


def pool(x, kind, size=3, stride=1):
    """SAME补零的平均/最大池化；kind 为 'avg' 或 'max'"""
    n, c, h, w = x.shape
    if kind == 'max':
        padded, ho, wo, top, left = _pad(x.data, size, size, stride, value=-np.inf)
        win = _windows(padded, size, size, stride, ho, wo).reshape(n, c, ho, wo, size * size)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            grad_padded = np.zeros(padded.shape, dtype=x.dtype)
            for t in range(size * size):
                i, j = divmod(t, size)
                _tap(grad_padded, i, j, stride, ho, wo)[...] += g * (arg == t)
            _push(x, grad_padded[:, :, top:top + h, left:left + w])

        return _result(np.ascontiguousarray(out), (x,), backward, 'max_pool')

    if kind == 'avg':
        padded, ho, wo, top, left = _pad(x.data, size, size, stride)
        ones, _, _, _, _ = _pad(np.ones((1, 1, h, w), dtype=x.dtype), size, size, stride)
        sums = _windows(padded, size, size, stride, ho, wo).sum(axis=(-2, -1))
        count = _windows(ones, size, size, stride, ho, wo).sum(axis=(-2, -1))
        out = sums / count

        def backward(g):
            grad_padded = np.zeros_like(padded)
            share = g / count
            for i in range(size):
                for j in range(size):
                    _tap(grad_padded, i, j, stride, ho, wo)[...] += share
            _push(x, grad_padded[:, :, top:top + h, left:left + w])

        return _result(out, (x,), backward, 'avg_pool')

    raise ValueError(f"未知池化类型 {kind!r}")


# ---------------------------------------------------------------------------
# 批归一化
# ---------------------------------------------------------------------------

@dataclass
class BatchNorm:
    """批归一化的参数与滑动统计量"""
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    def __call__(self, x, training):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training, self.momentum, self.eps)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """逐通道归一化；训练模式使用批统计量并原地更新滑动统计量"""
    axes = (0, 2, 3)

    def bc(v):
        return v[None, :, None, None]

    if training:
        if x.shape[0] < 2:
            raise ShapeError("训练模式下批归一化的批大小至少为2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - bc(mean)) * bc(inv_std)
    out = bc(gamma.data) * xhat + bc(beta.data)

    def backward(g):
        _push(gamma, (g * xhat).sum(axis=axes))
        _push(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        gxhat = g * bc(gamma.data)
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            gx = bc(inv_std) / m * (
                m * gxhat
                - bc(gxhat.sum(axis=axes))
                - xhat * bc((gxhat * xhat).sum(axis=axes))
            )
        else:
            gx = gxhat * bc(inv_std)
        _push(x, gx)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, 'batch_norm')


# ---------------------------------------------------------------------------
# FR 操作：卷积 + 通道注意力
# ---------------------------------------------------------------------------

def eca_kernel_size(channels, gamma=2, b=1):
    """由通道数自适应确定一维卷积核大小：|log2(C)/γ + b/γ| 截断取整，偶数加1，不超过通道数"""
    if channels < 1:
        raise ConfigError('channels', "通道数至少为1")
    theta = int(abs(math.log2(channels) / gamma + b / gamma))
    if theta % 2 == 0:
        theta += 1
    return max(1, min(theta, channels))


@dataclass(frozen=True)
class AttentionSpec:
    channels: int
    theta: int

    def __post_init__(self):
        if self.theta < 1 or self.theta % 2 == 0:
            raise ConfigError('theta', f"一维卷积核大小必须为正奇数，得到 {self.theta}")
        if self.theta > self.channels:
            raise ConfigError('theta', f"一维卷积核大小 {self.theta} 超过通道数 {self.channels}")

    @classmethod
    def for_channels(cls, channels):
        return cls(channels, eca_kernel_size(channels))


def channel_conv1d(v, weight, bias=None):
    """沿通道轴的一维卷积（两端补零，非循环）"""
    n, c = v.shape
    theta = weight.shape[0]
    pad = theta // 2
    padded = np.pad(v.data, ((0, 0), (pad, pad)))
    out = np.zeros((n, c), dtype=v.dtype)
    for j in range(theta):
        out += weight.data[j] * padded[:, j:j + c]
    if bias is not None:
        out += bias.data[0]

    def backward(g):
        if weight.requires_grad:
            _push(weight, np.array([(g * padded[:, j:j + c]).sum() for j in range(theta)], dtype=v.dtype))
        if bias is not None:
            _push(bias, np.array([g.sum()], dtype=v.dtype))
        if v.requires_grad:
            grad_padded = np.zeros_like(padded)
            for j in range(theta):
                grad_padded[:, j:j + c] += g * weight.data[j]
            _push(v, grad_padded[:, pad:pad + c])

    parents = (v, weight) if bias is None else (v, weight, bias)
    return _result(out, parents, backward, 'channel_conv1d')


def channel_attention(t, weight, bias, spec):
    """GAP -> 一维卷积 -> sigmoid 得到通道权重 a，返回 (a ⊙ t, a)"""
    if t.shape[1] != spec.channels:
        raise ShapeError(f"注意力通道数 {spec.channels} 与特征通道 {t.shape[1]} 不一致")
    if weight.shape[0] != spec.theta:
        raise ShapeError(f"注意力卷积核长度 {weight.shape[0]} 与 θ={spec.theta} 不一致")
    coefficients = sigmoid(channel_conv1d(global_avg_pool(t), weight, bias))
    return scale_channels(t, coefficients), coefficients


def fr_conv(x, conv_weight, conv_bias, bn, attn_weight, attn_bias, spec, stride=1,
            training=False, return_attention=False):
    """FR 操作：y = a ⊙ T(x)，T = 卷积 + BN + ReLU"""
    if conv_weight.shape[2] not in (3, 5):
        raise ConfigError('kernel', f"FR 卷积核大小只支持3或5，得到 {conv_weight.shape[2]}")
    if conv_weight.shape[0] != spec.channels:
        raise ShapeError(f"FR 卷积输出通道 {conv_weight.shape[0]} 与注意力通道 {spec.channels} 不一致")
    features = relu(bn(conv2d(x, conv_weight, conv_bias, stride), training))
    out, coefficients = channel_attention(features, attn_weight, attn_bias, spec)
    if return_attention:
        return out, coefficients
    return out


# ---------------------------------------------------------------------------
# 损失函数
# ---------------------------------------------------------------------------

def _label_indices(labels, classes):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelRangeError(f"标签超出范围 [0, {classes})")
    return labels


def cross_entropy(probabilities, labels):
    """概率矩阵上的平均交叉熵"""
    probabilities = np.asarray(probabilities)
    idx = _label_indices(labels, probabilities.shape[1])
    picked = probabilities[np.arange(len(idx)), idx]
    tiny = np.finfo(probabilities.dtype).tiny
    return float(-np.log(np.clip(picked, tiny, None)).mean())


def softmax_cross_entropy(logits, labels):
    """融合的 softmax + 交叉熵，反向梯度为 (ŷ − y)/batch"""
    n, classes = logits.shape
    idx = _label_indices(labels, classes)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(n), idx].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), idx] -= 1.0
        _push(logits, grad * (g / n))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, 'softmax_ce')


def accuracy(logits, labels):
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float((data.argmax(axis=1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# 初始化与优化器
# ---------------------------------------------------------------------------

def he_normal(rng, shape, fan_in, dtype=np.float32):
    """He 初始化：方差 2/fan_in 的正态分布"""
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class SgdState:
    """带动量（可选Nesterov）与权重衰减的小批量SGD状态"""
    lr: float
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]], state: SgdState):
    """原地更新参数：g ← g + λw；v ← μv + g；w ← w − η(μv + g)（Nesterov）或 w ← w − ηv"""
    for param, grad in zip(params, grads):
        if not param.data.flags.writeable:
            raise EvalGuardError(f"参数 {param.name} 处于只读状态，禁止更新")
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"参数 {param.name} 的梯度形状 {grad.shape} 与参数 {param.shape} 不一致")

        if param.decay and state.weight_decay:
            d_p = grad + state.weight_decay * param.data
        else:
            d_p = np.array(grad, copy=True)

        velocity = state.velocity.get(param.name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
            state.velocity[param.name] = velocity
        velocity *= state.momentum
        velocity += d_p

        if state.nesterov:
            update = d_p + state.momentum * velocity
        else:
            update = velocity
        param.data -= state.lr * update
