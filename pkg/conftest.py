# 测试公共夹具与有限差分梯度检查

import os
import tempfile

os.environ.setdefault('EVONAS_LOG_DIR', os.path.join(tempfile.gettempdir(), 'evonas-test-logs'))

import numpy as np
import pytest

from evonas.config import SearchConfig
from evonas.dataio import load_datasets


def numerical_gradient(f, array, eps=1e-6):
    """对 array 逐元素做中心差分，f 返回标量"""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = f()
        flat[i] = original - eps
        minus = f()
        flat[i] = original
        out[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(forward, tensors, rng, eps=1e-6):
    """用随机投影把输出化为标量，比较反向梯度与中心差分，返回最大相对误差"""
    out = forward()
    projection = rng.standard_normal(out.shape)
    for t in tensors:
        t.zero_grad()
    out.backward(projection.copy())
    analytic = [np.array(t.grad, copy=True) for t in tensors]

    def scalar():
        return float((forward().data * projection).sum())

    errors = []
    for t, a in zip(tensors, analytic):
        errors.append(relative_error(a, numerical_gradient(scalar, t.data, eps)))
    return max(errors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return SearchConfig(
        population=2,
        generations=2,
        n_c=2,
        channels=4,
        batch_size=16,
        eval_batch_size=64,
        final_epochs=1,
        synthetic_n=60,
        synthetic_test_n=30,
        synthetic_classes=3,
        synthetic_size=8,
        eval_workers=1,
        wall_clock=False,
    )


@pytest.fixture
def tiny_data(tiny_cfg):
    return load_datasets(tiny_cfg)
