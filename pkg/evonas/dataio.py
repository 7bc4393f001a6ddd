# 数据模块：IDX/RGB二进制加载、合成数据、分层划分、小批量流、归一化与数据增强

import enum
import gzip
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from evonas.exceptions import (
    DataError,
    DataFormatError,
    EmptyDatasetError,
    LabelRangeError,
    SplitTagError,
    StratificationError,
)
from evonas.utils import array_fingerprint, get_logger

logger = get_logger(__name__, 'dataio.log')

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class Split(enum.Enum):
    TRAIN = 'train'
    VALID = 'valid'
    TEST = 'test'


@dataclass(frozen=True)
class Dataset:
    """图像 (N,C,H,W) 取值 [0,1]，标签为类别下标，带划分标签"""
    images: np.ndarray
    labels: np.ndarray
    classes: int
    split: Split

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"图像数组必须是4维 (N,C,H,W)，得到 {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"图像数 {len(self.images)} 与标签数 {len(self.labels)} 不一致")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise LabelRangeError(f"标签超出范围 [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, indices, split=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.classes, split or self.split)

    def require(self, split):
        """检查划分标签，防止测试数据泄漏到搜索过程"""
        if self.split is not split:
            raise SplitTagError(f"需要 {split.value} 数据，得到 {self.split.value}")
        if len(self) == 0:
            raise EmptyDatasetError(f"{split.value} 数据集为空")
        return self

    def astype(self, dtype):
        return Dataset(self.images.astype(dtype, copy=False), self.labels, self.classes, self.split)

    def with_classes(self, classes):
        return Dataset(self.images, self.labels, classes, self.split)

    def fingerprint(self):
        return array_fingerprint(self.images, self.labels)

    @staticmethod
    def concat(first, second, split):
        if first.classes != second.classes or first.shape != second.shape:
            raise DataError("合并的数据集类别数或图像形状不一致")
        return Dataset(np.concatenate([first.images, second.images]),
                       np.concatenate([first.labels, second.labels]), first.classes, split)


# ---------------------------------------------------------------------------
# 二进制格式
# ---------------------------------------------------------------------------

def _read_bytes(path):
    if not os.path.exists(path):
        raise DataError(f"数据文件不存在: {path}")
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:2] == b'\x1f\x8b':
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise DataFormatError(path, 0, f"gzip 解压失败: {e}")
    return raw


def _idx_header(raw, path, magic, dims):
    size = 4 + 4 * dims
    if len(raw) < 4:
        raise DataFormatError(path, len(raw), "IDX 头部被截断")
    found = struct.unpack_from('>I', raw, 0)[0]
    if found != magic:
        raise DataFormatError(path, 0, f"魔数 0x{found:08x} 不是期望的 0x{magic:08x}")
    if len(raw) < size:
        raise DataFormatError(path, len(raw), "IDX 头部被截断")
    return struct.unpack_from(f'>{dims}I', raw, 4), size


def load_idx(images_path, labels_path, classes=10, split=Split.TRAIN, dtype=np.float32):
    """读取 IDX 图像/标签文件对（支持 gzip），像素缩放到 [0,1]"""
    raw_images = _read_bytes(images_path)
    (count, rows, cols), offset = _idx_header(raw_images, images_path, IDX_IMAGE_MAGIC, 3)
    needed = offset + count * rows * cols
    if len(raw_images) < needed:
        raise DataFormatError(images_path, len(raw_images), f"像素数据被截断，需要 {needed} 字节")
    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=count * rows * cols, offset=offset)

    raw_labels = _read_bytes(labels_path)
    (label_count,), offset = _idx_header(raw_labels, labels_path, IDX_LABEL_MAGIC, 1)
    if label_count != count:
        raise DataFormatError(labels_path, 4, f"标签数 {label_count} 与图像数 {count} 不一致")
    if len(raw_labels) < offset + label_count:
        raise DataFormatError(labels_path, len(raw_labels), "标签数据被截断")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=label_count, offset=offset).astype(np.int64)

    images = (pixels.reshape(count, 1, rows, cols) / 255.0).astype(dtype)
    logger.info(f"读取 IDX 数据 {images_path}: {count} 张 {rows}x{cols}")
    return Dataset(images, labels, classes, split)


def write_idx(images_path, labels_path, images, labels):
    """写出 IDX 文件对（测试夹具用）；images 为 uint8 (N,H,W) 或 (N,1,H,W)"""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[:, 0]
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    opener = gzip.open if str(images_path).endswith('.gz') else open
    with opener(images_path, 'wb') as f:
        f.write(struct.pack('>4I', IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    opener = gzip.open if str(labels_path).endswith('.gz') else open
    with opener(labels_path, 'wb') as f:
        f.write(struct.pack('>2I', IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_raw_rgb(path, height, width, classes=10, split=Split.TRAIN, dtype=np.float32):
    """读取 1字节标签 + 3·H·W 像素字节 的记录文件，按通道优先解码"""
    raw = _read_bytes(path)
    record = 1 + 3 * height * width
    if len(raw) % record:
        raise DataFormatError(path, len(raw) - len(raw) % record, f"文件大小 {len(raw)} 不是记录长度 {record} 的整数倍")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = table[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise LabelRangeError(f"{path} 第{bad}条记录的标签 {labels[bad]} 超出范围 [0, {classes})")
    images = (table[:, 1:].reshape(-1, 3, height, width) / 255.0).astype(dtype)
    logger.info(f"读取 RGB 记录 {path}: {len(labels)} 张 {height}x{width}")
    return Dataset(images, labels, classes, split)


def write_raw_rgb(path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    table = np.concatenate([labels[:, None], images.reshape(len(images), -1)], axis=1)
    with open(path, 'wb') as f:
        f.write(table.tobytes())


# ---------------------------------------------------------------------------
# 合成数据
# ---------------------------------------------------------------------------

def synthetic(seed, n, classes, height, width, channels=1, split=Split.TRAIN, dtype=np.float32):
    """按类别朝向生成的条纹图像：随机平移与亮度，叠加 σ=0.2 高斯噪声"""
    if classes < 2:
        raise DataError("合成数据至少需要2个类别")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)

    angle = np.pi * labels / classes + rng.normal(0.0, 0.05, size=n)
    cy = (height - 1) / 2.0 + rng.uniform(-height / 4.0, height / 4.0, size=n)
    cx = (width - 1) / 2.0 + rng.uniform(-width / 4.0, width / 4.0, size=n)
    intensity = rng.uniform(0.6, 1.0, size=n)
    half_width = max(height, width) / 16.0 + 0.5

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    distance = np.abs(dx * np.sin(angle)[:, None, None] - dy * np.cos(angle)[:, None, None])
    bars = np.where(distance <= half_width, intensity[:, None, None], 0.0)

    gains = rng.uniform(0.8, 1.0, size=(n, channels))
    images = bars[:, None] * gains[:, :, None, None]
    images = images + rng.normal(0.0, 0.2, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    return Dataset(images, labels, classes, split)


# ---------------------------------------------------------------------------
# 划分与小批量
# ---------------------------------------------------------------------------

def split_indices(labels, classes, seed):
    """按类别分层的 80/20 下标划分"""
    labels = np.asarray(labels)
    if len(labels) < 5:
        raise StratificationError(f"样本数 {len(labels)} 少于5，无法划分")
    rng = np.random.default_rng(seed)
    train, valid = [], []
    for k in range(classes):
        members = np.flatnonzero(labels == k)
        if len(members) == 0:
            continue
        if len(members) < 5:
            raise StratificationError(f"类别 {k} 只有 {len(members)} 个样本（至少需要5个）")
        members = rng.permutation(members)
        n_train = int(np.floor(0.8 * len(members) + 0.5))
        train.append(members[:n_train])
        valid.append(members[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(valid))


def split_80_20(dataset, seed):
    train_idx, valid_idx = split_indices(dataset.labels, dataset.classes, seed)
    return dataset.subset(train_idx, Split.TRAIN), dataset.subset(valid_idx, Split.VALID)


class BatchStream:
    """每个 epoch 一个随机排列；末尾只剩1个样本时并入前一批"""

    def __init__(self, dataset, batch_size, rng, shuffle=True):
        if len(dataset) == 0:
            raise EmptyDatasetError(f"{dataset.split.value} 数据集为空")
        if batch_size < 1:
            raise DataError("批大小必须为正整数")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng(rng)
        self.shuffle = shuffle

    def __len__(self):
        n = len(self.dataset)
        count = -(-n // self.batch_size)
        if count > 1 and n % self.batch_size == 1:
            count -= 1
        return count

    def epoch_indices(self):
        n = len(self.dataset)
        order = self.rng.permutation(n) if self.shuffle else np.arange(n)
        batches = [order[i:i + self.batch_size] for i in range(0, n, self.batch_size)]
        if len(batches) > 1 and len(batches[-1]) == 1:
            tail = batches.pop()
            batches[-1] = np.concatenate([batches[-1], tail])
        return batches

    def __iter__(self):
        for idx in self.epoch_indices():
            yield self.dataset.images[idx], self.dataset.labels[idx]


# ---------------------------------------------------------------------------
# 归一化与增强
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, dataset):
        """只在训练集上统计逐通道均值与标准差"""
        dataset.require(Split.TRAIN)
        mean = dataset.images.mean(axis=(0, 2, 3))
        std = dataset.images.std(axis=(0, 2, 3))
        std = np.where(std > 1e-8, std, 1.0)
        return cls(mean.astype(dataset.images.dtype), std.astype(dataset.images.dtype))

    def apply(self, images):
        return (images - self.mean[None, :, None, None]) / self.std[None, :, None, None]


@dataclass(frozen=True)
class AugmentPolicy:
    pad: int = 4
    flip_prob: float = 0.5


def hflip(images, mask):
    """对 mask 为真的图像做水平翻转"""
    out = images.copy()
    out[mask] = images[mask][..., ::-1]
    return out


def crop(images, offsets, pad):
    """补零 pad 后按 (dy,dx) 偏移裁剪回原尺寸"""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = np.asarray(offsets, dtype=np.int64)
    rows = offsets[:, 0, None] + np.arange(h)[None]
    cols = offsets[:, 1, None] + np.arange(w)[None]
    return padded[
        np.arange(n)[:, None, None, None],
        np.arange(c)[None, :, None, None],
        rows[:, None, :, None],
        cols[:, None, None, :],
    ]


def augment(images, policy, normalizer, rng=None, training=True):
    """训练：随机裁剪 + 水平翻转 + 归一化；评估：只归一化"""
    if training and policy is not None:
        rng = np.random.default_rng(rng)
        n = len(images)
        offsets = rng.integers(0, 2 * policy.pad + 1, size=(n, 2))
        images = crop(images, offsets, policy.pad)
        images = hflip(images, rng.random(n) < policy.flip_prob)
    return normalizer.apply(images)


# ---------------------------------------------------------------------------
# 按配置加载
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataBundle:
    train: Dataset
    valid: Dataset
    test: Dataset
    classes: int
    normalizer: Normalizer
    source: str = 'synthetic'

    @property
    def train_full(self):
        """训练集 ∪ 验证集，用于最终重训练"""
        return Dataset.concat(self.train, self.valid, Split.TRAIN)

    @property
    def input_shape(self):
        return self.train.shape

    def fingerprints(self):
        return {
            'train': self.train.fingerprint(),
            'valid': self.valid.fingerprint(),
            'test': self.test.fingerprint(),
        }


def _require_path(key, value):
    if not value:
        raise DataError(f"配置项 {key} 未设置数据路径")
    return value


def load_datasets(cfg, seed: Optional[int] = None):
    """按配置加载训练/测试数据并分层划分出验证集"""
    seed = cfg.seed if seed is None else seed
    dtype = np.dtype(cfg.dtype)
    data_seed, test_seed, split_seed = np.random.SeedSequence([seed, 0xDA7A]).spawn(3)

    if cfg.dataset == 'synthetic':
        classes = cfg.synthetic_classes
        size = cfg.synthetic_size
        full = synthetic(data_seed, cfg.synthetic_n, classes, size, size, cfg.synthetic_channels, Split.TRAIN, dtype)
        test = synthetic(test_seed, cfg.synthetic_test_n, classes, size, size, cfg.synthetic_channels, Split.TEST, dtype)
    elif cfg.dataset == 'idx':
        classes = cfg.classes
        full = load_idx(_require_path('train_images', cfg.train_images),
                        _require_path('train_labels', cfg.train_labels), classes, Split.TRAIN, dtype)
        test = load_idx(_require_path('test_images', cfg.test_images),
                        _require_path('test_labels', cfg.test_labels), classes, Split.TEST, dtype)
    else:
        classes = cfg.classes
        full = load_raw_rgb(_require_path('train_path', cfg.train_path),
                            cfg.image_height, cfg.image_width, classes, Split.TRAIN, dtype)
        test = load_raw_rgb(_require_path('test_path', cfg.test_path),
                            cfg.image_height, cfg.image_width, classes, Split.TEST, dtype)

    train, valid = split_80_20(full, split_seed)
    normalizer = Normalizer.fit(train)
    logger.info(f"数据加载完成 ({cfg.dataset}): 训练 {len(train)}, 验证 {len(valid)}, 测试 {len(test)}, 类别 {classes}")
    return DataBundle(train, valid, test, classes, normalizer, cfg.dataset)
