# 通用工具函数

import dataclasses
import enum
import hashlib
import json
import logging
import logging.handlers
import os
import time
from datetime import datetime

import numpy as np

from evonas.config import Config

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def get_logger(name, log_file=None):
    """获取模块日志记录器：轮换文件处理器 + 控制台处理器"""
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    formatter = logging.Formatter(LOG_FORMAT)

    if log_file:
        try:
            os.makedirs(Config.LOG_DIR, exist_ok=True)
            file_handler = logging.handlers.RotatingFileHandler(
                os.path.join(Config.LOG_DIR, log_file),
                maxBytes=Config.LOG_MAX_BYTES,
                backupCount=Config.LOG_BACKUP_COUNT,
                encoding='utf-8'
            )
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)
        except OSError as e:
            # 日志目录不可写时只输出到控制台
            logging.getLogger(__name__).warning(f"无法创建日志文件 {log_file}: {e}")

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    logger.setLevel(Config.LOG_LEVEL)
    logger.propagate = False
    return logger


class EvonasEncoder(json.JSONEncoder):
    """自定义JSON编码器，处理numpy、枚举、数据类和datetime对象"""
    def default(self, obj):
        if isinstance(obj, datetime):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, enum.Enum):
            return obj.value
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return dataclasses.asdict(obj)
        return super().default(obj)


def json_dumps(obj, **kwargs):
    """使用自定义编码器进行JSON序列化"""
    return json.dumps(obj, cls=EvonasEncoder, **kwargs)


def json_loads(json_str):
    """JSON反序列化函数"""
    return json.loads(json_str)


def write_json(path, obj):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json_dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))
        f.write('\n')


def array_fingerprint(*arrays):
    """数组内容的SHA-256指纹"""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.dtype).encode('ascii'))
        digest.update(str(array.shape).encode('ascii'))
        digest.update(array.tobytes())
    return digest.hexdigest()


class Stopwatch:
    """计时器；disabled 时恒返回0，用于生成逐字节可复现的指标"""

    def __init__(self, enabled=True):
        self.enabled = enabled
        self.start = time.perf_counter()

    def elapsed(self):
        if not self.enabled:
            return 0.0
        return time.perf_counter() - self.start
