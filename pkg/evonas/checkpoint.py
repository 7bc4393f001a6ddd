# 检查点读写：版本化二进制容器（JSON头 + 小端原始数组），原子写入

import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from evonas.exceptions import DataFormatError
from evonas.supergraph import ParameterBank
from evonas.utils import get_logger, json_dumps, json_loads

logger = get_logger(__name__, 'checkpoint.log')

CHECKPOINT_MAGIC = b'EVNASCKP'
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct('<8sIQ')


@dataclass
class Checkpoint:
    state: dict
    banks: Dict[str, dict] = field(default_factory=dict)
    arrays: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def restore_bank(self, bank_id, bank):
        """把检查点中的数组与随机数状态写回已按相同配置创建的参数库"""
        meta = self.banks[bank_id]
        if np.dtype(meta['dtype']) != bank.dtype:
            raise DataFormatError('<checkpoint>', 0, f"参数库精度 {bank.dtype} 与检查点 {meta['dtype']} 不一致")
        bank.load_arrays(self.arrays[bank_id])
        bank.rng.bit_generator.state = meta['rng']
        bank.step = meta['step']
        return bank

    def build_bank(self, bank_id, template):
        """以 template 的键结构为基础恢复一个新参数库"""
        bank = template.clone()
        return self.restore_bank(bank_id, bank)


def save_checkpoint(path, banks: Dict[str, ParameterBank], state):
    """原子写入：先写临时文件再 os.replace"""
    table = []
    blobs = []
    offset = 0
    bank_meta = {}
    for bank_id in sorted(banks):
        bank = banks[bank_id]
        bank_meta[bank_id] = {
            'channels': bank.channels,
            'dtype': bank.dtype.str,
            'rng': bank.rng.bit_generator.state,
            'step': bank.step,
        }
        for name, array in bank.named_arrays().items():
            data = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<')).tobytes()
            table.append({
                'bank': bank_id,
                'name': name,
                'dtype': array.dtype.newbyteorder('<').str,
                'shape': list(array.shape),
                'offset': offset,
                'nbytes': len(data),
            })
            blobs.append(data)
            offset += len(data)

    header = json_dumps({'arrays': table, 'banks': bank_meta, 'state': state},
                        sort_keys=True, separators=(',', ':')).encode('utf-8')

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp_path, path)
    logger.debug(f"检查点已写入 {path}: {len(table)} 个数组, {offset} 字节")


def load_checkpoint(path):
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise DataFormatError(path, 0, f"无法读取检查点: {e}")

    if len(raw) < _PREAMBLE.size:
        raise DataFormatError(path, len(raw), "文件过短")
    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(path, 0, f"魔数错误 {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(path, 8, f"不支持的检查点版本 {version}")

    start = _PREAMBLE.size
    if len(raw) < start + header_len:
        raise DataFormatError(path, len(raw), "头部被截断")
    try:
        header = json_loads(raw[start:start + header_len].decode('utf-8'))
    except ValueError as e:
        raise DataFormatError(path, start, f"头部无法解析: {e}")

    body = start + header_len
    checkpoint = Checkpoint(state=header['state'], banks=header['banks'])
    for item in header['arrays']:
        begin = body + item['offset']
        end = begin + item['nbytes']
        if end > len(raw):
            raise DataFormatError(path, len(raw), f"数组 {item['name']} 被截断")
        array = np.frombuffer(raw, dtype=np.dtype(item['dtype']), count=int(np.prod(item['shape'], dtype=np.int64)),
                              offset=begin).reshape(item['shape'])
        checkpoint.arrays.setdefault(item['bank'], {})[item['name']] = array.astype(array.dtype.newbyteorder('='))
    for bank_id in checkpoint.banks:
        checkpoint.arrays.setdefault(bank_id, {})
    return checkpoint
