# 搜索引擎配置文件

import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence, Tuple

from dotenv import load_dotenv

from evonas.exceptions import ConfigError

load_dotenv()

Schedule = Tuple[Tuple[int, float], ...]


class Config:
    # 日志配置
    LOG_DIR = os.environ.get('EVONAS_LOG_DIR') or os.path.join(os.path.dirname(os.path.dirname(__file__)), 'logs')
    LOG_LEVEL = os.environ.get('EVONAS_LOG_LEVEL') or 'INFO'
    LOG_MAX_BYTES = int(os.environ.get('EVONAS_LOG_MAX_BYTES') or 5 * 1024 * 1024)
    LOG_BACKUP_COUNT = int(os.environ.get('EVONAS_LOG_BACKUP_COUNT') or 5)

    # 输出与数据目录
    OUTPUT_DIR = os.environ.get('EVONAS_OUTPUT_DIR') or 'runs'
    DATA_DIR = os.environ.get('EVONAS_DATA_DIR') or 'data'

    # 搜索阶段学习率（以300代为基准）
    SEARCH_LR_BREAKPOINTS = ((0, 0.1), (150, 0.01), (225, 0.001))
    SEARCH_LR_HORIZON = 300

    # 最优个体重训练学习率（以500轮为基准）
    FINAL_LR_BREAKPOINTS = ((0, 0.05), (300, 0.005), (450, 0.0005))
    FINAL_LR_HORIZON = 500

    # 指标CSV的格式版本
    METRICS_SCHEMA_VERSION = 1


def _parse_int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(key, f"需要整数，得到 {text!r}")


def _parse_float(key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(key, f"需要浮点数，得到 {text!r}")


def _parse_bool(key, text):
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(key, f"需要布尔值，得到 {text!r}")


def _parse_str(key, text):
    return text.strip()


def _parse_optional_str(key, text):
    text = text.strip()
    return text or None


def parse_schedule(key, text):
    """解析 `0:0.1,150:0.01` 形式的分段学习率；`scaled` 表示按默认断点缩放"""
    text = text.strip()
    if text in ('', 'scaled'):
        return None
    entries = []
    for chunk in text.split(','):
        if ':' not in chunk:
            raise ConfigError(key, f"断点格式应为 step:lr，得到 {chunk!r}")
        step, lr = chunk.split(':', 1)
        entries.append((_parse_int(key, step.strip()), _parse_float(key, lr.strip())))
    return tuple(entries)


def format_schedule(schedule):
    if schedule is None:
        return 'scaled'
    return ','.join(f"{step}:{lr!r}" for step, lr in schedule)


def scale_schedule(breakpoints, horizon, target):
    """按比例缩放断点（向下取整），重复的断点保留较早的一项"""
    scaled = []
    seen = set()
    for step, lr in breakpoints:
        new_step = (step * target) // horizon
        if new_step in seen:
            continue
        seen.add(new_step)
        scaled.append((new_step, lr))
    return tuple(scaled)


def _opt(parser, formatter=str, **kwargs):
    return field(metadata={'parse': parser, 'format': formatter}, **kwargs)


def _fmt_bool(value):
    return 'true' if value else 'false'


def _fmt_optional(value):
    return '' if value is None else str(value)


@dataclass(frozen=True)
class SearchConfig:
    """一次搜索/训练运行的全部参数"""
    # 演化参数
    population: int = _opt(_parse_int, default=25)
    generations: int = _opt(_parse_int, default=300)
    n_c: int = _opt(_parse_int, default=5)
    p_c: float = _opt(_parse_float, repr, default=0.95)
    p_m: float = _opt(_parse_float, repr, default=0.05)
    fitness_mode: str = _opt(_parse_str, default='node-inheritance')
    fr_enabled: bool = _opt(_parse_bool, _fmt_bool, default=True)
    seed: int = _opt(_parse_int, default=0)

    # 网络与训练
    channels: int = _opt(_parse_int, default=32)
    batch_size: int = _opt(_parse_int, default=128)
    eval_batch_size: int = _opt(_parse_int, default=256)
    lr_schedule: Optional[Schedule] = _opt(parse_schedule, format_schedule, default=None)
    final_epochs: int = _opt(_parse_int, default=500)
    final_lr_schedule: Optional[Schedule] = _opt(parse_schedule, format_schedule, default=None)
    momentum: float = _opt(_parse_float, repr, default=0.9)
    nesterov: bool = _opt(_parse_bool, _fmt_bool, default=True)
    weight_decay: float = _opt(_parse_float, repr, default=1e-4)
    dropout: float = _opt(_parse_float, repr, default=0.5)
    augment: bool = _opt(_parse_bool, _fmt_bool, default=True)
    dtype: str = _opt(_parse_str, default='float32')

    # 数据
    dataset: str = _opt(_parse_str, default='synthetic')
    train_images: Optional[str] = _opt(_parse_optional_str, _fmt_optional, default=None)
    train_labels: Optional[str] = _opt(_parse_optional_str, _fmt_optional, default=None)
    test_images: Optional[str] = _opt(_parse_optional_str, _fmt_optional, default=None)
    test_labels: Optional[str] = _opt(_parse_optional_str, _fmt_optional, default=None)
    train_path: Optional[str] = _opt(_parse_optional_str, _fmt_optional, default=None)
    test_path: Optional[str] = _opt(_parse_optional_str, _fmt_optional, default=None)
    image_height: int = _opt(_parse_int, default=32)
    image_width: int = _opt(_parse_int, default=32)
    classes: int = _opt(_parse_int, default=10)
    synthetic_n: int = _opt(_parse_int, default=3000)
    synthetic_test_n: int = _opt(_parse_int, default=600)
    synthetic_classes: int = _opt(_parse_int, default=3)
    synthetic_size: int = _opt(_parse_int, default=16)
    synthetic_channels: int = _opt(_parse_int, default=1)

    # 运行
    eval_workers: int = _opt(_parse_int, default=1)
    wall_clock: bool = _opt(_parse_bool, _fmt_bool, default=True)
    out_dir: Optional[str] = _opt(_parse_optional_str, _fmt_optional, default=None)

    def __post_init__(self):
        self.validate()

    def validate(self):
        """检查配置不变量，出错时抛出 ConfigError"""
        if self.population < 2:
            raise ConfigError('population', "种群规模至少为2")
        if self.generations < 1:
            raise ConfigError('generations', "代数至少为1")
        if self.n_c < 1:
            raise ConfigError('n_c', "每个块至少需要1个计算节点")
        for key in ('p_c', 'p_m'):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(key, f"概率必须在[0,1]内，得到 {value}")
        # 训练态批归一化需要至少2个样本
        if self.batch_size < 2:
            raise ConfigError('batch_size', f"训练批大小至少为2，得到 {self.batch_size}")
        for key in ('channels', 'eval_batch_size', 'eval_workers'):
            if getattr(self, key) < 1:
                raise ConfigError(key, "必须为正整数")
        if self.final_epochs < 0:
            raise ConfigError('final_epochs', "不能为负数")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError('dropout', f"丢弃率必须在[0,1)内，得到 {self.dropout}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError('momentum', "动量必须在[0,1)内")
        if self.weight_decay < 0:
            raise ConfigError('weight_decay', "权重衰减不能为负数")
        if self.fitness_mode not in ('node-inheritance', 'parameter-sharing'):
            raise ConfigError('fitness_mode', f"未知模式 {self.fitness_mode!r}")
        if self.dataset not in ('synthetic', 'idx', 'rgb'):
            raise ConfigError('dataset', f"未知数据源 {self.dataset!r}")
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError('dtype', f"只支持 float32/float64，得到 {self.dtype!r}")
        if self.synthetic_classes < 2:
            raise ConfigError('synthetic_classes', "至少需要2个类别")
        if self.classes < 2:
            raise ConfigError('classes', "至少需要2个类别")
        _check_schedule('lr_schedule', self.lr_schedule, self.generations)
        _check_schedule('final_lr_schedule', self.final_lr_schedule, max(self.final_epochs, 1))

    def search_schedule(self):
        """搜索阶段的学习率断点"""
        if self.lr_schedule is not None:
            return self.lr_schedule
        return scale_schedule(Config.SEARCH_LR_BREAKPOINTS, Config.SEARCH_LR_HORIZON, self.generations)

    def final_schedule(self):
        """重训练阶段的学习率断点"""
        if self.final_lr_schedule is not None:
            return self.final_lr_schedule
        return scale_schedule(Config.FINAL_LR_BREAKPOINTS, Config.FINAL_LR_HORIZON, max(self.final_epochs, 1))

    def with_overrides(self, **changes):
        return replace(self, **changes)


def _check_schedule(key, schedule, horizon):
    if schedule is None:
        return
    if not schedule:
        raise ConfigError(key, "断点列表为空")
    if schedule[0][0] != 0:
        raise ConfigError(key, "第一个断点必须为0")
    previous = -1
    for step, lr in schedule:
        if step <= previous:
            raise ConfigError(key, "断点必须严格递增")
        if step >= horizon:
            raise ConfigError(key, f"断点 {step} 超出范围 [0, {horizon})")
        if lr <= 0:
            raise ConfigError(key, "学习率必须为正数")
        previous = step


_FIELDS = {f.name: f for f in fields(SearchConfig)}


def parse_config_text(text, source='<config>'):
    """解析扁平的 key = value 文本，返回原始字符串字典"""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(line, f"{source} 第{lineno}行缺少 '='")
        key, value = line.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def build_config(values, overrides: Sequence[str] = ()):
    """由字符串字典与 --set 覆盖项构造 SearchConfig"""
    merged = dict(values)
    for item in overrides:
        if '=' not in item:
            raise ConfigError(item, "覆盖项格式应为 key=value")
        key, value = item.split('=', 1)
        merged[key.strip()] = value.strip()

    kwargs = {}
    for key, text in merged.items():
        spec = _FIELDS.get(key)
        if spec is None:
            raise ConfigError(key, "未知配置项")
        kwargs[key] = spec.metadata['parse'](key, text)
    return SearchConfig(**kwargs)


def load_config(path, overrides: Sequence[str] = ()):
    """从文件加载配置"""
    if path is None:
        return build_config({}, overrides)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError('config', f"无法读取配置文件 {path}: {e}")
    return build_config(parse_config_text(text, source=path), overrides)


def render_config(cfg):
    """生成可重新加载的配置快照文本"""
    lines = ['# evonas 配置快照']
    for spec in fields(SearchConfig):
        value = getattr(cfg, spec.name)
        lines.append(f"{spec.name} = {spec.metadata['format'](value)}")
    return '\n'.join(lines) + '\n'
