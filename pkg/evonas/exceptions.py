# 异常定义


class EvonasError(Exception):
    """所有搜索引擎异常的基类"""


class ConfigError(EvonasError):
    """配置错误，key 指出出错的配置项"""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"配置项 {key}: {message}")


class GenotypeError(EvonasError):
    """染色体非法或遗传操作无法执行"""


class ChromosomeParseError(GenotypeError):
    """染色体文本解析失败，带行列位置"""

    def __init__(self, line, column, message):
        self.line = line
        self.column = column
        super().__init__(f"第{line}行第{column}列: {message}")


class ShapeError(EvonasError):
    """特征图尺寸无法满足网络结构"""


class KeyShapeError(EvonasError):
    """参数库中已有键的形状不一致（键值设计错误）"""


class EvalGuardError(EvonasError):
    """在只读评估视图中尝试更新参数"""


class ModeError(EvonasError):
    """适应度评估模式不匹配"""


class DataError(EvonasError):
    """数据加载或划分错误"""


class DataFormatError(DataError):
    """二进制数据格式错误，offset 为出错的字节偏移"""

    def __init__(self, path, offset, message):
        self.path = path
        self.offset = offset
        super().__init__(f"{path} 偏移 {offset}: {message}")


class LabelRangeError(DataError):
    """标签超出类别范围"""


class StratificationError(DataError):
    """分层划分时某类样本不足"""


class SplitTagError(DataError):
    """数据集划分标签不符合用途"""


class EmptyDatasetError(DataError):
    """数据集为空"""
