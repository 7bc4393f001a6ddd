# 染色体编码模块：基因型-表现型映射、随机初始化、校验、文本格式与拓扑解码

import enum
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from evonas.exceptions import ChromosomeParseError, ConfigError, GenotypeError, ShapeError


class Operation(enum.IntEnum):
    """操作空间（基因编号 1..7）"""
    IDENTITY = 1
    DW3 = 2
    DW5 = 3
    FR3 = 4
    FR5 = 5
    AVG = 6
    MAX = 7

    @classmethod
    def parse(cls, value):
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise GenotypeError(f"未知操作编号 {value}")


ALL_OPERATIONS = tuple(Operation)
PARAMETRIC_OPERATIONS = (Operation.DW3, Operation.DW5, Operation.FR3, Operation.FR5)
KERNEL_SIZES = {
    Operation.DW3: 3,
    Operation.DW5: 5,
    Operation.FR3: 3,
    Operation.FR5: 5,
}


def operation_space(fr_enabled=True):
    """可用操作集合；关闭FR时去掉4和5"""
    if fr_enabled:
        return ALL_OPERATIONS
    return tuple(op for op in ALL_OPERATIONS if op not in (Operation.FR3, Operation.FR5))


class BlockRole(enum.Enum):
    FIRST = 'first'
    NORMAL = 'normal'
    REDUCTION = 'reduction'

    @property
    def n_sources(self):
        return 1 if self is BlockRole.FIRST else 2


BLOCK_ORDER = (BlockRole.FIRST, BlockRole.NORMAL, BlockRole.REDUCTION)


@dataclass(frozen=True)
class BlockGenotype:
    """单个块的基因：节点串 + 操作串，各 2·N_c 个基因"""
    role: BlockRole
    node_string: Tuple[int, ...]
    operation_string: Tuple[int, ...]

    @property
    def n_c(self):
        return len(self.node_string) // 2

    @property
    def n_sources(self):
        return self.role.n_sources

    def node_number(self, position):
        """节点串第 position 个基因（0起）所属计算节点的编号"""
        return self.n_sources + 1 + position // 2

    def computation_nodes(self):
        return range(self.n_sources + 1, self.n_sources + 1 + self.n_c)


def legal_inputs(role, position):
    """块内节点串某位置的合法输入：源节点与更早的计算节点"""
    return range(1, role.n_sources + 1 + position // 2)


@dataclass(frozen=True)
class Chromosome:
    first: BlockGenotype
    normal: BlockGenotype
    reduction: BlockGenotype

    @property
    def n_c(self):
        return self.first.n_c

    def blocks(self):
        return (self.first, self.normal, self.reduction)

    def block(self, role):
        return {
            BlockRole.FIRST: self.first,
            BlockRole.NORMAL: self.normal,
            BlockRole.REDUCTION: self.reduction,
        }[role]

    def genes(self):
        """扁平基因视图：各块依次为节点串、操作串"""
        flat = []
        for block in self.blocks():
            flat.extend(block.node_string)
            flat.extend(block.operation_string)
        return tuple(flat)

    @classmethod
    def from_genes(cls, genes, n_c):
        genes = tuple(int(g) for g in genes)
        width = 2 * n_c
        if len(genes) != 3 * 2 * width:
            raise GenotypeError(f"基因长度 {len(genes)} 与 N_c={n_c} 不符")
        blocks = []
        for i, role in enumerate(BLOCK_ORDER):
            start = i * 2 * width
            blocks.append(BlockGenotype(
                role,
                genes[start:start + width],
                genes[start + width:start + 2 * width],
            ))
        return cls(*blocks)


@dataclass(frozen=True)
class GeneSlot:
    """扁平基因位置的描述"""
    index: int
    role: BlockRole
    kind: str        # 'node' 或 'operation'
    position: int    # 在所属串中的位置（0起）


def gene_slot(index, n_c):
    width = 2 * n_c
    if not 0 <= index < 3 * 2 * width:
        raise GenotypeError(f"基因位置 {index} 越界")
    block_index, offset = divmod(index, 2 * width)
    kind = 'node' if offset < width else 'operation'
    return GeneSlot(index, BLOCK_ORDER[block_index], kind, offset % width)


def legal_values(index, n_c, operations=ALL_OPERATIONS):
    slot = gene_slot(index, n_c)
    if slot.kind == 'node':
        return tuple(legal_inputs(slot.role, slot.position))
    return tuple(int(op) for op in operations)


def random_chromosome(seed, n_c, operations=ALL_OPERATIONS):
    """随机初始化一条染色体；seed 可以是整数或 numpy Generator"""
    if n_c < 1:
        raise ConfigError('n_c', "每个块至少需要1个计算节点")
    rng = np.random.default_rng(seed)
    ops = np.array([int(op) for op in operations])
    blocks = []
    for role in BLOCK_ORDER:
        nodes, op_genes = [], []
        for k in range(n_c):
            # 节点空间：源节点 + 之前的计算节点
            upper = role.n_sources + k
            nodes.extend(int(v) for v in rng.integers(1, upper + 1, size=2))
            op_genes.extend(int(v) for v in rng.choice(ops, size=2))
        blocks.append(BlockGenotype(role, tuple(nodes), tuple(op_genes)))
    return Chromosome(*blocks)


@dataclass(frozen=True)
class Violation:
    block: str
    gene_index: int
    rule: str
    detail: str = ''

    def __str__(self):
        text = f"[{self.block}] 基因 {self.gene_index}: {self.rule}"
        return f"{text} ({self.detail})" if self.detail else text


def validate(c, operations=ALL_OPERATIONS):
    """校验染色体，返回违规列表（空列表表示合法）"""
    violations = []
    allowed = {int(op) for op in operations}
    n_c = c.first.n_c

    for expected, block in zip(BLOCK_ORDER, c.blocks()):
        name = expected.value
        if block.role is not expected:
            violations.append(Violation(name, 0, 'role mismatch', f"期望 {expected.value}"))
        if len(block.node_string) != len(block.operation_string):
            violations.append(Violation(name, 0, 'length mismatch', "节点串与操作串长度不同"))
        if len(block.node_string) % 2 or not block.node_string:
            violations.append(Violation(name, 0, 'length mismatch', "串长度必须为 2·N_c"))
        if block.n_c != n_c:
            violations.append(Violation(name, 0, 'n_c mismatch', f"{block.n_c} != {n_c}"))

        for position, gene in enumerate(block.node_string):
            node = expected.n_sources + 1 + position // 2
            if not isinstance(gene, (int, np.integer)) or gene < 1:
                violations.append(Violation(name, position, 'invalid input', f"值 {gene}"))
            elif gene >= node:
                violations.append(Violation(
                    name, position, 'forward reference', f"节点{node} 引用节点{gene}"))

        for position, gene in enumerate(block.operation_string):
            if gene not in range(1, 8):
                violations.append(Violation(name, position, 'unknown operation id', f"值 {gene}"))
            elif gene not in allowed:
                violations.append(Violation(name, position, 'operation not in space', f"值 {gene}"))
    return violations


def is_valid(c, operations=ALL_OPERATIONS):
    return not validate(c, operations)


# ---------------------------------------------------------------------------
# 文本格式：每块一行  role | node_string | operation_string
# ---------------------------------------------------------------------------

def render(c):
    lines = []
    for block in c.blocks():
        nodes = ','.join(str(g) for g in block.node_string)
        ops = ','.join(str(g) for g in block.operation_string)
        lines.append(f"{block.role.value} | {nodes} | {ops}")
    return '\n'.join(lines) + '\n'


_INT_TOKEN = re.compile(r'\d+')


def _parse_ints(text, lineno, column):
    values = []
    offset = 0
    for token in text.split(','):
        stripped = token.strip()
        lead = len(token) - len(token.lstrip())
        col = column + offset + lead
        if not _INT_TOKEN.fullmatch(stripped):
            raise ChromosomeParseError(lineno, col, f"需要非负整数，得到 {stripped!r}")
        values.append(int(stripped))
        offset += len(token) + 1
    return tuple(values)


def parse(text):
    """解析染色体文本；格式错误时抛出带行列号的 ChromosomeParseError"""
    if not text or not text.strip():
        raise ChromosomeParseError(1, 1, "空文本")

    blocks = []
    lineno = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith('#'):
            continue
        if len(blocks) == len(BLOCK_ORDER):
            raise ChromosomeParseError(lineno, 1, "多余的块定义")

        parts = line.split('|')
        if len(parts) != 3:
            raise ChromosomeParseError(lineno, len(line) + 1, "每行需要3个以'|'分隔的字段")

        columns = []
        offset = 0
        for part in parts:
            columns.append(offset + 1)
            offset += len(part) + 1

        role_text = parts[0].strip()
        expected = BLOCK_ORDER[len(blocks)]
        if role_text != expected.value:
            lead = len(parts[0]) - len(parts[0].lstrip())
            raise ChromosomeParseError(
                lineno, columns[0] + lead, f"期望块 {expected.value!r}，得到 {role_text!r}")

        nodes = _parse_ints(parts[1], lineno, columns[1])
        ops = _parse_ints(parts[2], lineno, columns[2])
        if len(nodes) != len(ops) or len(nodes) % 2:
            raise ChromosomeParseError(lineno, columns[2], "节点串与操作串长度必须相同且为偶数")
        if blocks and len(nodes) != len(blocks[0].node_string):
            raise ChromosomeParseError(lineno, columns[1], "各块的计算节点数必须一致")
        blocks.append(BlockGenotype(expected, nodes, ops))

    if len(blocks) != len(BLOCK_ORDER):
        raise ChromosomeParseError(lineno + 1, 1, f"需要3个块，只找到 {len(blocks)} 个")
    return Chromosome(*blocks)


def load_chromosome(path):
    with open(path, 'r', encoding='utf-8') as f:
        return parse(f.read())


def save_chromosome(path, c):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(render(c))


# ---------------------------------------------------------------------------
# 拓扑解码
# ---------------------------------------------------------------------------

DEFAULT_ROLES = (
    BlockRole.FIRST,
    BlockRole.NORMAL,
    BlockRole.REDUCTION,
    BlockRole.NORMAL,
    BlockRole.REDUCTION,
)


@dataclass(frozen=True)
class BlockPlan:
    """网络宏结构：块序列、输入形状与通道数 C"""
    in_channels: int
    height: int
    width: int
    channels: int
    roles: Tuple[BlockRole, ...] = DEFAULT_ROLES

    @classmethod
    def standard(cls, in_channels, height, width, channels):
        return cls(in_channels, height, width, channels)

    @property
    def input_shape(self):
        return (self.in_channels, self.height, self.width)


@dataclass(frozen=True)
class SourceSpec:
    slot: int
    shape: Tuple[int, int, int]
    stride: int      # 1×1投影的步长，使该源与 P_{i-1} 空间尺寸一致


@dataclass(frozen=True)
class GraphNode:
    block_instance: int
    index: int                      # 块内节点编号（源节点之后）
    ordinal: int                    # 第几个计算节点（1..N_c）
    inputs: Tuple[int, int]
    operations: Tuple[int, int]
    strides: Tuple[int, int]
    shape: Tuple[int, int, int]

    @property
    def node_key(self):
        return (self.block_instance, self.index)


@dataclass(frozen=True)
class BlockInstance:
    index: int
    role: BlockRole
    channels: int
    sources: Tuple[SourceSpec, ...]
    nodes: Tuple[GraphNode, ...]
    leaves: Tuple[int, ...]
    output_shape: Tuple[int, int, int]

    @property
    def input_size(self):
        return self.sources[0].shape[1:]


@dataclass(frozen=True)
class PhenotypeGraph:
    input_shape: Tuple[int, int, int]
    channels: int
    blocks: Tuple[BlockInstance, ...]

    @property
    def nodes(self):
        return tuple(node for block in self.blocks for node in block.nodes)

    @property
    def output_shape(self):
        return self.blocks[-1].output_shape


def _ceil_div(a, b):
    return -(-a // b)


def _projection_stride(instance, shape, target):
    _, h, w = shape
    th, tw = target
    stride = 1
    while stride <= max(h, w):
        if _ceil_div(h, stride) == th and _ceil_div(w, stride) == tw:
            return stride
        stride *= 2
    raise ShapeError(f"块实例 {instance}: 源尺寸 {h}x{w} 无法对齐到 {th}x{tw}")


def leaves_of(block):
    """叶节点：不被块内任何节点用作输入的计算节点"""
    consumed = set(block.node_string)
    return tuple(d for d in block.computation_nodes() if d not in consumed)


def decode_topology(c, plan):
    """把染色体按块计划解码为带形状推断的有向无环图"""
    problems = validate(c)
    if problems:
        raise GenotypeError("染色体非法: " + '; '.join(str(v) for v in problems))

    channels = plan.channels
    prev1 = plan.input_shape
    prev2 = plan.input_shape
    blocks = []
    for instance, role in enumerate(plan.roles):
        genotype = c.block(role)
        target = prev1[1:]
        source_shapes = [prev1] if role.n_sources == 1 else [prev1, prev2]
        sources = tuple(
            SourceSpec(slot, shape, _projection_stride(instance, shape, target))
            for slot, shape in enumerate(source_shapes, 1)
        )

        h, w = target
        if role is BlockRole.REDUCTION:
            if h < 2 or w < 2:
                raise ShapeError(f"块实例 {instance} ({role.value}): 输入 {h}x{w} 无法再缩小")
            h, w = _ceil_div(h, 2), _ceil_div(w, 2)

        nodes = []
        for k in range(genotype.n_c):
            index = role.n_sources + 1 + k
            inputs = (genotype.node_string[2 * k], genotype.node_string[2 * k + 1])
            ops = (genotype.operation_string[2 * k], genotype.operation_string[2 * k + 1])
            strides = tuple(
                2 if role is BlockRole.REDUCTION and src <= role.n_sources else 1
                for src in inputs
            )
            nodes.append(GraphNode(instance, index, k + 1, inputs, ops, strides, (channels, h, w)))

        leaves = leaves_of(genotype)
        output_shape = (len(leaves) * channels, h, w)
        blocks.append(BlockInstance(instance, role, channels, sources, tuple(nodes), leaves, output_shape))
        prev2, prev1 = prev1, output_shape

    return PhenotypeGraph(plan.input_shape, channels, tuple(blocks))
