# 超图参数库模块：节点继承所需的共享参数存储、网络实例化与只读评估视图

import contextlib
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from evonas.exceptions import EvalGuardError, KeyShapeError, ShapeError
from evonas.genotype import (
    ALL_OPERATIONS,
    KERNEL_SIZES,
    PARAMETRIC_OPERATIONS,
    BlockRole,
    Operation,
    decode_topology,
)
from evonas.tensor_engine import (
    AttentionSpec,
    BatchNorm,
    Parameter,
    SgdState,
    Tensor,
    accuracy,
    add,
    concat,
    conv2d,
    depthwise_separable_conv,
    dropout,
    eca_kernel_size,
    fr_conv,
    global_avg_pool,
    he_normal,
    linear,
    no_grad,
    pool,
    relu,
    sgd_step,
    softmax_cross_entropy,
    subsample,
)
from evonas.utils import get_logger

logger = get_logger(__name__, 'supergraph.log')


# ---------------------------------------------------------------------------
# 参数键
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class NodeKey:
    """(块实例, 计算节点序号, 输入槽, 操作)；不含输入来源基因"""
    block_instance: int
    node_index: int
    edge_slot: int
    operation: int

    def __str__(self):
        return f"node/b{self.block_instance}/n{self.node_index}/s{self.edge_slot}/op{self.operation}"


@dataclass(frozen=True, order=True)
class ProjectionKey:
    """源节点的 1×1 投影，按输入深度区分"""
    block_instance: int
    source_slot: int
    depth: int

    def __str__(self):
        return f"proj/b{self.block_instance}/s{self.source_slot}/d{self.depth}"


@dataclass(frozen=True, order=True)
class HeadKey:
    """分类头：GAP 之后的线性层"""
    depth: int
    classes: int

    def __str__(self):
        return f"head/d{self.depth}/k{self.classes}"


BankKey = Union[NodeKey, ProjectionKey, HeadKey]


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: Tuple[int, ...]
    init: str                  # 'he' / 'zeros' / 'ones'
    fan_in: int = 1
    buffer: bool = False       # 非训练量（BN滑动统计）

    @property
    def decay(self):
        return self.init == 'he'


def _bn_specs(channels):
    return (
        TensorSpec('bn_gamma', (channels,), 'ones'),
        TensorSpec('bn_beta', (channels,), 'zeros'),
        TensorSpec('running_mean', (channels,), 'zeros', buffer=True),
        TensorSpec('running_var', (channels,), 'ones', buffer=True),
    )


def key_layout(key, channels):
    """键对应的全部张量形状；无参数操作返回空元组"""
    c = channels
    if isinstance(key, NodeKey):
        op = Operation(key.operation)
        if op not in PARAMETRIC_OPERATIONS:
            return ()
        k = KERNEL_SIZES[op]
        if op in (Operation.DW3, Operation.DW5):
            return (
                TensorSpec('dw_weight', (c, 1, k, k), 'he', fan_in=k * k),
                TensorSpec('dw_bias', (c,), 'zeros'),
                TensorSpec('pw_weight', (c, c, 1, 1), 'he', fan_in=c),
                TensorSpec('pw_bias', (c,), 'zeros'),
            ) + _bn_specs(c)
        theta = eca_kernel_size(c)
        return (
            TensorSpec('conv_weight', (c, c, k, k), 'he', fan_in=c * k * k),
            TensorSpec('conv_bias', (c,), 'zeros'),
            TensorSpec('attn_weight', (theta,), 'he', fan_in=theta),
            TensorSpec('attn_bias', (1,), 'zeros'),
        ) + _bn_specs(c)
    if isinstance(key, ProjectionKey):
        return (TensorSpec('weight', (c, key.depth, 1, 1), 'he', fan_in=key.depth),) + _bn_specs(c)
    if isinstance(key, HeadKey):
        return (
            TensorSpec('weight', (key.classes, key.depth), 'he', fan_in=key.depth),
            TensorSpec('bias', (key.classes,), 'zeros'),
        )
    raise TypeError(f"未知的键类型 {type(key).__name__}")


@dataclass
class ParamSet:
    """单个键下的参数与缓冲区"""
    key: BankKey
    params: Dict[str, Parameter] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def batch_norm(self):
        return BatchNorm(self.params['bn_gamma'], self.params['bn_beta'],
                         self.buffers['running_mean'], self.buffers['running_var'])

    def arrays(self):
        prefix = str(self.key)
        for name, param in self.params.items():
            yield f"{prefix}/{name}", param.data
        for name, buf in self.buffers.items():
            yield f"{prefix}/{name}", buf


# ---------------------------------------------------------------------------
# 参数库
# ---------------------------------------------------------------------------

class ParameterBank:
    """键 → 参数集合的持久存储，附带各参数的动量缓冲"""

    def __init__(self, channels, dtype='float32', seed=None):
        self.channels = channels
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.entries: Dict[BankKey, ParamSet] = {}
        self.velocity: Dict[str, np.ndarray] = {}
        self.step = 0
        self._lock = threading.Lock()
        self._frozen = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def get_or_init(self, key, layout=None):
        """返回已有条目（形状必须一致），否则按 He 初始化新建"""
        if layout is None:
            layout = key_layout(key, self.channels)
        existing = self.entries.get(key)
        if existing is not None:
            for spec in layout:
                store = existing.buffers if spec.buffer else existing.params
                current = store.get(spec.name)
                shape = None if current is None else current.shape
                if shape != spec.shape:
                    raise KeyShapeError(f"键 {key} 的 {spec.name} 形状 {shape} 与请求 {spec.shape} 不一致")
            return existing

        if self._frozen:
            raise EvalGuardError(f"参数库已冻结，不能创建新键 {key}")
        entry = ParamSet(key)
        for spec in layout:
            if spec.init == 'he':
                data = he_normal(self.rng, spec.shape, spec.fan_in, self.dtype)
            elif spec.init == 'ones':
                data = np.ones(spec.shape, dtype=self.dtype)
            else:
                data = np.zeros(spec.shape, dtype=self.dtype)
            if spec.buffer:
                entry.buffers[spec.name] = data
            else:
                param = Parameter(data, f"{key}/{spec.name}", decay=spec.decay)
                entry.params[spec.name] = param
                self.velocity[param.name] = np.zeros_like(data)
        self.entries[key] = entry
        return entry

    def named_arrays(self):
        """按名称排序的全部数组（参数、缓冲、动量）"""
        named = {}
        for entry in self.entries.values():
            named.update(entry.arrays())
        for name, v in self.velocity.items():
            named[f"velocity/{name}"] = v
        return dict(sorted(named.items()))

    def checksum(self):
        digest = hashlib.sha256()
        for name, array in self.named_arrays().items():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def load_arrays(self, arrays):
        """原地写入检查点中的数组；名称集合必须完全一致"""
        current = self.named_arrays()
        missing = set(current) - set(arrays)
        extra = set(arrays) - set(current)
        if missing or extra:
            raise KeyShapeError(f"检查点与参数库的键不一致: 缺少 {len(missing)} 个, 多出 {len(extra)} 个")
        for name, target in current.items():
            source = arrays[name]
            if source.shape != target.shape:
                raise KeyShapeError(f"{name} 形状 {source.shape} 与参数库 {target.shape} 不一致")
            np.copyto(target, source.astype(target.dtype, copy=False))

    def clone(self):
        """深拷贝所有数组与随机数状态"""
        twin = ParameterBank(self.channels, self.dtype)
        twin.rng.bit_generator.state = self.rng.bit_generator.state
        twin.step = self.step
        for key, entry in self.entries.items():
            copy = ParamSet(key)
            for name, param in entry.params.items():
                copy.params[name] = Parameter(param.data.copy(), param.name, decay=param.decay)
            for name, buf in entry.buffers.items():
                copy.buffers[name] = buf.copy()
            twin.entries[key] = copy
        twin.velocity = {name: v.copy() for name, v in self.velocity.items()}
        return twin

    def _set_writeable(self, flag):
        for array in self.named_arrays().values():
            array.flags.writeable = flag

    @property
    def is_frozen(self):
        return self._frozen > 0

    @contextlib.contextmanager
    def frozen(self):
        """只读上下文（可重入、可跨线程共享）"""
        with self._lock:
            if self._frozen == 0:
                self._set_writeable(False)
            self._frozen += 1
        try:
            yield self
        finally:
            with self._lock:
                self._frozen -= 1
                if self._frozen == 0:
                    self._set_writeable(True)


def get_or_init(bank, key, layout=None):
    return bank.get_or_init(key, layout)


def _depth_options(plan, n_c):
    """每个块实例每个源槽位可能出现的输入深度"""
    leaf_depths = tuple(m * plan.channels for m in range(1, n_c + 1))
    prev1 = prev2 = (plan.in_channels,)
    options = []
    for role in plan.roles:
        slots = (prev1,) if role.n_sources == 1 else (prev1, prev2)
        options.append(slots)
        prev2, prev1 = prev1, leaf_depths
    return options, leaf_depths


def all_keys(plan, n_c, classes, operations=ALL_OPERATIONS):
    """搜索空间中全部参数键（确定的创建顺序）"""
    parametric = [op for op in operations if op in PARAMETRIC_OPERATIONS]
    options, leaf_depths = _depth_options(plan, n_c)
    keys = []
    for instance, slots in enumerate(options):
        for slot, depths in enumerate(slots, 1):
            keys.extend(ProjectionKey(instance, slot, d) for d in sorted(set(depths)))
        for ordinal in range(1, n_c + 1):
            for edge_slot in (1, 2):
                keys.extend(NodeKey(instance, ordinal, edge_slot, int(op)) for op in parametric)
    keys.extend(HeadKey(d, classes) for d in leaf_depths)
    return keys


def expected_key_count(plan, n_c, classes, operations=ALL_OPERATIONS):
    parametric = sum(1 for op in operations if op in PARAMETRIC_OPERATIONS)
    options, leaf_depths = _depth_options(plan, n_c)
    projections = sum(len(set(depths)) for slots in options for depths in slots)
    return len(plan.roles) * n_c * 2 * parametric + projections + len(leaf_depths)


def populate(bank, plan, n_c, classes, operations=ALL_OPERATIONS):
    """搜索开始前一次性创建所有键"""
    for key in all_keys(plan, n_c, classes, operations):
        bank.get_or_init(key)
    logger.info(f"参数库初始化完成: {len(bank)} 个键, 通道数 {plan.channels}, N_c={n_c}")
    return bank


# ---------------------------------------------------------------------------
# 可执行网络
# ---------------------------------------------------------------------------

@dataclass
class _BlockBinding:
    projections: List[ParamSet]
    nodes: List[Tuple[Optional[ParamSet], Optional[ParamSet]]]


class ExecutableNetwork:
    """解码后的网络，参数全部引用参数库中的存储"""

    def __init__(self, chromosome, graph, bank, classes, dropout_rate=0.5):
        self.chromosome = chromosome
        self.graph = graph
        self.bank = bank
        self.classes = classes
        self.dropout_rate = dropout_rate
        self._bindings: List[_BlockBinding] = []
        self._keys: List[BankKey] = []

        for block in graph.blocks:
            projections = [
                self._bind(ProjectionKey(block.index, spec.slot, spec.shape[0]))
                for spec in block.sources
            ]
            nodes = []
            for node in block.nodes:
                slots = []
                for edge_slot, op in enumerate(node.operations, 1):
                    if Operation(op) in PARAMETRIC_OPERATIONS:
                        slots.append(self._bind(NodeKey(block.index, node.ordinal, edge_slot, op)))
                    else:
                        slots.append(None)
                nodes.append(tuple(slots))
            self._bindings.append(_BlockBinding(projections, nodes))

        self.head = self._bind(HeadKey(graph.output_shape[0], classes))

    def _bind(self, key):
        entry = self.bank.get_or_init(key)
        self._keys.append(key)
        return entry

    def bound_keys(self):
        return list(self._keys)

    def parameters(self):
        params = []
        for key in self._keys:
            params.extend(self.bank.entries[key].params.values())
        return params

    def parameter_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def _apply(self, op, x, entry, stride, training):
        op = Operation(op)
        if op is Operation.IDENTITY:
            return subsample(x, stride)
        if op in (Operation.AVG, Operation.MAX):
            kind = 'avg' if op is Operation.AVG else 'max'
            return pool(relu(x), kind, 3, stride)
        if op in (Operation.DW3, Operation.DW5):
            out = depthwise_separable_conv(
                x, entry['dw_weight'], entry['dw_bias'], entry['pw_weight'], entry['pw_bias'], stride)
            return relu(entry.batch_norm()(out, training))
        spec = AttentionSpec(self.graph.channels, entry['attn_weight'].shape[0])
        return fr_conv(x, entry['conv_weight'], entry['conv_bias'], entry.batch_norm(),
                       entry['attn_weight'], entry['attn_bias'], spec, stride, training)

    def forward(self, images, training=False, rng=None):
        """返回类别 logits；images 为 (N,C,H,W)"""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.bank.dtype))
        if x.shape[1:] != self.graph.input_shape:
            raise ShapeError(f"输入形状 {x.shape[1:]} 与网络输入 {self.graph.input_shape} 不一致")

        prev1 = prev2 = x
        for block, binding in zip(self.graph.blocks, self._bindings):
            raw = (prev1,) if block.role is BlockRole.FIRST else (prev1, prev2)
            states = {}
            for source, spec, entry in zip(raw, block.sources, binding.projections):
                projected = conv2d(source, entry['weight'], None, spec.stride)
                states[spec.slot] = entry.batch_norm()(projected, training)
            for node, entries in zip(block.nodes, binding.nodes):
                branches = [
                    self._apply(node.operations[i], states[node.inputs[i]], entries[i], node.strides[i], training)
                    for i in (0, 1)
                ]
                states[node.index] = add(branches[0], branches[1])
            prev2, prev1 = prev1, concat([states[leaf] for leaf in block.leaves])

        features = dropout(global_avg_pool(prev1), self.dropout_rate, training, rng)
        return linear(features, self.head['weight'], self.head['bias'])

    def train_step(self, images, labels, sgd: SgdState, rng=None):
        """一个小批量上的前向、损失、反向与 SGD 更新，只更新本网络绑定的参数"""
        if self.bank.is_frozen:
            raise EvalGuardError("参数库处于只读评估状态，禁止训练")
        params = self.parameters()
        for p in params:
            p.zero_grad()
        logits = self.forward(images, training=True, rng=rng)
        loss = softmax_cross_entropy(logits, labels)
        loss.backward()
        sgd.velocity = self.bank.velocity
        sgd_step(params, [p.grad for p in params], sgd)
        for p in params:
            p.zero_grad()
        self.bank.step += 1
        return loss.item(), accuracy(logits, labels)

    def predict(self, images, batch_size=256):
        with no_grad():
            outputs = [
                self.forward(images[i:i + batch_size], training=False).data.argmax(axis=1)
                for i in range(0, len(images), batch_size)
            ]
        return np.concatenate(outputs) if outputs else np.zeros(0, dtype=np.int64)

    def accuracy(self, images, labels, batch_size=256):
        if len(images) == 0:
            raise ShapeError("评估集为空")
        return float((self.predict(images, batch_size) == np.asarray(labels)).mean())


def instantiate(c, plan, bank, classes, dropout_rate=0.5):
    """解码染色体并把每个 (节点, 槽, 操作) 绑定到参数库条目"""
    graph = decode_topology(c, plan)
    return ExecutableNetwork(c, graph, bank, classes, dropout_rate)


class EvalView:
    """只读评估视图：BN 使用滑动统计，关闭 dropout，禁止任何参数更新"""

    def __init__(self, network):
        self._network = network

    @property
    def chromosome(self):
        return self._network.chromosome

    def parameters(self):
        return self._network.parameters()

    def forward(self, images):
        with self._network.bank.frozen(), no_grad():
            return self._network.forward(images, training=False)

    def predict(self, images, batch_size=256):
        with self._network.bank.frozen():
            return self._network.predict(images, batch_size)

    def accuracy(self, images, labels, batch_size=256):
        with self._network.bank.frozen():
            return self._network.accuracy(images, labels, batch_size)

    def train_step(self, *args, **kwargs):
        raise EvalGuardError("评估视图不允许训练或更新参数")

    def update(self, *args, **kwargs):
        raise EvalGuardError("评估视图不允许训练或更新参数")


def inherited_eval_guard(network):
    return EvalView(network)
