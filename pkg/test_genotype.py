# 染色体编码测试：随机初始化、校验、文本格式与拓扑解码

import numpy as np
import pytest

from evonas.exceptions import ChromosomeParseError, ConfigError, GenotypeError, ShapeError
from evonas.genotype import (
    BlockGenotype,
    BlockPlan,
    BlockRole,
    Chromosome,
    Operation,
    decode_topology,
    gene_slot,
    legal_inputs,
    legal_values,
    operation_space,
    parse,
    random_chromosome,
    render,
    validate,
)


def _chromosome(first_nodes, first_ops, normal_nodes, normal_ops, reduction_nodes, reduction_ops):
    return Chromosome(
        BlockGenotype(BlockRole.FIRST, tuple(first_nodes), tuple(first_ops)),
        BlockGenotype(BlockRole.NORMAL, tuple(normal_nodes), tuple(normal_ops)),
        BlockGenotype(BlockRole.REDUCTION, tuple(reduction_nodes), tuple(reduction_ops)),
    )


def test_random_chromosomes_are_valid():
    rng = np.random.default_rng(0)
    for _ in range(10000):
        c = random_chromosome(rng, 5)
        assert not validate(c)
        assert c.n_c == 5


def test_random_chromosome_is_seed_deterministic():
    assert random_chromosome(7, 4) == random_chromosome(7, 4)


def test_random_chromosome_respects_operation_space():
    ops = operation_space(fr_enabled=False)
    c = random_chromosome(3, 5, ops)
    used = {g for block in c.blocks() for g in block.operation_string}
    assert not used & {Operation.FR3, Operation.FR5}


def test_random_chromosome_requires_nodes():
    with pytest.raises(ConfigError):
        random_chromosome(0, 0)


def test_legal_inputs():
    assert list(legal_inputs(BlockRole.FIRST, 0)) == [1]
    assert list(legal_inputs(BlockRole.FIRST, 3)) == [1, 2]
    assert list(legal_inputs(BlockRole.NORMAL, 0)) == [1, 2]
    assert list(legal_inputs(BlockRole.REDUCTION, 5)) == [1, 2, 3, 4]


def test_validate_reports_forward_reference_and_unknown_operation():
    c = _chromosome((1, 2, 1, 1), (1, 9, 1, 1), (1, 2, 1, 2), (1, 1, 1, 1), (1, 1, 2, 3), (7, 7, 7, 7))
    rules = {v.rule for v in validate(c)}
    assert rules == {'forward reference', 'unknown operation id'}


def test_validate_reports_operation_outside_space():
    c = _chromosome((1, 1, 1, 2), (4, 1, 1, 1), (1, 2, 1, 3), (1, 1, 1, 1), (1, 2, 3, 1), (1, 1, 1, 1))
    assert is_rule(validate(c, operation_space(False)), 'operation not in space')
    assert not validate(c)


def is_rule(violations, rule):
    return any(v.rule == rule for v in violations)


def test_flat_gene_view_round_trip():
    c = random_chromosome(11, 3)
    genes = c.genes()
    assert len(genes) == 3 * 2 * 2 * 3
    assert Chromosome.from_genes(genes, 3) == c


def test_gene_slot_and_legal_values():
    slot = gene_slot(2, 3)
    assert (slot.role, slot.kind, slot.position) == (BlockRole.FIRST, 'node', 2)
    assert gene_slot(6, 3).kind == 'operation'
    assert gene_slot(12, 3).role is BlockRole.NORMAL
    assert legal_values(2, 3) == (1, 2)
    assert legal_values(6, 3) == tuple(range(1, 8))
    with pytest.raises(GenotypeError):
        gene_slot(36, 3)


# ---------------------------------------------------------------------------
# 文本格式
# ---------------------------------------------------------------------------

def test_render_parse_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(10000):
        c = random_chromosome(rng, 5)
        assert parse(render(c)) == c


def test_worked_normal_block_validates_and_renders():
    # normal 块节点3的两个输入都来自节点1，操作为 DW5 与 MAX
    c = Chromosome(
        BlockGenotype(BlockRole.FIRST, (1, 1, 1, 2, 3, 1), (1, 1, 1, 1, 1, 1)),
        BlockGenotype(BlockRole.NORMAL, (1, 1, 2, 3, 1, 4), (3, 7, 1, 2, 6, 4)),
        BlockGenotype(BlockRole.REDUCTION, (1, 2, 3, 1, 4, 2), (2, 2, 2, 2, 2, 2)),
    )
    assert validate(c) == []
    normal_line = render(c).splitlines()[1]
    assert normal_line == 'normal | 1,1,2,3,1,4 | 3,7,1,2,6,4'
    _, nodes, ops = (part.strip() for part in normal_line.split('|'))
    assert nodes.startswith('1,1') and ops.startswith('3,7')


def test_parse_skips_comments_and_blank_lines():
    c = random_chromosome(1, 2)
    text = "# 最优个体\n\n" + render(c)
    assert parse(text) == c


def test_parse_reports_line_and_column():
    text = "first | 1,x | 1,2\n"
    with pytest.raises(ChromosomeParseError) as info:
        parse(text)
    assert (info.value.line, info.value.column) == (1, 11)


def test_parse_empty_text():
    with pytest.raises(ChromosomeParseError) as info:
        parse("   \n")
    assert (info.value.line, info.value.column) == (1, 1)


def test_parse_wrong_block_order():
    with pytest.raises(ChromosomeParseError) as info:
        parse("normal | 1,1 | 1,1\n")
    assert info.value.line == 1


def test_parse_missing_block():
    text = "first | 1,1 | 1,1\nnormal | 1,2 | 1,1\n"
    with pytest.raises(ChromosomeParseError) as info:
        parse(text)
    assert info.value.line == 3


# ---------------------------------------------------------------------------
# 拓扑解码
# ---------------------------------------------------------------------------

def _brute_force_leaves(block):
    used = set()
    for g in block.node_string:
        used.add(g)
    total = block.n_sources + block.n_c
    return [d for d in range(block.n_sources + 1, total + 1) if d not in used]


def test_decode_shape_laws_on_random_genotypes():
    rng = np.random.default_rng(2)
    plan = BlockPlan.standard(1, 16, 16, 8)
    for _ in range(1000):
        c = random_chromosome(rng, 4)
        graph = decode_topology(c, plan)
        for instance in graph.blocks:
            genotype = c.block(instance.role)
            assert instance.output_shape[0] == len(_brute_force_leaves(genotype)) * 8
        assert graph.output_shape[1:] == (4, 4)
        assert [b.output_shape[1] for b in graph.blocks] == [16, 16, 8, 8, 4]


def test_decode_reduction_strides():
    c = _chromosome((1, 1, 1, 2), (1, 1, 1, 1), (1, 2, 3, 1), (1, 1, 1, 1), (1, 2, 3, 1), (2, 6, 7, 1))
    graph = decode_topology(c, BlockPlan.standard(3, 8, 8, 4))
    reduction = graph.blocks[2]
    assert reduction.role is BlockRole.REDUCTION
    assert reduction.nodes[0].strides == (2, 2)
    assert reduction.nodes[1].strides == (1, 2)
    # 第二个源分辨率更高，投影步长为2
    assert graph.blocks[3].sources[1].stride == 2


def test_decode_rejects_invalid_chromosome():
    c = _chromosome((1, 2, 1, 1), (1, 1, 1, 1), (1, 2, 1, 2), (1, 1, 1, 1), (1, 2, 1, 2), (1, 1, 1, 1))
    with pytest.raises(GenotypeError):
        decode_topology(c, BlockPlan.standard(1, 8, 8, 4))


def test_decode_rejects_reduction_of_single_pixel():
    c = random_chromosome(0, 2)
    with pytest.raises(ShapeError) as info:
        decode_topology(c, BlockPlan.standard(1, 1, 1, 4))
    assert '2' in str(info.value)
