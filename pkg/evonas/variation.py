# 遗传算子模块：单点交叉、交换变异、二元锦标赛与带精英保留的环境选择

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from evonas.exceptions import ConfigError, GenotypeError
from evonas.genotype import Chromosome, gene_slot, legal_inputs


@dataclass
class Individual:
    """个体：染色体 + 缓存的适应度（验证集准确率）"""
    chromosome: Chromosome
    fitness: Optional[float] = None
    uid: int = -1

    def __post_init__(self):
        if self.fitness is not None:
            self.set_fitness(self.fitness)

    def set_fitness(self, value):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise GenotypeError(f"适应度必须在[0,1]内，得到 {value}")
        self.fitness = value


@dataclass(frozen=True)
class VariationConfig:
    p_c: float = 0.95
    p_m: float = 0.05

    def __post_init__(self):
        for key in ('p_c', 'p_m'):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(key, f"概率必须在[0,1]内，得到 {value}")


def one_point_crossover(p1, p2, cut):
    """在扁平基因序列的 cut 处交换尾部，返回两个后代"""
    if p1.n_c != p2.n_c:
        raise GenotypeError(f"父代计算节点数不同: {p1.n_c} != {p2.n_c}")
    g1, g2 = p1.genes(), p2.genes()
    if not 0 < cut < len(g1):
        raise GenotypeError(f"交叉点 {cut} 不在内部位置 (1..{len(g1) - 1})")
    q1 = Chromosome.from_genes(g1[:cut] + g2[cut:], p1.n_c)
    q2 = Chromosome.from_genes(g2[:cut] + g1[cut:], p1.n_c)
    return q1, q2


def _node_value_fits(slot, value):
    return value in legal_inputs(slot.role, slot.position)


def swap_genes(c, i, j):
    """交换扁平基因视图中的两个位置"""
    genes = list(c.genes())
    si, sj = gene_slot(i, c.n_c), gene_slot(j, c.n_c)
    if si.kind != sj.kind:
        raise GenotypeError(f"不能交换节点基因与操作基因 ({i}, {j})")
    if si.kind == 'node':
        if not (_node_value_fits(si, genes[j]) and _node_value_fits(sj, genes[i])):
            raise GenotypeError(f"交换 ({i}, {j}) 会产生非法的输入引用")
    genes[i], genes[j] = genes[j], genes[i]
    return Chromosome.from_genes(genes, c.n_c)


def compatible_node_pairs(c):
    """所有可合法交换的节点基因位置对"""
    genes = c.genes()
    slots = [gene_slot(i, c.n_c) for i in range(len(genes))]
    node_positions = [s for s in slots if s.kind == 'node']
    pairs = []
    for a in range(len(node_positions)):
        sa = node_positions[a]
        for b in range(a + 1, len(node_positions)):
            sb = node_positions[b]
            if _node_value_fits(sa, genes[sb.index]) and _node_value_fits(sb, genes[sa.index]):
                pairs.append((sa.index, sb.index))
    return pairs


def _operation_swap(c, rng):
    positions = [i for i in range(len(c.genes())) if gene_slot(i, c.n_c).kind == 'operation']
    i, j = rng.choice(positions, size=2, replace=False)
    return swap_genes(c, int(i), int(j))


def exchange_mutation(c, rng):
    """交换变异：等概率交换两个操作基因或一对位置兼容的节点基因"""
    rng = np.random.default_rng(rng)
    if rng.random() < 0.5:
        return _operation_swap(c, rng)
    pairs = compatible_node_pairs(c)
    if not pairs:
        return _operation_swap(c, rng)
    i, j = pairs[int(rng.integers(len(pairs)))]
    return swap_genes(c, i, j)


def _fitness_vector(pop):
    fits = []
    for ind in pop:
        if ind.fitness is None:
            raise GenotypeError("个体适应度未设置")
        fits.append(ind.fitness)
    return fits


def _tournament(fits, rng):
    a, b = rng.choice(len(fits), size=2, replace=False)
    a, b = int(a), int(b)
    if fits[a] > fits[b]:
        return a
    if fits[b] > fits[a]:
        return b
    return a if rng.random() < 0.5 else b


def binary_tournament(pop, rng):
    """二元锦标赛：不放回地随机抽两个，返回适应度更高者（平局随机）"""
    if len(pop) < 2:
        raise GenotypeError("锦标赛至少需要2个个体")
    fits = _fitness_vector(pop)
    return pop[_tournament(fits, np.random.default_rng(rng))]


def generate_offspring(population, cfg, rng):
    """按交叉概率与变异概率生成与父代同样规模的后代染色体"""
    rng = np.random.default_rng(rng)
    fits = _fitness_vector(population)
    if len(population) < 2:
        raise GenotypeError("生成后代至少需要2个父代")
    size = len(population)
    gene_count = len(population[0].chromosome.genes())

    offspring: List[Chromosome] = []
    while len(offspring) < size:
        p1 = population[_tournament(fits, rng)].chromosome
        p2 = population[_tournament(fits, rng)].chromosome
        gamma = 1.0 - rng.random()
        if gamma < cfg.p_c:
            cut = int(rng.integers(1, gene_count))
            q1, q2 = one_point_crossover(p1, p2, cut)
        else:
            q1, q2 = p1, p2
        offspring.extend((q1, q2))
    offspring = offspring[:size]

    for i, child in enumerate(offspring):
        gamma = 1.0 - rng.random()
        if gamma < cfg.p_m:
            offspring[i] = exchange_mutation(child, rng)
    return offspring


def environmental_selection(pool, size, rng):
    """从合并种群中用锦标赛选出 size 个不重复个体，并保证最优个体存活

    返回 (selected, p_best, delta_best)。
    """
    rng = np.random.default_rng(rng)
    if size < 1 or 2 * size > len(pool):
        raise GenotypeError(f"环境选择需要 2·K <= |R|，得到 K={size}, |R|={len(pool)}")
    fits = _fitness_vector(pool)

    chosen = []
    taken = set()
    while len(chosen) < size:
        winner = _tournament(fits, rng)
        if winner in taken:
            continue
        taken.add(winner)
        chosen.append(winner)

    best = int(np.argmax(fits))
    if best not in taken:
        worst_slot = min(range(size), key=lambda k: fits[chosen[k]])
        chosen[worst_slot] = best

    return [pool[i] for i in chosen], pool[best], fits[best]
