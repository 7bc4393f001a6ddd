# 遗传算子测试：交叉、变异、锦标赛与精英保留

import numpy as np
import pytest

from evonas.exceptions import ConfigError, GenotypeError
from evonas.genotype import BlockGenotype, BlockRole, Chromosome, random_chromosome, validate
from evonas.variation import (
    Individual,
    VariationConfig,
    binary_tournament,
    compatible_node_pairs,
    environmental_selection,
    exchange_mutation,
    generate_offspring,
    one_point_crossover,
    swap_genes,
)


def _three_node_chromosome(first_nodes, ops):
    """N_c=3，只有 first 块的节点串不同，其余块固定"""
    return Chromosome(
        BlockGenotype(BlockRole.FIRST, tuple(first_nodes), tuple(ops)),
        BlockGenotype(BlockRole.NORMAL, (1, 2, 3, 1, 4, 2), (2, 3, 4, 5, 6, 7)),
        BlockGenotype(BlockRole.REDUCTION, (2, 1, 1, 3, 4, 3), (1, 2, 1, 2, 1, 2)),
    )


def test_worked_crossover_then_exchange():
    p1 = _three_node_chromosome((1, 1, 1, 2, 2, 3), (2, 2, 3, 3, 4, 4))
    p2 = _three_node_chromosome((1, 1, 2, 1, 1, 2), (5, 5, 6, 6, 7, 7))

    q1, q2 = one_point_crossover(p1, p2, cut=2)
    assert q1.first.node_string == (1, 1, 2, 1, 1, 2)
    assert q2.first.node_string == (1, 1, 1, 2, 2, 3)
    assert q1.first.operation_string == p2.first.operation_string
    assert q2.normal == p1.normal

    mutated = swap_genes(q2, 2, 4)
    assert mutated.first.node_string == (1, 1, 2, 2, 1, 3)
    assert mutated.genes()[5:] == q2.genes()[5:]
    for c in (q1, q2, mutated):
        assert not validate(c)


def test_crossover_takes_head_and_tail_from_each_parent():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p1 = random_chromosome(rng, 4)
        p2 = random_chromosome(rng, 4)
        g1, g2 = p1.genes(), p2.genes()
        cut = int(rng.integers(1, len(g1)))
        q1, q2 = one_point_crossover(p1, p2, cut)
        assert q1.genes() == g1[:cut] + g2[cut:]
        assert q2.genes() == g2[:cut] + g1[cut:]


@pytest.mark.parametrize('cut', [0, 48])
def test_crossover_rejects_non_interior_cut(cut):
    p1, p2 = random_chromosome(0, 4), random_chromosome(1, 4)
    with pytest.raises(GenotypeError):
        one_point_crossover(p1, p2, cut)


def test_crossover_rejects_different_node_counts():
    with pytest.raises(GenotypeError):
        one_point_crossover(random_chromosome(0, 3), random_chromosome(0, 4), 1)


def test_swap_rejects_mixed_kinds_and_illegal_references():
    c = _three_node_chromosome((1, 1, 1, 2, 2, 3), (2, 2, 3, 3, 4, 4))
    with pytest.raises(GenotypeError):
        swap_genes(c, 0, 6)
    # 位置1（节点2，只能引用1）换入值3
    with pytest.raises(GenotypeError):
        swap_genes(c, 1, 5)


def test_compatible_pairs_are_all_legal():
    c = random_chromosome(9, 5)
    pairs = compatible_node_pairs(c)
    assert pairs
    for i, j in pairs:
        assert not validate(swap_genes(c, i, j))


def test_mutation_changes_at_most_two_genes():
    rng = np.random.default_rng(4)
    for _ in range(500):
        c = random_chromosome(rng, 5)
        m = exchange_mutation(c, rng)
        changed = [k for k, (a, b) in enumerate(zip(c.genes(), m.genes())) if a != b]
        assert len(changed) in (0, 2)
        assert sorted(c.genes()) == sorted(m.genes())


def test_exchange_is_an_involution():
    rng = np.random.default_rng(12)
    for _ in range(50):
        c = random_chromosome(rng, 4)
        for i, j in compatible_node_pairs(c):
            assert swap_genes(swap_genes(c, i, j), i, j) == c
        m = exchange_mutation(c, rng)
        changed = [k for k, (a, b) in enumerate(zip(c.genes(), m.genes())) if a != b]
        if changed:
            assert swap_genes(m, *changed) == c


def test_swap_with_itself_is_identity():
    c = random_chromosome(13, 3)
    for i in range(len(c.genes())):
        assert swap_genes(c, i, i) == c


def test_variation_closure():
    rng = np.random.default_rng(5)
    for _ in range(10000):
        p1 = random_chromosome(rng, 5)
        p2 = random_chromosome(rng, 5)
        cut = int(rng.integers(1, len(p1.genes())))
        for q in one_point_crossover(p1, p2, cut):
            assert not validate(exchange_mutation(q, rng))


# ---------------------------------------------------------------------------
# 选择
# ---------------------------------------------------------------------------

def _population(rng, fitnesses, n_c=2):
    return [Individual(random_chromosome(rng, n_c), f, uid=i) for i, f in enumerate(fitnesses)]


def test_individual_fitness_range():
    with pytest.raises(GenotypeError):
        Individual(random_chromosome(0, 2), 1.5)


def test_variation_config_validates_probabilities():
    with pytest.raises(ConfigError):
        VariationConfig(p_c=1.2)


def test_binary_tournament_returns_fitter():
    pop = _population(np.random.default_rng(0), [0.2, 0.9])
    for seed in range(20):
        assert binary_tournament(pop, seed).uid == 1


def test_binary_tournament_picks_best_with_two_over_k():
    rng = np.random.default_rng(14)
    pop = _population(rng, np.linspace(0.0, 0.96, 25))
    trials = 20000
    wins = sum(binary_tournament(pop, rng).uid == 24 for _ in range(trials))
    assert wins / trials == pytest.approx(2 / 25, abs=0.01)


def test_binary_tournament_breaks_ties_uniformly():
    rng = np.random.default_rng(15)
    pop = _population(rng, [0.5] * 4)
    trials = 8000
    counts = np.bincount([binary_tournament(pop, rng).uid for _ in range(trials)], minlength=4)
    assert np.allclose(counts / trials, 0.25, atol=0.03)


def test_generate_offspring_without_variation_copies_parents():
    rng = np.random.default_rng(6)
    pop = _population(rng, [0.1, 0.5, 0.3, 0.8])
    offspring = generate_offspring(pop, VariationConfig(p_c=0.0, p_m=0.0), rng)
    parents = {ind.chromosome for ind in pop}
    assert len(offspring) == 4
    assert all(child in parents for child in offspring)


def test_generate_offspring_positions_come_from_parents():
    rng = np.random.default_rng(7)
    pop = _population(rng, [0.5, 0.5])
    offspring = generate_offspring(pop, VariationConfig(p_c=1.0, p_m=0.0), rng)
    g1, g2 = (ind.chromosome.genes() for ind in pop)
    for child in offspring:
        assert all(g in (a, b) for g, a, b in zip(child.genes(), g1, g2))


def test_generate_offspring_is_deterministic():
    pop = _population(np.random.default_rng(8), [0.1, 0.4, 0.7, 0.2])
    cfg = VariationConfig()
    assert generate_offspring(pop, cfg, 11) == generate_offspring(pop, cfg, 11)


def test_environmental_selection_keeps_best():
    rng = np.random.default_rng(9)
    chromosomes = [random_chromosome(rng, 2) for _ in range(8)]
    for trial in range(1000):
        fits = rng.random(8)
        pool = [Individual(c, f, uid=i) for i, (c, f) in enumerate(zip(chromosomes, fits))]
        selected, best, delta = environmental_selection(pool, 4, rng)
        uids = [ind.uid for ind in selected]
        assert len(uids) == 4 and len(set(uids)) == 4
        assert best.uid == int(np.argmax(fits))
        assert best.uid in uids
        assert delta == pytest.approx(fits.max())


def test_environmental_selection_single_survivor():
    rng = np.random.default_rng(10)
    pool = _population(rng, [0.3, 0.6])
    selected, best, _ = environmental_selection(pool, 1, rng)
    assert [ind.uid for ind in selected] == [1]
    assert best.uid == 1


def test_environmental_selection_pool_too_small():
    pool = _population(np.random.default_rng(0), [0.3, 0.6, 0.1])
    with pytest.raises(GenotypeError):
        environmental_selection(pool, 2, 0)
