# 对比实验：演化搜索 vs 随机搜索、节点继承 vs 参数共享、FR操作消融

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from evonas.dataio import load_datasets
from evonas.evolution import random_search_baseline, run_search, train_best_from_scratch
from evonas.genotype import operation_space, random_chromosome
from evonas.utils import get_logger

logger = get_logger(__name__, 'experiments.log')


@dataclass
class SeedOutcome:
    seed: int
    first: float
    second: float
    extra: dict = field(default_factory=dict)

    @property
    def difference(self):
        return self.first - self.second


@dataclass
class Comparison:
    """两种设置在多个种子上的成对结果"""
    name: str
    first_label: str
    second_label: str
    outcomes: List[SeedOutcome]
    ci: Tuple[float, float] = (0.0, 0.0)

    @property
    def first_median(self):
        return float(np.median([o.first for o in self.outcomes]))

    @property
    def second_median(self):
        return float(np.median([o.second for o in self.outcomes]))

    @property
    def median_difference(self):
        return float(np.median([o.difference for o in self.outcomes]))

    @property
    def wins(self):
        return sum(1 for o in self.outcomes if o.first > o.second)

    def extra_median(self, key):
        values = [o.extra[key] for o in self.outcomes if key in o.extra]
        return float(np.median(values)) if values else None

    def _extra_keys(self):
        return list(dict.fromkeys(k for o in self.outcomes for k in o.extra))

    def summary(self):
        return {
            'name': self.name,
            'first': self.first_label,
            'second': self.second_label,
            'first_median': self.first_median,
            'second_median': self.second_median,
            'median_difference': self.median_difference,
            'ci': list(self.ci),
            'wins': self.wins,
            'extra_medians': {key: self.extra_median(key) for key in self._extra_keys()},
            'seeds': [
                {'seed': o.seed, self.first_label: o.first, self.second_label: o.second, **o.extra}
                for o in self.outcomes
            ],
        }


def bootstrap_median_ci(values, n_resamples=2000, alpha=0.05, seed=0):
    """中位数的百分位自助法置信区间"""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    samples = rng.choice(values, size=(n_resamples, len(values)), replace=True)
    medians = np.median(samples, axis=1)
    low, high = np.quantile(medians, [alpha / 2, 1 - alpha / 2])
    return float(low), float(high)


def _finish(name, first_label, second_label, outcomes):
    comparison = Comparison(name, first_label, second_label, outcomes)
    comparison.ci = bootstrap_median_ci([o.difference for o in outcomes])
    logger.info(
        f"对比 {name}: {first_label} 中位数 {comparison.first_median:.4f}, "
        f"{second_label} 中位数 {comparison.second_median:.4f}, "
        f"差值置信区间 [{comparison.ci[0]:.4f}, {comparison.ci[1]:.4f}], 胜出 {comparison.wins}/{len(outcomes)}")
    return comparison


def random_architectures_from_scratch(cfg, data, count=8, seed=None, epochs=None):
    """随机结构从头训练的平均测试准确率"""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 2])
    operations = operation_space(cfg.fr_enabled)
    scores = []
    for i in range(count):
        chromosome = random_chromosome(rng, cfg.n_c, operations)
        scores.append(train_best_from_scratch(chromosome, cfg, data, seed + i, epochs).test_accuracy)
    return float(np.mean(scores))


def compare_search_vs_random(cfg, seeds: Sequence[int], final_epochs: Optional[int] = None,
                             random_architectures: int = 8):
    """等评估预算下演化搜索与随机搜索的最终测试准确率，另记随机结构从头训练的平均准确率"""
    outcomes = []
    for seed in seeds:
        run_cfg = cfg.with_overrides(seed=seed)
        data = load_datasets(run_cfg)
        searched = run_search(run_cfg, data)
        baseline = random_search_baseline(run_cfg, data)
        first = train_best_from_scratch(searched.best.chromosome, run_cfg, data, epochs=final_epochs)
        second = train_best_from_scratch(baseline.best.chromosome, run_cfg, data, epochs=final_epochs)
        extra = {'search_fitness': searched.best.fitness, 'random_fitness': baseline.best.fitness}
        if random_architectures:
            extra['random_architectures'] = random_architectures_from_scratch(
                run_cfg, data, random_architectures, seed, final_epochs)
        outcomes.append(SeedOutcome(seed, first.test_accuracy, second.test_accuracy, extra))
    comparison = _finish('search-vs-random', 'search', 'random', outcomes)
    if random_architectures:
        logger.info(f"随机结构 x{random_architectures} 从头训练中位数 {comparison.extra_median('random_architectures'):.4f}")
    return comparison


def compare_fitness_modes(cfg, seeds: Sequence[int]):
    """节点继承与参数共享两种适应度估计方式的最终最优适应度"""
    outcomes = []
    for seed in seeds:
        run_cfg = cfg.with_overrides(seed=seed)
        data = load_datasets(run_cfg)
        inherited = run_search(run_cfg.with_overrides(fitness_mode='node-inheritance'), data)
        shared = run_search(run_cfg.with_overrides(fitness_mode='parameter-sharing'), data)
        outcomes.append(SeedOutcome(seed, inherited.best.fitness, shared.best.fitness))
    return _finish('fitness-modes', 'node-inheritance', 'parameter-sharing', outcomes)


def compare_fr_ablation(cfg, seeds: Sequence[int]):
    """操作空间包含/去掉 FR 操作时的最终最优适应度"""
    outcomes = []
    for seed in seeds:
        run_cfg = cfg.with_overrides(seed=seed)
        data = load_datasets(run_cfg)
        with_fr = run_search(run_cfg.with_overrides(fr_enabled=True), data)
        without_fr = run_search(run_cfg.with_overrides(fr_enabled=False), data)
        outcomes.append(SeedOutcome(seed, with_fr.best.fitness, without_fr.best.fitness))
    return _finish('fr-ablation', 'fr', 'no-fr', outcomes)


EXPERIMENTS = {
    'search-vs-random': compare_search_vs_random,
    'fitness-modes': compare_fitness_modes,
    'fr-ablation': compare_fr_ablation,
}
