# 演化搜索编排：采样式小批量训练、适应度评估、节点继承下的后代生成、环境选择与基线

import contextlib
import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from evonas.checkpoint import load_checkpoint, save_checkpoint
from evonas.dataio import AugmentPolicy, BatchStream, Normalizer, Split, augment
from evonas.exceptions import EmptyDatasetError, ModeError
from evonas.genotype import BlockPlan, Chromosome, operation_space, parse, random_chromosome, render
from evonas.supergraph import ParameterBank, inherited_eval_guard, instantiate, populate
from evonas.tensor_engine import SgdState
from evonas.utils import Stopwatch, get_logger
from evonas.variation import Individual, VariationConfig, environmental_selection, generate_offspring

logger = get_logger(__name__, 'evolution.log')

RNG_STREAMS = ('init', 'sampler', 'variation', 'dropout', 'augment', 'bank', 'batches')
METRICS_COLUMNS = ('generation', 'best_fitness', 'mean_fitness', 'delta_best', 'lr', 'seconds',
                   'sampler_min', 'sampler_max')
EPOCH_COLUMNS = ('epoch', 'lr', 'loss', 'train_accuracy', 'seconds')

NODE_INHERITANCE = 'node-inheritance'
PARAMETER_SHARING = 'parameter-sharing'


def spawn_streams(seed, names=RNG_STREAMS):
    """由一个种子派生互相独立的命名随机数流"""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def sample_assignments(sampler, population_size, batches):
    """每个小批量均匀抽取一个个体下标"""
    if population_size < 1:
        raise EmptyDatasetError("没有可训练的个体")
    return sampler.integers(population_size, size=batches)


def lr_at(generation, schedule):
    """分段常数学习率查表"""
    lr = schedule[0][1]
    for step, value in schedule:
        if generation < step:
            break
        lr = value
    return lr


@dataclass
class GenerationReport:
    generation: int
    fitness: List[float]
    best_fitness: float
    mean_fitness: float
    delta_best: float
    lr: float
    seconds: float
    tally: List[int]
    loss: float = 0.0
    elite_uid: int = -1
    population_uids: List[int] = field(default_factory=list)
    best_chromosome: Optional[Chromosome] = None

    @property
    def sampler_min(self):
        return min(self.tally) if self.tally else 0

    @property
    def sampler_max(self):
        return max(self.tally) if self.tally else 0

    def csv_row(self):
        return [
            str(self.generation),
            f"{self.best_fitness:.6f}",
            f"{self.mean_fitness:.6f}",
            f"{self.delta_best:.6f}",
            f"{self.lr:.6f}",
            f"{self.seconds:.3f}",
            str(self.sampler_min),
            str(self.sampler_max),
        ]


@dataclass
class EpochRow:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float
    seconds: float

    def csv_row(self):
        return [str(self.epoch), f"{self.lr:.6f}", f"{self.loss:.6f}",
                f"{self.train_accuracy:.6f}", f"{self.seconds:.3f}"]


@dataclass
class SearchResult:
    best: Individual
    reports: List[GenerationReport]
    search: Optional['EvolutionarySearch'] = None


@dataclass
class FinalResult:
    network: object
    test_accuracy: float
    epochs: List[EpochRow]
    classes: int


# ---------------------------------------------------------------------------
# 指标CSV
# ---------------------------------------------------------------------------

def _write_rows(path, header, rows, mode):
    with open(path, mode, encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        if header:
            writer.writerow(header)
        writer.writerows(rows)


def start_metrics(path):
    _write_rows(path, METRICS_COLUMNS, [], 'w')


def append_metrics(path, report):
    _write_rows(path, None, [report.csv_row()], 'a')


def truncate_metrics(path, next_generation):
    """续跑时删除检查点之后（含）的行，使指标流不重不漏"""
    rows = []
    if os.path.exists(path):
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            next(reader, None)
            rows = [row for row in reader if row and int(row[0]) < next_generation]
    _write_rows(path, METRICS_COLUMNS, rows, 'w')
    return len(rows)


def read_metrics(path):
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# 搜索过程
# ---------------------------------------------------------------------------

class EvolutionarySearch:
    """持有配置、数据、参数库与随机数流的搜索状态机"""

    def __init__(self, cfg, data, seed=None):
        self.cfg = cfg
        self.data = data
        self.logger = logger
        self.seed = cfg.seed if seed is None else seed
        self.operations = operation_space(cfg.fr_enabled)
        in_channels, height, width = data.input_shape
        self.plan = BlockPlan.standard(in_channels, height, width, cfg.channels)
        self.schedule = cfg.search_schedule()
        self.variation = VariationConfig(cfg.p_c, cfg.p_m)
        self.rngs = spawn_streams(self.seed)

        self.bank = ParameterBank(cfg.channels, cfg.dtype, self.rngs['bank'])
        populate(self.bank, self.plan, cfg.n_c, data.classes, self.operations)
        self.private_banks: Dict[int, ParameterBank] = {}

        self.batches = BatchStream(data.train.require(Split.TRAIN), cfg.batch_size, self.rngs['batches'])
        self.augment_policy = AugmentPolicy() if cfg.augment else None
        valid = data.valid.require(Split.VALID)
        self.valid_images = data.normalizer.apply(valid.images)
        self.valid_labels = valid.labels

        self.population: List[Individual] = []
        self.generation = 0
        self.next_uid = 0
        self.reports: List[GenerationReport] = []

    @property
    def sharing(self):
        return self.cfg.fitness_mode == PARAMETER_SHARING

    def _new_individual(self, chromosome):
        ind = Individual(chromosome, uid=self.next_uid)
        self.next_uid += 1
        return ind

    def bank_for(self, ind):
        if self.sharing:
            return self.private_banks[ind.uid]
        return self.bank

    def initialize(self):
        """随机初始化 K 个父代"""
        rng = self.rngs['init']
        self.population = [
            self._new_individual(random_chromosome(rng, self.cfg.n_c, self.operations))
            for _ in range(self.cfg.population)
        ]
        if self.sharing:
            self.private_banks = {ind.uid: self.bank.clone() for ind in self.population}
        self.logger.info(f"初始化种群: K={len(self.population)}, 模式 {self.cfg.fitness_mode}, 参数库 {len(self.bank)} 个键")
        return self.population

    def network(self, ind):
        return instantiate(ind.chromosome, self.plan, self.bank_for(ind), self.data.classes, self.cfg.dropout)

    def sampled_train_generation(self, population, lr):
        """遍历一次训练集：每个小批量均匀抽一个个体，只训练它绑定的参数

        返回 (各个体被抽中的批次数, 平均损失)。
        """
        if not population:
            raise EmptyDatasetError("没有可训练的个体")
        sgd = SgdState(lr, self.cfg.momentum, self.cfg.nesterov, self.cfg.weight_decay)
        tally = [0] * len(population)
        networks = {}
        total_loss = 0.0
        draws = sample_assignments(self.rngs['sampler'], len(population), len(self.batches))

        for (images, labels), k in zip(self.batches, draws):
            k = int(k)
            tally[k] += 1
            net = networks.get(k)
            if net is None:
                net = networks[k] = self.network(population[k])
            x = augment(images, self.augment_policy, self.data.normalizer, self.rngs['augment'], training=True)
            loss, _ = net.train_step(x, labels, sgd, self.rngs['dropout'])
            total_loss += loss

        batches = sum(tally)
        if batches == 0:
            raise EmptyDatasetError("训练集没有产生任何小批量")
        return tally, total_loss / batches

    def evaluate_population(self, individuals):
        """在验证集上用只读视图计算每个个体的准确率"""
        if len(self.valid_labels) == 0:
            raise EmptyDatasetError("验证集为空")
        views = [inherited_eval_guard(self.network(ind)) for ind in individuals]
        batch_size = self.cfg.eval_batch_size

        def evaluate(view):
            return view.accuracy(self.valid_images, self.valid_labels, batch_size)

        banks = {id(self.bank_for(ind)): self.bank_for(ind) for ind in individuals}
        with contextlib.ExitStack() as stack:
            for bank in banks.values():
                stack.enter_context(bank.frozen())
            if self.cfg.eval_workers > 1 and len(views) > 1:
                with ThreadPoolExecutor(max_workers=self.cfg.eval_workers) as pool:
                    scores = list(pool.map(evaluate, views))
            else:
                scores = [evaluate(view) for view in views]

        for ind, score in zip(individuals, scores):
            ind.set_fitness(score)
        return scores

    def parameter_sharing_eval(self, offspring, best_parent=None):
        """对照模式：后代复制最优父代的私有权重后评估"""
        if not self.sharing:
            raise ModeError(f"当前模式为 {self.cfg.fitness_mode}，不能使用参数共享评估")
        if best_parent is None:
            best_parent = max(self.population, key=lambda ind: ind.fitness)
        source = self.private_banks[best_parent.uid]
        for child in offspring:
            self.private_banks[child.uid] = source.clone()
        return self.evaluate_population(offspring)

    def step(self):
        """执行一代：训练父代、评估、生成并评估后代、环境选择"""
        t = self.generation
        watch = Stopwatch(self.cfg.wall_clock)
        lr = lr_at(t, self.schedule)
        K = self.cfg.population

        self.logger.info(f"============== 第 {t + 1}/{self.cfg.generations} 代开始 ==============")
        tally, loss = self.sampled_train_generation(self.population, lr)
        self.evaluate_population(self.population)

        children = generate_offspring(self.population, self.variation, self.rngs['variation'])
        offspring = [self._new_individual(c) for c in children]
        if self.sharing:
            self.parameter_sharing_eval(offspring)
        else:
            self.evaluate_population(offspring)

        pool = self.population + offspring
        selected, p_best, delta_best = environmental_selection(pool, K, self.rngs['variation'])
        self.population = selected
        if self.sharing:
            self.private_banks = {ind.uid: self.private_banks[ind.uid] for ind in selected}

        fitness = [ind.fitness for ind in selected]
        report = GenerationReport(
            generation=t,
            fitness=fitness,
            best_fitness=max(fitness),
            mean_fitness=float(np.mean(fitness)),
            delta_best=delta_best,
            lr=lr,
            seconds=watch.elapsed(),
            tally=tally,
            loss=loss,
            elite_uid=p_best.uid,
            population_uids=[ind.uid for ind in selected],
            best_chromosome=p_best.chromosome,
        )
        self.reports.append(report)
        self.generation += 1
        self.logger.info(
            f"第 {t + 1} 代完成: 最优 {report.best_fitness:.4f}, 平均 {report.mean_fitness:.4f}, "
            f"学习率 {lr}, 损失 {loss:.4f}, 抽样 {report.sampler_min}-{report.sampler_max}, 耗时 {report.seconds:.1f} 秒")
        return report

    def best(self):
        return max(self.population, key=lambda ind: -1.0 if ind.fitness is None else ind.fitness)

    # -- 检查点 ------------------------------------------------------------

    def state(self):
        return {
            'generation': self.generation,
            'next_uid': self.next_uid,
            'mode': self.cfg.fitness_mode,
            'seed': self.seed,
            'population': [
                {'chromosome': render(ind.chromosome), 'fitness': ind.fitness, 'uid': ind.uid}
                for ind in self.population
            ],
            'rng': {name: gen.bit_generator.state for name, gen in sorted(self.rngs.items())},
        }

    def banks(self):
        if self.sharing:
            return {f"uid{uid}": bank for uid, bank in self.private_banks.items()}
        return {'shared': self.bank}

    def save_checkpoint(self, path):
        save_checkpoint(path, self.banks(), self.state())

    def restore(self, checkpoint):
        """从检查点恢复全部可变状态"""
        state = checkpoint.state
        if state['mode'] != self.cfg.fitness_mode:
            raise ModeError(f"检查点模式 {state['mode']} 与配置 {self.cfg.fitness_mode} 不一致")
        self.generation = state['generation']
        self.next_uid = state['next_uid']
        self.population = [
            Individual(parse(item['chromosome']), item['fitness'], item['uid'])
            for item in state['population']
        ]
        for name, gen in self.rngs.items():
            gen.bit_generator.state = state['rng'][name]
        if self.sharing:
            template = self.bank
            self.private_banks = {
                ind.uid: checkpoint.build_bank(f"uid{ind.uid}", template) for ind in self.population
            }
        else:
            checkpoint.restore_bank('shared', self.bank)
        self.logger.info(f"已从检查点恢复: 下一代 {self.generation}, 种群 {len(self.population)}")


def run_search(cfg, data, out_dir=None, resume=None, on_generation: Optional[Callable] = None):
    """完整搜索；每代结束后先写指标行再写检查点"""
    search = EvolutionarySearch(cfg, data)
    metrics_path = os.path.join(out_dir, 'metrics.csv') if out_dir else None
    checkpoint_path = os.path.join(out_dir, 'checkpoint.bin') if out_dir else None

    if resume:
        search.restore(load_checkpoint(resume))
        if metrics_path:
            kept = truncate_metrics(metrics_path, search.generation)
            logger.info(f"指标文件保留 {kept} 行")
    else:
        search.initialize()
        if metrics_path:
            start_metrics(metrics_path)
            search.save_checkpoint(checkpoint_path)

    try:
        while search.generation < cfg.generations:
            report = search.step()
            if metrics_path:
                append_metrics(metrics_path, report)
                search.save_checkpoint(checkpoint_path)
            if on_generation is not None:
                on_generation(report)
    except BaseException:
        if checkpoint_path:
            logger.error(f"搜索在第 {search.generation} 代中断，最近的检查点: {checkpoint_path}", exc_info=True)
        raise

    best = search.best()
    logger.info(f"搜索完成: 最优适应度 {best.fitness:.4f}")
    return SearchResult(best, search.reports, search)


def random_search_baseline(cfg, data, budget=None, out_dir=None, seed=None):
    """随机搜索对照：每轮 2K 个随机染色体，按同样的采样方式训练共享参数库后评估"""
    search = EvolutionarySearch(cfg, data, seed)
    K = cfg.population
    budget = 2 * K * cfg.generations if budget is None else budget
    if budget < 1:
        raise ModeError("评估预算至少为1")
    metrics_path = os.path.join(out_dir, 'metrics.csv') if out_dir else None
    if metrics_path:
        start_metrics(metrics_path)

    best = None
    evaluated = 0
    round_index = 0
    reports = []
    while evaluated < budget:
        watch = Stopwatch(cfg.wall_clock)
        count = min(2 * K, budget - evaluated)
        candidates = [
            search._new_individual(random_chromosome(search.rngs['init'], cfg.n_c, search.operations))
            for _ in range(count)
        ]
        lr = lr_at(round_index, search.schedule)
        tally, loss = search.sampled_train_generation(candidates, lr)
        scores = search.evaluate_population(candidates)
        evaluated += count

        round_best = max(candidates, key=lambda ind: ind.fitness)
        if best is None or round_best.fitness > best.fitness:
            best = round_best
        report = GenerationReport(
            generation=round_index,
            fitness=scores,
            best_fitness=best.fitness,
            mean_fitness=float(np.mean(scores)),
            delta_best=round_best.fitness,
            lr=lr,
            seconds=watch.elapsed(),
            tally=tally,
            loss=loss,
            elite_uid=best.uid,
            best_chromosome=best.chromosome,
        )
        reports.append(report)
        if metrics_path:
            append_metrics(metrics_path, report)
        logger.info(f"随机搜索第 {round_index + 1} 轮: 已评估 {evaluated}/{budget}, 当前最优 {best.fitness:.4f}")
        round_index += 1

    return SearchResult(best, reports, search)


def train_best_from_scratch(chromosome, cfg, data, seed=None, epochs=None, on_epoch=None):
    """用全新参数库在训练集∪验证集上完整训练，返回测试准确率与逐轮记录"""
    seed = cfg.seed if seed is None else seed
    epochs = cfg.final_epochs if epochs is None else epochs
    rngs = spawn_streams([seed, 1], ('bank', 'batches', 'augment', 'dropout'))
    in_channels, height, width = data.input_shape
    plan = BlockPlan.standard(in_channels, height, width, cfg.channels)

    bank = ParameterBank(cfg.channels, cfg.dtype, rngs['bank'])
    network = instantiate(chromosome, plan, bank, data.classes, cfg.dropout)
    train = data.train_full
    normalizer = Normalizer.fit(train)
    stream = BatchStream(train, cfg.batch_size, rngs['batches'])
    policy = AugmentPolicy() if cfg.augment else None
    schedule = cfg.final_schedule()
    logger.info(f"开始重训练: {epochs} 轮, 参数量 {network.parameter_count()}, 训练样本 {len(train)}")

    rows = []
    for epoch in range(epochs):
        watch = Stopwatch(cfg.wall_clock)
        lr = lr_at(epoch, schedule)
        sgd = SgdState(lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
        loss_sum = acc_sum = 0.0
        seen = 0
        for images, labels in stream:
            x = augment(images, policy, normalizer, rngs['augment'], training=True)
            loss, acc = network.train_step(x, labels, sgd, rngs['dropout'])
            loss_sum += loss * len(labels)
            acc_sum += acc * len(labels)
            seen += len(labels)
        row = EpochRow(epoch, lr, loss_sum / seen, acc_sum / seen, watch.elapsed())
        rows.append(row)
        logger.info(f"第 {epoch + 1}/{epochs} 轮: 损失 {row.loss:.4f}, 训练准确率 {row.train_accuracy:.4f}")
        if on_epoch is not None:
            on_epoch(row)

    test = data.test.require(Split.TEST)
    view = inherited_eval_guard(network)
    test_accuracy = view.accuracy(normalizer.apply(test.images), test.labels, cfg.eval_batch_size)
    logger.info(f"重训练完成: 测试准确率 {test_accuracy:.4f}")
    return FinalResult(network, test_accuracy, rows, data.classes)


def transfer_eval(chromosome, cfg, target_data, seed=None, epochs=None):
    """把固定结构迁移到另一数据集：分类头按目标类别数重建后从头训练"""
    logger.info(f"迁移评估: 目标类别数 {target_data.classes}, 输入 {target_data.input_shape}")
    return train_best_from_scratch(chromosome, cfg, target_data, seed, epochs)


def write_epochs(path, rows):
    _write_rows(path, EPOCH_COLUMNS, [row.csv_row() for row in rows], 'w')
