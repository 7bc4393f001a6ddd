# 命令行入口：search / train-best / transfer / baseline / report / compare

import functools
import os
import sys
from datetime import datetime

import click

from evonas import __version__
from evonas.config import Config, load_config, render_config
from evonas.dataio import load_datasets
from evonas.evolution import (
    METRICS_COLUMNS,
    RNG_STREAMS,
    random_search_baseline,
    run_search,
    train_best_from_scratch,
    transfer_eval,
    write_epochs,
)
from evonas.exceptions import ConfigError, DataError, GenotypeError
from evonas.experiments import EXPERIMENTS
from evonas.genotype import load_chromosome, operation_space, save_chromosome, validate
from evonas.report import write_report
from evonas.utils import get_logger, write_json

logger = get_logger(__name__, 'cli.log')

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3
BASELINES = ('random', 'param-share')


def handle_errors(func):
    """把库异常映射为退出码：1 配置/染色体，2 数据，3 其他运行错误"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, GenotypeError) as e:
            logger.error(f"配置或染色体错误: {e}")
            click.echo(f"错误: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except DataError as e:
            logger.error(f"数据错误: {e}")
            click.echo(f"数据错误: {e}", err=True)
            sys.exit(EXIT_DATA)
        except (click.exceptions.Exit, click.ClickException, SystemExit):
            raise
        except Exception as e:
            logger.error(f"运行失败: {e}", exc_info=True)
            click.echo(f"运行失败: {e}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def _resolve_config(config_path, overrides, seed):
    cfg = load_config(config_path, overrides)
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    return cfg


def _run_dir(out, cfg, prefix):
    if out:
        path = out
    elif cfg.out_dir:
        path = cfg.out_dir
    else:
        path = os.path.join(Config.OUTPUT_DIR, f"{prefix}-{datetime.now().strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(run_dir, cfg, data, command, /, **paths):
    """运行清单：配置快照、种子、版本、数据指纹与输出路径；在任何计算之前写出"""
    manifest = {
        'command': command,
        'version': __version__,
        'created': datetime.now(),
        'config': cfg,
        'seeds': {'seed': cfg.seed, 'streams': list(RNG_STREAMS)},
        'datasets': data.fingerprints(),
        'paths': {name: os.path.abspath(p) for name, p in paths.items() if p},
        'metrics_schema': {'version': Config.METRICS_SCHEMA_VERSION, 'columns': list(METRICS_COLUMNS)},
    }
    write_json(os.path.join(run_dir, 'manifest.json'), manifest)
    with open(os.path.join(run_dir, 'config.cfg'), 'w', encoding='utf-8') as f:
        f.write(render_config(cfg))


def _load_valid_chromosome(path, cfg):
    try:
        chromosome = load_chromosome(path)
    except OSError as e:
        raise DataError(f"无法读取染色体文件 {path}: {e}")
    if chromosome.n_c != cfg.n_c:
        logger.info(f"染色体 N_c={chromosome.n_c} 与配置 N_c={cfg.n_c} 不同，以染色体为准")
    violations = validate(chromosome, operation_space(cfg.fr_enabled))
    if violations:
        raise GenotypeError("染色体非法:\n" + '\n'.join(f"  - {v}" for v in violations))
    return chromosome


def _common_options(func):
    func = click.option('--seed', type=int, default=None, help='覆盖配置中的随机种子')(func)
    func = click.option('--out', type=click.Path(file_okay=False), default=None, help='运行输出目录')(func)
    func = click.option('--set', 'overrides', multiple=True, help='覆盖配置项 key=value，可重复')(func)
    func = click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                        help='key = value 格式的配置文件')(func)
    return func


@click.group()
@click.version_option(__version__, prog_name='evonas')
def cli():
    """演化神经架构搜索引擎"""


@cli.command()
@_common_options
@click.option('--resume', type=click.Path(dir_okay=False), default=None, help='从检查点续跑')
@handle_errors
def search(config_path, overrides, out, seed, resume):
    """运行演化搜索"""
    cfg = _resolve_config(config_path, overrides, seed)
    if resume and not os.path.exists(resume):
        raise DataError(f"检查点不存在: {resume}")
    if resume and not out and not cfg.out_dir:
        out = os.path.dirname(os.path.abspath(resume))
    run_dir = _run_dir(out, cfg, 'search')
    data = load_datasets(cfg)

    best_path = os.path.join(run_dir, 'best_chromosome.txt')
    checkpoint_path = os.path.join(run_dir, 'checkpoint.bin')
    if not resume:
        write_manifest(run_dir, cfg, data, 'search', run_dir=run_dir,
                       metrics=os.path.join(run_dir, 'metrics.csv'),
                       checkpoint=checkpoint_path, best_chromosome=best_path)

    result = run_search(cfg, data, run_dir, resume=resume)
    save_chromosome(best_path, result.best.chromosome)
    click.echo(f"搜索完成: 最优适应度 {result.best.fitness:.4f}, 输出目录 {run_dir}")


@cli.command('train-best')
@click.argument('chromosome_path', type=click.Path(dir_okay=False))
@_common_options
@click.option('--epochs', type=int, default=None, help='覆盖 final_epochs')
@handle_errors
def train_best(chromosome_path, config_path, overrides, out, seed, epochs):
    """从头完整训练一条染色体并在测试集上评估"""
    cfg = _resolve_config(config_path, overrides, seed)
    chromosome = _load_valid_chromosome(chromosome_path, cfg)
    run_dir = _run_dir(out, cfg, 'train')
    data = load_datasets(cfg)
    write_manifest(run_dir, cfg, data, 'train-best', chromosome=chromosome_path,
                   epochs=os.path.join(run_dir, 'epochs.csv'))

    result = train_best_from_scratch(chromosome, cfg, data, epochs=epochs)
    write_epochs(os.path.join(run_dir, 'epochs.csv'), result.epochs)
    write_json(os.path.join(run_dir, 'final.json'), {
        'test_accuracy': result.test_accuracy,
        'epochs': len(result.epochs),
        'classes': result.classes,
        'parameters': result.network.parameter_count(),
    })
    click.echo(f"测试准确率 {result.test_accuracy:.4f}")


@cli.command()
@click.argument('chromosome_path', type=click.Path(dir_okay=False))
@_common_options
@click.option('--target-config', type=click.Path(dir_okay=False), default=None, help='目标数据集的配置文件')
@click.option('--target-set', 'target_overrides', multiple=True, help='目标数据集的覆盖项 key=value')
@click.option('--epochs', type=int, default=None, help='覆盖 final_epochs')
@handle_errors
def transfer(chromosome_path, config_path, overrides, out, seed, target_config, target_overrides, epochs):
    """把搜索到的结构迁移到另一个数据集"""
    cfg = _resolve_config(target_config or config_path, tuple(overrides) + tuple(target_overrides), seed)
    chromosome = _load_valid_chromosome(chromosome_path, cfg)
    run_dir = _run_dir(out, cfg, 'transfer')
    data = load_datasets(cfg)
    write_manifest(run_dir, cfg, data, 'transfer', chromosome=chromosome_path)

    result = transfer_eval(chromosome, cfg, data, epochs=epochs)
    write_epochs(os.path.join(run_dir, 'epochs.csv'), result.epochs)
    write_json(os.path.join(run_dir, 'transfer.json'), {
        'test_accuracy': result.test_accuracy,
        'classes': result.classes,
        'epochs': len(result.epochs),
    })
    click.echo(f"迁移完成: 类别数 {result.classes}, 测试准确率 {result.test_accuracy:.4f}")


@cli.command()
@click.argument('name')
@_common_options
@click.option('--budget', type=int, default=None, help='随机搜索的评估次数（默认 2·K·G）')
@handle_errors
def baseline(name, config_path, overrides, out, seed, budget):
    """对照实验：random（随机搜索）或 param-share（参数共享适应度）"""
    if name not in BASELINES:
        raise ConfigError('baseline', f"未知对照 {name!r}，可选 {', '.join(BASELINES)}")
    cfg = _resolve_config(config_path, overrides, seed)
    if name == 'param-share':
        cfg = cfg.with_overrides(fitness_mode='parameter-sharing')
    run_dir = _run_dir(out, cfg, f"baseline-{name}")
    data = load_datasets(cfg)
    best_path = os.path.join(run_dir, 'best_chromosome.txt')
    write_manifest(run_dir, cfg, data, f"baseline {name}", run_dir=run_dir,
                   metrics=os.path.join(run_dir, 'metrics.csv'), best_chromosome=best_path)

    if name == 'random':
        result = random_search_baseline(cfg, data, budget=budget, out_dir=run_dir)
    else:
        result = run_search(cfg, data, run_dir)
    save_chromosome(best_path, result.best.chromosome)
    click.echo(f"对照 {name} 完成: 最优适应度 {result.best.fitness:.4f}")


@cli.command()
@click.argument('run_dir', type=click.Path(file_okay=False))
@handle_errors
def report(run_dir):
    """汇总运行目录，生成摘要与适应度序列"""
    if not os.path.isdir(run_dir):
        raise DataError(f"运行目录不存在: {run_dir}")
    report_dir = write_report(run_dir)
    click.echo(f"报告已写入 {report_dir}")


@cli.command()
@click.argument('name')
@_common_options
@click.option('--seeds', default='0,1,2,3,4', help='逗号分隔的种子列表')
@click.option('--random-architectures', type=int, default=8, show_default=True,
              help='search-vs-random 额外从头训练的随机结构个数（0 表示跳过）')
@handle_errors
def compare(name, config_path, overrides, out, seed, seeds, random_architectures):
    """多种子对比实验：search-vs-random / fitness-modes / fr-ablation"""
    experiment = EXPERIMENTS.get(name)
    if experiment is None:
        raise ConfigError('compare', f"未知实验 {name!r}，可选 {', '.join(EXPERIMENTS)}")
    try:
        seed_list = [int(s) for s in seeds.split(',') if s.strip()]
    except ValueError:
        raise ConfigError('seeds', f"种子列表格式错误: {seeds!r}")
    if random_architectures < 0:
        raise ConfigError('random_architectures', f"必须 >= 0，得到 {random_architectures}")
    cfg = _resolve_config(config_path, overrides, seed)
    run_dir = _run_dir(out, cfg, f"compare-{name}")

    if name == 'search-vs-random':
        comparison = experiment(cfg, seed_list, random_architectures=random_architectures)
    else:
        comparison = experiment(cfg, seed_list)
    write_json(os.path.join(run_dir, 'comparison.json'), comparison.summary())
    click.echo(
        f"{name}: {comparison.first_label} {comparison.first_median:.4f} vs "
        f"{comparison.second_label} {comparison.second_median:.4f} "
        f"(胜出 {comparison.wins}/{len(comparison.outcomes)})")
    random_median = comparison.extra_median('random_architectures')
    if random_median is not None:
        click.echo(f"随机结构从头训练中位数 {random_median:.4f}")


def main(argv=None, standalone_mode=True):
    return cli.main(args=argv, prog_name='evonas', standalone_mode=standalone_mode)


def run(argv=None):
    """脚本入口：用法错误按配置错误处理，中断按运行错误处理（已完成的代保留在检查点中）"""
    try:
        result = main(argv, standalone_mode=False)
    except click.exceptions.Abort:
        logger.info("用户中断")
        return EXIT_RUNTIME
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    return result if isinstance(result, int) else 0
