# 命令行测试：运行目录产物与退出码

import json
import os

import pytest
from click.testing import CliRunner

from evonas import __version__
from evonas.cli import EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, cli, run
from evonas.config import load_config
from evonas.genotype import random_chromosome, render

TINY = [
    '--set', 'population=2',
    '--set', 'generations=1',
    '--set', 'n_c=2',
    '--set', 'channels=4',
    '--set', 'batch_size=16',
    '--set', 'synthetic_n=60',
    '--set', 'synthetic_test_n=30',
    '--set', 'synthetic_size=8',
    '--set', 'final_epochs=1',
    '--set', 'wall_clock=false',
]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def search_dir(runner, tmp_path):
    out = tmp_path / 'search'
    result = runner.invoke(cli, ['search', *TINY, '--out', str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_search_writes_run_directory(search_dir):
    for name in ('manifest.json', 'config.cfg', 'metrics.csv', 'best_chromosome.txt', 'checkpoint.bin'):
        assert (search_dir / name).exists(), name
    manifest = json.loads((search_dir / 'manifest.json').read_text(encoding='utf-8'))
    assert manifest['version'] == __version__
    assert manifest['config']['population'] == 2
    assert set(manifest['datasets']) == {'train', 'valid', 'test'}
    assert load_config(str(search_dir / 'config.cfg')).generations == 1


def test_report(runner, search_dir):
    result = runner.invoke(cli, ['report', str(search_dir)])
    assert result.exit_code == 0, result.output
    assert (search_dir / 'report' / 'summary.txt').exists()
    assert (search_dir / 'report' / 'fitness_series.csv').exists()


def test_report_missing_directory(runner, tmp_path):
    result = runner.invoke(cli, ['report', str(tmp_path / 'nope')])
    assert result.exit_code == EXIT_DATA


def test_missing_dataset_exits_with_data_error(runner, tmp_path):
    missing = str(tmp_path / 'train-images.idx')
    result = runner.invoke(cli, [
        'search', *TINY, '--out', str(tmp_path / 'out'),
        '--set', 'dataset=idx',
        '--set', f'train_images={missing}',
        '--set', f'train_labels={missing}',
    ])
    assert result.exit_code == EXIT_DATA
    assert missing in result.output


def test_unknown_config_key_exits_with_config_error(runner, tmp_path):
    result = runner.invoke(cli, ['search', '--set', 'populaton=2', '--out', str(tmp_path)])
    assert result.exit_code == EXIT_CONFIG


def test_train_best_rejects_unknown_operation(runner, tmp_path):
    path = tmp_path / 'bad.txt'
    path.write_text("first | 1,1,1,2 | 9,1,1,1\nnormal | 1,2,1,3 | 1,1,1,1\nreduction | 1,2,3,1 | 1,1,1,1\n",
                    encoding='utf-8')
    result = runner.invoke(cli, ['train-best', str(path), *TINY, '--out', str(tmp_path / 'out')])
    assert result.exit_code == EXIT_CONFIG
    assert "unknown operation id" in result.output


def test_train_best_missing_chromosome(runner, tmp_path):
    result = runner.invoke(cli, ['train-best', str(tmp_path / 'none.txt'), *TINY])
    assert result.exit_code == EXIT_DATA


def test_train_best_writes_results(runner, tmp_path):
    path = tmp_path / 'best.txt'
    path.write_text(render(random_chromosome(0, 2)), encoding='utf-8')
    out = tmp_path / 'final'
    result = runner.invoke(cli, ['train-best', str(path), *TINY, '--out', str(out), '--epochs', '0'])
    assert result.exit_code == 0, result.output
    final = json.loads((out / 'final.json').read_text(encoding='utf-8'))
    assert final['epochs'] == 0
    assert 0.0 <= final['test_accuracy'] <= 1.0
    assert (out / 'epochs.csv').exists()


def test_unknown_baseline(runner, tmp_path):
    result = runner.invoke(cli, ['baseline', 'grid', *TINY, '--out', str(tmp_path)])
    assert result.exit_code == EXIT_CONFIG


def test_random_baseline(runner, tmp_path):
    result = runner.invoke(cli, ['baseline', 'random', *TINY, '--budget', '2', '--out', str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert os.path.exists(tmp_path / 'best_chromosome.txt')


def test_unknown_experiment(runner, tmp_path):
    result = runner.invoke(cli, ['compare', 'everything', '--out', str(tmp_path)])
    assert result.exit_code == EXIT_CONFIG


def test_version(runner):
    result = runner.invoke(cli, ['--version'])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_search_resume_appends_generations(runner, search_dir):
    result = runner.invoke(cli, [
        'search', *TINY, '--set', 'generations=2',
        '--resume', str(search_dir / 'checkpoint.bin'), '--out', str(search_dir),
    ])
    assert result.exit_code == 0, result.output
    rows = (search_dir / 'metrics.csv').read_text(encoding='utf-8').splitlines()
    assert len(rows) == 3


def test_search_resume_missing_checkpoint(runner, tmp_path):
    result = runner.invoke(cli, ['search', *TINY, '--resume', str(tmp_path / 'none.bin'), '--out', str(tmp_path)])
    assert result.exit_code == EXIT_DATA


def test_transfer_writes_results(runner, tmp_path):
    path = tmp_path / 'best.txt'
    path.write_text(render(random_chromosome(0, 2)), encoding='utf-8')
    out = tmp_path / 'transfer'
    result = runner.invoke(cli, [
        'transfer', str(path), *TINY, '--out', str(out), '--epochs', '0',
        '--target-set', 'synthetic_classes=5', '--target-set', 'synthetic_n=100',
    ])
    assert result.exit_code == 0, result.output
    summary = json.loads((out / 'transfer.json').read_text(encoding='utf-8'))
    assert summary['classes'] == 5
    assert summary['epochs'] == 0


def test_compare_search_vs_random_trains_random_architectures(runner, tmp_path):
    result = runner.invoke(cli, [
        'compare', 'search-vs-random', *TINY, '--seeds', '0',
        '--random-architectures', '2', '--out', str(tmp_path),
    ])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / 'comparison.json').read_text(encoding='utf-8'))
    assert 0.0 <= summary['seeds'][0]['random_architectures'] <= 1.0
    assert summary['extra_medians']['random_architectures'] == summary['seeds'][0]['random_architectures']


def test_compare_rejects_negative_random_architectures(runner, tmp_path):
    result = runner.invoke(cli, ['compare', 'search-vs-random', '--random-architectures', '-1', '--out', str(tmp_path)])
    assert result.exit_code == EXIT_CONFIG


def test_compare_defaults_to_eight_random_architectures():
    option = next(p for p in cli.commands['compare'].params if p.name == 'random_architectures')
    assert option.default == 8


def test_batch_size_of_one_exits_with_config_error(runner, tmp_path):
    result = runner.invoke(cli, ['search', *TINY, '--set', 'batch_size=1', '--out', str(tmp_path / 'out')])
    assert result.exit_code == EXIT_CONFIG
    assert 'batch_size' in result.output
    assert not (tmp_path / 'out' / 'metrics.csv').exists()


def test_interrupted_search_exits_with_runtime_error(monkeypatch, tmp_path):
    def interrupted(*args, **kwargs):
        raise KeyboardInterrupt

    monkeypatch.setattr('evonas.cli.run_search', interrupted)
    assert run(['search', *TINY, '--out', str(tmp_path)]) == EXIT_RUNTIME


def test_usage_error_exits_with_config_error():
    assert run(['search', '--no-such-flag']) == EXIT_CONFIG
    assert run(['--version']) == 0
