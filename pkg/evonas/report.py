# 运行报告：汇总指标CSV，生成文本摘要与可绘图的适应度序列（不修改运行目录中的原有文件）

import csv
import os

from jinja2 import Environment, FileSystemLoader

from evonas.exceptions import DataError
from evonas.evolution import read_metrics
from evonas.utils import get_logger, json_loads

logger = get_logger(__name__, 'report.log')

TEMPLATE_DIR = os.path.join(os.path.dirname(__file__), 'templates')
SERIES_COLUMNS = ('generation', 'best_fitness', 'mean_fitness', 'best_so_far')


def pct(value):
    """把 [0,1] 内的小数格式化为百分比"""
    try:
        return f"{float(value) * 100:.2f}%"
    except (TypeError, ValueError):
        return "未知"


def _environment():
    env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), trim_blocks=True, lstrip_blocks=True,
                      keep_trailing_newline=True)
    env.filters['pct'] = pct
    return env


def _read_optional(path):
    if not os.path.exists(path):
        return None
    with open(path, 'r', encoding='utf-8') as f:
        return f.read()


def fitness_series(rows):
    """逐代最优/平均适应度及历史最优"""
    series = []
    best_so_far = 0.0
    for row in rows:
        best = float(row['best_fitness'])
        best_so_far = max(best_so_far, best)
        series.append({
            'generation': int(row['generation']),
            'best_fitness': best,
            'mean_fitness': float(row['mean_fitness']),
            'best_so_far': best_so_far,
        })
    return series


def write_report(run_dir):
    """在 run_dir/report/ 下写 summary.txt 与 fitness_series.csv，返回报告目录"""
    metrics_path = os.path.join(run_dir, 'metrics.csv')
    if not os.path.exists(metrics_path):
        raise DataError(f"运行目录中没有指标文件: {metrics_path}")
    rows = read_metrics(metrics_path)

    manifest_text = _read_optional(os.path.join(run_dir, 'manifest.json'))
    manifest = json_loads(manifest_text) if manifest_text else None
    chromosome = _read_optional(os.path.join(run_dir, 'best_chromosome.txt'))

    series = fitness_series(rows)
    report_dir = os.path.join(run_dir, 'report')
    os.makedirs(report_dir, exist_ok=True)

    with open(os.path.join(report_dir, 'fitness_series.csv'), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SERIES_COLUMNS)
        for point in series:
            writer.writerow([point['generation'], f"{point['best_fitness']:.6f}",
                             f"{point['mean_fitness']:.6f}", f"{point['best_so_far']:.6f}"])

    template = _environment().get_template('report.txt.j2')
    text = template.render(
        run_dir=os.path.abspath(run_dir),
        manifest=manifest,
        rows=rows,
        first_best=series[0]['best_fitness'] if series else 0.0,
        final_best=series[-1]['best_fitness'] if series else 0.0,
        chromosome=chromosome.strip() if chromosome else None,
    )
    with open(os.path.join(report_dir, 'summary.txt'), 'w', encoding='utf-8') as f:
        f.write(text)

    logger.info(f"报告已生成: {report_dir} ({len(rows)} 代)")
    return report_dir
