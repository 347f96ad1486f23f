"""
    lgd 命令行：gen / distill / eval / suite / inspect

    退出码：0 成功，1 实验套件部分单元失败，2 配置或参数错误、文件缺失，3 数值异常中止
"""
import functools
import json
import logging
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import LgdError, NumericAbort
from app.core.log import setup_logging
from app.core.run_config import PRESETS, load_run_config
from app.lgd import dataio
from app.lgd.evaluation import EvalSplit
from app.lgd.numerics import l2_normalize_rows, matmul
from app.lgd.runner import RESOLVED_CONFIG, evaluate_checkpoint, load_resolved_config, run_distillation
from app.lgd.suite import SUITES, run_suite
from app.lgd.synthworld import WorldParams, gen_text_anchors, gen_world

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

LOSS_CHOICES = ["standard", "generalized", "baseline_seed", "naive_textual"]


def exit_codes(func):
    """把引擎异常映射为稳定的退出码"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except NumericAbort as e:
            click.echo(f"数值异常中止: {e}", err=True)
            path = getattr(e, "diagnostic_path", None)
            if path:
                click.echo(f"诊断快照: {path}", err=True)
            raise SystemExit(EXIT_NUMERIC)
        except (LgdError, ValidationError, FileNotFoundError, json.JSONDecodeError) as e:
            click.echo(f"错误: {e}", err=True)
            raise SystemExit(EXIT_USAGE)

    return wrapper


def _overrides(seed, out, loss, text_subset, preset) -> dict:
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["output_dir"] = out
    if loss is not None:
        overrides["loss"] = {"mode": loss}
    if text_subset is not None:
        overrides["tsb"] = {"subset": dataio.read_names(text_subset)}
    if preset is not None:
        overrides["preset"] = preset
    return overrides


def _echo_json(data):
    click.echo(json.dumps(data, ensure_ascii=False, indent=2))


@click.group()
@click.option("--log-level", default=None, help="日志级别，默认取 LGD_LOG_LEVEL")
def cli(log_level):
    """Language-Guided Distillation 引擎"""
    setup_logging(log_level or settings.LGD_LOG_LEVEL)


@cli.command()
@click.option("--C", "num_categories", type=int, default=16, show_default=True, help="类别数")
@click.option("--D", "dim", type=int, default=16, show_default=True, help="教师/学生特征维度")
@click.option("--input-dim", type=int, default=32, show_default=True)
@click.option("--text-dim", type=int, default=None, help="文本锚点维度，默认等于D")
@click.option("--sigma-sample", type=float, default=0.15, show_default=True)
@click.option("--sigma-text", type=float, default=0.1, show_default=True)
@click.option("--min-angle", type=float, default=30.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--eval-samples", type=int, default=0, help="大于0时预先抽取评估划分")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@exit_codes
def gen(num_categories, dim, input_dim, text_dim, sigma_sample, sigma_text, min_angle, seed, eval_samples, out):
    """生成合成世界：world.json、TSB嵌入文件与类别名清单"""
    params = WorldParams(num_categories=num_categories, dim=dim, input_dim=input_dim, text_dim=text_dim,
                         sample_noise_sigma=sigma_sample, text_offset_sigma=sigma_text, min_angle_deg=min_angle,
                         seed=seed)
    world = gen_world(params)
    out = Path(out or Path(settings.LGD_OUTPUT_PATH) / f"world_seed{seed}")
    out.mkdir(parents=True, exist_ok=True)
    dataio.atomic_write_text(out / "world.json", json.dumps(world.to_spec(), ensure_ascii=False, indent=2,
                                                           sort_keys=True))
    dataio.save_tsb(out / "tsb.lgde", out / "tsb.names.txt", gen_text_anchors(world))
    if eval_samples > 0:
        split = EvalSplit.from_world(world, eval_samples, seed)
        dataio.write_embeddings(out / "eval_inputs.lgde", split.inputs)
        dataio.write_embeddings(out / "eval_teacher.lgde", split.teacher)
        dataio.write_embeddings(out / "eval_labels.lgde", split.labels.reshape(-1, 1).astype(np.float64))
    click.echo(str(out))


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="RunConfig JSON")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--loss", type=click.Choice(LOSS_CHOICES), default=None)
@click.option("--text-subset", type=click.Path(dir_okay=False), default=None, help="类别名清单，训练前截取TSB")
@click.option("--resume", type=click.Path(file_okay=False), default=None, help="检查点目录")
@click.option("--max-steps", type=int, default=None)
@exit_codes
def distill(config_path, preset, seed, out, loss, text_subset, resume, max_steps):
    """执行一次蒸馏运行"""
    if config_path is not None and not Path(config_path).exists():
        raise FileNotFoundError(f"配置文件不存在: {config_path}")
    config = load_run_config(config_path, **_overrides(seed, out, loss, text_subset, preset))
    setup_logging(settings.LGD_LOG_LEVEL, log_file=Path(config.output_dir) / "run.log")
    result = run_distillation(config, resume_from=resume, max_steps=max_steps)
    summary = {"output_dir": str(result.output_dir), "steps": result.artifacts.step}
    if result.final is not None:
        summary["zeroshot_accuracy"] = result.final.zeroshot_accuracy
        summary["linear_probe_accuracy"] = result.final.linear_probe_accuracy
    _echo_json(summary)


@cli.command(name="eval")
@click.argument("checkpoint", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help=f"默认使用检查点上级目录中的 {RESOLVED_CONFIG}")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="报告输出路径")
@click.option("--no-probe", is_flag=True, default=False)
@exit_codes
def eval_command(checkpoint, config_path, out, no_probe):
    """评估检查点：零样本、线性探测与对齐诊断"""
    checkpoint = Path(checkpoint)
    config_path = Path(config_path) if config_path else checkpoint.parent / RESOLVED_CONFIG
    if not config_path.exists():
        raise FileNotFoundError(f"找不到运行配置: {config_path}")
    report = evaluate_checkpoint(load_resolved_config(config_path), checkpoint, with_probe=not no_probe)
    text = report.model_dump_json(indent=2)
    dataio.atomic_write_text(Path(out) if out else checkpoint / "eval.json", text)
    click.echo(text)


@cli.command()
@click.argument("name", type=click.Choice(SUITES))
@click.option("--seeds", type=int, default=5, show_default=True, help="seed数量，使用 0..N-1")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--text-subset", type=click.Path(dir_okay=False), default=None, help="text_control 的子任务类别")
@click.option("--contrast", type=click.Choice(["full", "foreign"]), default="foreign", show_default=True)
@click.option("--threads", type=int, default=None, help="并行线程数，默认 LGD_THREADS")
@exit_codes
def suite(name, seeds, config_path, preset, out, text_subset, contrast, threads):
    """运行实验套件，写出 results.csv 与 summary.txt"""
    if config_path is not None and not Path(config_path).exists():
        raise FileNotFoundError(f"配置文件不存在: {config_path}")
    out = out or str(Path(settings.LGD_OUTPUT_PATH) / f"suite_{name}")
    config = load_run_config(config_path, **_overrides(None, out, None, None, preset))
    subset = dataio.read_names(text_subset) if text_subset else None
    result = run_suite(name, config, list(range(seeds)), output_dir=out, subset=subset, contrast=contrast,
                       max_workers=threads)
    click.echo((result.output_dir / "summary.txt").read_text(encoding="utf-8"))
    if not result.ok:
        raise SystemExit(EXIT_PARTIAL)


def _nearest_table(anchors: np.ndarray, names) -> list:
    unit, _ = l2_normalize_rows(anchors.T)
    cos = matmul(unit, unit.T)
    np.fill_diagonal(cos, -np.inf)
    nearest = np.argmax(cos, axis=1)
    return [{"name": n, "nearest": names[j], "cosine": float(cos[i, j])} for i, (n, j) in
            enumerate(zip(names, nearest))]


def _describe_bank(anchors: np.ndarray, names, initialized=None) -> dict:
    norms = np.linalg.norm(anchors, axis=0)
    info = {"shape": list(anchors.shape), "num_categories": anchors.shape[1], "dim": anchors.shape[0],
            "norms": {"min": float(norms.min()), "max": float(norms.max())}, "names": list(names)}
    if initialized is not None:
        info["initialized_count"] = int(np.sum(initialized))
    info["nearest_anchor"] = _nearest_table(anchors, list(names)) if anchors.shape[1] > 1 else []
    return info


def inspect_artifact(path: Path, names_path=None) -> dict:
    """
    汇总检查点目录、VSB文件（带 .json 附加信息）、TSB（嵌入 + 类别名）或任意嵌入文件
    """
    if path.is_dir():
        ckpt = dataio.load_checkpoint(path)
        info = {"kind": "checkpoint", "step": ckpt.step,
                "schedule_position": ckpt.manifest["schedule_position"], "rng": ckpt.manifest["rng"],
                "student_parameters": ckpt.student.parameter_count(),
                "projection_parameters": ckpt.projection.parameter_count() if ckpt.projection else 0,
                "queue_size": len(ckpt.queue) if ckpt.queue is not None else None,
                "vsb": _describe_bank(ckpt.vsb.anchors, ckpt.category_names, ckpt.vsb.initialized)}
        return info
    if Path(f"{path}.json").exists():
        vsb, names = dataio.load_vsb(path)
        return {"kind": "vsb", **_describe_bank(vsb.anchors, names, vsb.initialized)}
    if names_path is not None:
        tsb = dataio.load_tsb(path, names_path)
        return {"kind": "tsb", **_describe_bank(tsb.anchors, tsb.category_names)}
    matrix = dataio.read_embeddings(path)
    norms = np.linalg.norm(matrix, axis=1)
    return {"kind": "embeddings", "shape": list(matrix.shape),
            "row_norms": {"min": float(norms.min()), "max": float(norms.max())} if matrix.size else None}


@cli.command(name="inspect")
@click.argument("path", type=click.Path())
@click.option("--names", "names_path", type=click.Path(dir_okay=False), default=None,
              help="类别名清单，与嵌入文件一起按TSB解析")
@exit_codes
def inspect_command(path, names_path):
    """查看语义库、检查点或嵌入文件"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"文件不存在: {path}")
    _echo_json(inspect_artifact(path, names_path))


