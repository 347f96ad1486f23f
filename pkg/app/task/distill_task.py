"""
    蒸馏与实验套件的Celery任务，参数与返回值都是JSON可序列化的字典
"""
import logging
from pathlib import Path
from typing import Optional

from app.core.celery import celery_app
from app.core.config import OUTPUT_PATH, settings
from app.core.log import setup_logging
from app.core.run_config import resolve_run_config
from app.lgd.runner import run_distillation
from app.lgd.suite import run_suite

logger = logging.getLogger(__name__)


@celery_app.task(bind=True, name="lgd.distill")
def distill_task(self, config: dict, preset: str = "desk", max_steps: Optional[int] = None):
    """
    执行一次蒸馏运行

    Args:
        config: RunConfig JSON文档（与预设深度合并）
        preset: 预设名称
        max_steps: 可选，提前停止

    Returns:
        dict: 输出目录、步数与最终评估报告
    """
    config = dict(config)
    config.setdefault("output_dir", str(Path(OUTPUT_PATH) / f"run_{self.request.id}"))
    run_config = resolve_run_config(preset, config)
    setup_logging(settings.LGD_LOG_LEVEL, log_file=Path(run_config.output_dir) / "run.log")
    logger.info(f"任务 {self.request.id}: 开始蒸馏, 输出目录 {run_config.output_dir}")
    result = run_distillation(run_config, max_steps=max_steps)
    return {
        "output_dir": str(result.output_dir),
        "steps": result.artifacts.step,
        "initial": result.initial.model_dump() if result.initial else None,
        "final": result.final.model_dump() if result.final else None,
    }


@celery_app.task(bind=True, name="lgd.suite")
def suite_task(self, suite: str, seeds: int = 5, config: Optional[dict] = None, preset: str = "desk",
               contrast: str = "foreign", subset: Optional[list] = None):
    """
    运行实验套件

    Returns:
        dict: 输出目录、失败单元与结果表
    """
    setup_logging(settings.LGD_LOG_LEVEL)
    output_dir = str(Path(OUTPUT_PATH) / f"suite_{suite}_{self.request.id}")
    run_config = resolve_run_config(preset, {**(config or {}), "output_dir": output_dir})
    result = run_suite(suite, run_config, list(range(seeds)), subset=subset, contrast=contrast)
    table = result.table.astype(object).where(result.table.notna(), None)
    return {
        "output_dir": str(result.output_dir),
        "ok": result.ok,
        "failures": result.failures,
        "rows": table.to_dict(orient="records"),
    }
