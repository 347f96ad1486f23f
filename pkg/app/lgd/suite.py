"""
    实验套件：ablation / text_control / collapse / lgd_vs_seed

    每个 (arm, seed) 单元是一次独立运行，单元之间用线程池并行（上限取 LGD_THREADS）。
    单元失败不影响其余单元，结果表中以 status=failed 标记。
"""
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from app.core.config import get_thread_cap
from app.core.exceptions import ConfigurationError
from app.core.run_config import RunConfig
from app.lgd.dataio import atomic_write_text
from app.lgd.evaluation import ContrastKind, collapse_experiment, text_control_experiment, train_and_evaluate
from app.lgd.synthworld import gen_text_anchors, gen_world

logger = logging.getLogger(__name__)

SUITES = ("ablation", "text_control", "collapse", "lgd_vs_seed")
RESULT_COLUMNS = ["arm", "seed", "metric", "value", "status"]

# arm名称 → 对配置的修改
ABLATION_ARMS = {
    "visual": {"loss": {"mode": "standard", "alpha": 1.0}},
    "textual": {"loss": {"mode": "standard", "alpha": 0.0}},
    "combined": {"loss": {"mode": "standard", "alpha": 0.5}},
}
LGD_VS_SEED_ARMS = {
    "lgd": {"loss": {"mode": "standard", "alpha": 0.5}},
    "seed": {"loss": {"mode": "baseline_seed", "alpha": None}},
}


@dataclass
class SuiteResult:
    suite: str
    table: pd.DataFrame
    failures: list = field(default_factory=list)
    output_dir: Optional[Path] = None

    @property
    def ok(self) -> bool:
        return not self.failures


def _seeded(config: RunConfig, seed: int) -> RunConfig:
    return config.with_updates(seed=seed)


def _arm_cell(config: RunConfig, overrides: dict, arm: str, seed: int) -> list:
    """单个arm在一个seed上训练并评估，返回结果行"""
    world = gen_world(config.world)
    tsb = gen_text_anchors(world)
    arm_config = config.with_updates(**overrides)
    _, report = train_and_evaluate(arm_config, world, tsb, with_probe=True)
    return [{"arm": arm, "seed": seed, "metric": metric, "value": value}
            for metric, value in (("zeroshot_accuracy", report.zeroshot_accuracy),
                                  ("linear_probe_accuracy", report.linear_probe_accuracy),
                                  ("mean_kl_teacher_student_textual", report.mean_kl_teacher_student_textual),
                                  ("mean_kl_teacher_student_visual", report.mean_kl_teacher_student_visual))]


def _plan(suite: str, config: RunConfig, seeds: Sequence[int], subset: Optional[Sequence[str]],
          contrast: ContrastKind) -> list:
    """
    展开为 [(arm标签, seed, 任务函数)]；text_control 与 collapse 的一个单元内部包含两个配对arm
    """
    cells = []
    if config.world is None:
        raise ConfigurationError("实验套件只支持合成世界 (world)")
    for seed in seeds:
        if suite in ("ablation", "lgd_vs_seed"):
            arms = ABLATION_ARMS if suite == "ablation" else LGD_VS_SEED_ARMS
            for arm, overrides in arms.items():
                cfg = _seeded(config, seed)
                cells.append((arm, seed, lambda c=cfg, o=overrides, a=arm, s=seed: _arm_cell(c, o, a, s)))
        elif suite == "text_control":
            cfg = _seeded(config, seed)

            def run(c=cfg):
                world = gen_world(c.world)
                names = list(subset) if subset else world.params.names()[:max(2, world.num_categories // 2)]
                return text_control_experiment(world, gen_text_anchors(world), names, c, contrast).rows()
            cells.append(("matched+" + contrast, seed, run))
        elif suite == "collapse":
            cfg = _seeded(config, seed)
            cells.append(("naive+generalized", seed,
                          lambda c=cfg: collapse_experiment(gen_world(c.world), c).rows()))
        else:
            raise ConfigurationError(f"未知的实验套件: {suite}，可选 {SUITES}")
    return cells


def collapse_world_config(config: RunConfig) -> RunConfig:
    """坍塌实验默认使用 D_text = 2D 的世界（若配置未指定 text_dim）"""
    if config.world is not None and config.world.text_dim is None:
        return config.with_updates(world={"text_dim": 2 * config.world.dim})
    return config


def summarize(table: pd.DataFrame) -> pd.DataFrame:
    """按 (arm, metric) 汇总均值、标准差、标准误与成功的seed数"""
    ok = table[table["status"] == "ok"].dropna(subset=["value"])
    if ok.empty:
        return pd.DataFrame(columns=["arm", "metric", "mean", "std", "sem", "n"])
    grouped = ok.groupby(["arm", "metric"])["value"]
    summary = grouped.agg(["mean", "std", "sem", "count"]).reset_index().rename(columns={"count": "n"})
    return summary.fillna({"std": 0.0, "sem": 0.0})


def _summary_text(suite: str, table: pd.DataFrame, failures: list) -> str:
    lines = [f"suite: {suite}", ""]
    summary = summarize(table)
    if not summary.empty:
        lines.append(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if failures:
        lines += ["", f"失败单元 ({len(failures)}):"]
        lines += [f"  {f['arm']} seed={f['seed']}: {f['error']}" for f in failures]
    return "\n".join(lines) + "\n"


def run_suite(suite: str, config: RunConfig, seeds: Sequence[int], output_dir=None,
              subset: Optional[Sequence[str]] = None, contrast: ContrastKind = "foreign",
              max_workers: Optional[int] = None) -> SuiteResult:
    """
    运行实验套件

    Args:
        suite: 套件名
        config: 基础运行配置（必须是合成世界）
        seeds: 各单元使用的seed，所有arm共享同一组seed
        output_dir: 输出目录，默认 config.output_dir
        subset: text_control 的子任务类别，默认取前一半类别
        contrast: text_control 的对照arm；"foreign" 才能区分文本内容，"full" 只作一致性检查
        max_workers: 并行线程数，默认 LGD_THREADS

    Returns:
        SuiteResult；table 列为 arm, seed, metric, value, status
    """
    if suite not in SUITES:
        raise ConfigurationError(f"未知的实验套件: {suite}，可选 {SUITES}")
    if suite == "collapse":
        config = collapse_world_config(config)
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = _plan(suite, config, seeds, subset, contrast)
    workers = max_workers or get_thread_cap()
    logger.info(f"运行实验套件 {suite}: {len(cells)} 个单元, seeds={list(seeds)}, 并行={workers}")

    def guarded(cell):
        arm, seed, fn = cell
        try:
            return [dict(r, status="ok") for r in fn()], None
        except Exception as e:
            logger.error(f"单元 {arm} seed={seed} 失败: {e}\n{traceback.format_exc()}")
            failure = {"arm": arm, "seed": seed, "error": f"{type(e).__name__}: {e}"}
            return [{"arm": arm, "seed": seed, "metric": "error", "value": None, "status": "failed"}], failure

    rows, failures = [], []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for cell_rows, failure in pool.map(guarded, cells):  # 按提交顺序收集
            rows.extend(cell_rows)
            if failure:
                failures.append(failure)

    table = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    table.to_csv(out / "results.csv", index=False, float_format="%.10g")
    atomic_write_text(out / "summary.txt", _summary_text(suite, table, failures))
    logger.info(f"实验套件 {suite} 完成: {len(cells) - len(failures)}/{len(cells)} 个单元成功")
    return SuiteResult(suite=suite, table=table, failures=failures, output_dir=out)


