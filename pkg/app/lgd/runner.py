"""
    一次完整的蒸馏运行：由 RunConfig 准备数据与TSB，训练，写出配置回显、检查点、指标与评估报告

    输出目录结构:
        config.resolved.json  物化了所有默认值的配置
        metrics.jsonl / metrics.csv
        checkpoints/epoch_XXXX/  周期检查点
        checkpoint/           最终检查点
        eval_initial.json / eval_final.json
        diagnostic_stepN.json 数值异常时的得分快照
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from app.core.exceptions import ConfigurationError, NumericAbort
from app.core.run_config import RunConfig
from app.lgd.banks import TextualSemanticsBank, subset_tsb
from app.lgd.dataio import (MetricsSink, atomic_write_text, load_checkpoint, load_tsb, read_embeddings,
                            save_checkpoint)
from app.lgd.evaluation import (EvalReport, EvalSplit, StudentEncoder, evaluate_artifacts, probe_config_from,
                                zeroshot_eval)
from app.lgd.synthworld import gen_text_anchors, gen_world, restrict_world
from app.lgd.trainer import DatasetSource, TrainedArtifacts, WorldSource, build_artifacts, train_distillation

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "config.resolved.json"


@dataclass
class PreparedRun:
    source: object
    tsb: TextualSemanticsBank
    eval_split: Optional[EvalSplit]
    probe_split: Optional[EvalSplit]


@dataclass
class RunResult:
    artifacts: TrainedArtifacts
    initial: Optional[EvalReport]
    final: Optional[EvalReport]
    output_dir: Path


def _read_labels(path) -> np.ndarray:
    """标签文件为 N×1 的嵌入文件（f32可精确表示 < 2^24 的整数）"""
    return read_embeddings(path).reshape(-1).astype(np.int64)


def _remap_split(split: EvalSplit, names: list, subset: list) -> EvalSplit:
    """只保留子集类别的评估样本，标签改为子集内的序号"""
    index = {names.index(n): i for i, n in enumerate(subset)}
    keep = np.array([int(label) in index for label in split.labels], dtype=bool)
    labels = np.array([index[int(label)] for label in split.labels[keep]], dtype=np.int64)
    return EvalSplit(inputs=split.inputs[keep], teacher=split.teacher[keep], labels=labels)


def prepare_run(config: RunConfig) -> PreparedRun:
    """
    按配置构造数据来源、TSB与评估划分

    给出 tsb.subset 时，合成世界同样只保留这些类别；数据集的评估标签按子集重新编号。
    """
    eval_split = probe_split = None
    subset = list(config.tsb.subset) if config.tsb.subset else None
    if config.world is not None:
        world = gen_world(config.world)
        tsb = gen_text_anchors(world)
        if subset is not None and config.tsb.embeddings_path is None:
            tsb = subset_tsb(tsb, subset)
            world = restrict_world(world, subset)
        source = WorldSource(world, config.training.batch_size, config.seed)
        eval_split = EvalSplit.from_world(world, config.eval.eval_samples, config.seed)
        probe_split = EvalSplit.from_world(world, config.eval.probe_train_samples, config.seed, "probe")
    else:
        ds = config.dataset
        source = DatasetSource(read_embeddings(ds.inputs_path), read_embeddings(ds.teacher_path),
                               config.training.batch_size, config.seed)
        tsb = None
        if ds.eval_inputs_path and ds.eval_teacher_path and ds.eval_labels_path:
            eval_split = EvalSplit(inputs=read_embeddings(ds.eval_inputs_path),
                                   teacher=read_embeddings(ds.eval_teacher_path),
                                   labels=_read_labels(ds.eval_labels_path))
    if config.tsb.embeddings_path is not None:
        tsb = load_tsb(config.tsb.embeddings_path, config.tsb.names_path)
    if tsb is None:
        raise ConfigurationError("没有可用的TSB来源")
    if subset is not None and list(tsb.category_names) != subset:
        names = list(tsb.category_names)
        tsb = subset_tsb(tsb, subset)
        eval_split = _remap_split(eval_split, names, subset) if eval_split is not None else None
        probe_split = _remap_split(probe_split, names, subset) if probe_split is not None else None
    return PreparedRun(source=source, tsb=tsb, eval_split=eval_split, probe_split=probe_split)


def restore_artifacts(config: RunConfig, prepared: PreparedRun, checkpoint_dir) -> TrainedArtifacts:
    """用检查点覆盖新初始化的状态（调度由配置重建）"""
    ckpt = load_checkpoint(checkpoint_dir)
    if list(ckpt.category_names) != list(prepared.tsb.category_names):
        raise ConfigurationError("检查点的类别与当前TSB不一致")
    art = build_artifacts(config, prepared.source, prepared.tsb)
    ckpt.optimizer.schedule = art.optimizer.schedule
    art.student, art.projection, art.vsb = ckpt.student, ckpt.projection, ckpt.vsb
    art.queue, art.optimizer, art.step = ckpt.queue, ckpt.optimizer, ckpt.step
    return art


def _report(art: TrainedArtifacts, prepared: PreparedRun, with_probe: bool) -> Optional[EvalReport]:
    if prepared.eval_split is None:
        return None
    probe = prepared.probe_split if with_probe else None
    return evaluate_artifacts(art, prepared.eval_split, probe, probe_config_from(art.config))


def _write_report(path: Path, report: Optional[EvalReport]):
    if report is not None:
        atomic_write_text(path, report.model_dump_json(indent=2))


def run_distillation(config: RunConfig, output_dir=None, resume_from=None,
                     max_steps: Optional[int] = None) -> RunResult:
    """
    执行一次蒸馏运行

    Args:
        config: 已解析的运行配置
        output_dir: 覆盖 config.output_dir
        resume_from: 可选，检查点目录
        max_steps: 可选，提前停止

    Returns:
        RunResult

    Raises:
        NumericAbort: loss非有限，诊断快照已写入输出目录（路径在 exc.diagnostic_path）
    """
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / RESOLVED_CONFIG, config.dump_json())
    prepared = prepare_run(config)
    art = (restore_artifacts(config, prepared, resume_from) if resume_from
           else build_artifacts(config, prepared.source, prepared.tsb))
    initial = _report(art, prepared, with_probe=False)
    _write_report(out / "eval_initial.json", initial)

    evaluator = None
    if prepared.eval_split is not None:
        def evaluator(a: TrainedArtifacts) -> float:
            return zeroshot_eval(StudentEncoder(a.student), prepared.eval_split, a.tsb,
                                 anchors=a.classifier_anchors())["zeroshot_accuracy"]

    every = config.training.checkpoint_every_epochs

    def on_epoch_end(a: TrainedArtifacts, epoch: int):
        if every and (epoch + 1) % every == 0:
            save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:04d}", a)

    try:
        art = train_distillation(config, prepared.source, prepared.tsb, evaluator=evaluator,
                                 on_step=MetricsSink(out, append=bool(resume_from)), on_epoch_end=on_epoch_end,
                                 resume=art, max_steps=max_steps)
    except NumericAbort as e:
        path = out / f"diagnostic_step{e.step}.json"
        atomic_write_text(path, json.dumps({"step": e.step, "message": str(e), "scores": e.snapshot},
                                           ensure_ascii=False))
        e.diagnostic_path = str(path)
        logger.error(f"数值异常，训练中止，诊断快照: {path}")
        raise
    save_checkpoint(out / "checkpoint", art)
    final = _report(art, prepared, with_probe=True)
    _write_report(out / "eval_final.json", final)
    if final is not None:
        logger.info(f"运行完成: 零样本准确率 {initial.zeroshot_accuracy:.4f} → {final.zeroshot_accuracy:.4f}")
    return RunResult(artifacts=art, initial=initial, final=final, output_dir=out)


def evaluate_checkpoint(config: RunConfig, checkpoint_dir, with_probe: bool = True) -> EvalReport:
    """
    评估已保存的检查点（评估划分按配置重新生成）
    """
    prepared = prepare_run(config)
    if prepared.eval_split is None:
        raise ConfigurationError("配置中没有评估数据（dataset 需要 eval_inputs/eval_teacher/eval_labels）")
    art = restore_artifacts(config, prepared, checkpoint_dir)
    return _report(art, prepared, with_probe=with_probe)


def load_resolved_config(path) -> RunConfig:
    return RunConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
