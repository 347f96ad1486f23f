"""
    蒸馏训练循环

    每个step：取batch → 教师特征做LGKA更新VSB → 学生前向 → 计算损失 → 反向 → SGD。
    所有随机性来自以 (seed, 名称, step) 命名的随机数流，相同配置逐位可复现。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from app.core.exceptions import ConfigurationError, NumericAbort
from app.core.run_config import RunConfig
from app.lgd import rng as rng_streams
from app.lgd.banks import InstanceQueue, TextualSemanticsBank, VisualSemanticsBank, lgka_step
from app.lgd.losses import compute_loss
from app.lgd.numerics import EmbeddingMatrix, l2_normalize_rows, matmul
from app.lgd.student import CosineSchedule, OptimizerState, ProjectionHead, StudentNet, lr_at, sgd_step
from app.lgd.synthworld import SyntheticWorld, sample_batch

logger = logging.getLogger(__name__)

TEXT_MODES = ("standard", "generalized", "naive_textual")


class DistillationSource(Protocol):
    """
        训练数据来源，同时充当教师：给出学生输入和对应的教师特征
    """
    input_dim: int
    dim: int
    text_lift: Optional[EmbeddingMatrix]  # D_text×D 的固定文本映射，未知时为None

    def draw(self, step: int) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
        ...


class WorldSource:
    """合成世界：每个step使用独立的随机数流"""

    def __init__(self, world: SyntheticWorld, batch_size: int, seed: int):
        self.world = world
        self.batch_size = batch_size
        self.seed = seed
        self.input_dim = world.params.input_dim
        self.dim = world.params.dim
        self.text_lift = world.text_lift

    def draw(self, step: int):
        inputs, teacher, _ = sample_batch(self.world, self.batch_size, rng_streams.stream(self.seed, "batch", step))
        return inputs, teacher


class DatasetSource:
    """预计算数据集：每个epoch按 (seed, epoch) 重新打乱"""

    def __init__(self, inputs: EmbeddingMatrix, teacher: EmbeddingMatrix, batch_size: int, seed: int):
        if inputs.shape[0] != teacher.shape[0]:
            raise ConfigurationError(f"输入行数 {inputs.shape[0]} 与教师特征行数 {teacher.shape[0]} 不一致")
        if inputs.shape[0] < batch_size:
            raise ConfigurationError(f"数据集样本数 {inputs.shape[0]} 小于batch大小 {batch_size}")
        self.inputs = inputs
        self.teacher, _ = l2_normalize_rows(teacher)
        self.batch_size = batch_size
        self.seed = seed
        self.batches_per_pass = inputs.shape[0] // batch_size
        self.input_dim = inputs.shape[1]
        self.dim = teacher.shape[1]
        self.text_lift = None

    def draw(self, step: int):
        rounds, offset = divmod(step, self.batches_per_pass)
        order = rng_streams.stream(self.seed, "shuffle", rounds).permutation(self.inputs.shape[0])
        idx = order[offset * self.batch_size:(offset + 1) * self.batch_size]
        return self.inputs[idx], self.teacher[idx]


@dataclass
class TrainedArtifacts:
    config: RunConfig
    student: StudentNet
    projection: Optional[ProjectionHead]
    tsb: TextualSemanticsBank
    vsb: VisualSemanticsBank
    queue: Optional[InstanceQueue]
    optimizer: OptimizerState
    seed: int
    step: int = 0
    metrics: list = field(default_factory=list)
    rng_algorithm: str = rng_streams.RNG_ALGORITHM
    text_lift: Optional[EmbeddingMatrix] = None

    @property
    def schedule_position(self) -> float:
        return self.step / self.config.total_steps

    def classifier_anchors(self) -> EmbeddingMatrix:
        """当前用于零样本评估的锚点（有投影头时为投影后的锚点）"""
        if self.projection is None:
            return self.tsb.anchors
        rows, _ = self.projection.forward(self.tsb.anchors.T)
        return rows.T

    def lgka_anchors(self) -> EmbeddingMatrix:
        """
        LGKA 分类教师特征使用的锚点，始终来自冻结的TSB

        维度一致时直接使用 L；不一致时教师特征经固定映射进入文本空间再与 L 比较，
        <lift·z, L_k> = <z, liftᵀ·L_k>，因此等价于用 liftᵀ·L 分类。
        没有固定映射（预计算数据集）时退回投影后的锚点。
        """
        if self.tsb.dim == self.vsb.dim:
            return self.tsb.anchors
        if self.text_lift is not None:
            return matmul(self.text_lift.T, self.tsb.anchors)
        return self.classifier_anchors()


def build_artifacts(config: RunConfig, source: DistillationSource, tsb: TextualSemanticsBank) -> TrainedArtifacts:
    """
    按配置初始化学生、投影头、语义库与优化器（step 0 的状态）
    """
    seed = config.seed
    needs_text = config.loss.mode in TEXT_MODES
    if needs_text and tsb.dim != source.dim and not config.projection.enabled:
        raise ConfigurationError(f"文本锚点维度 {tsb.dim} ≠ 特征维度 {source.dim}，需要启用 projection")
    student = StudentNet.create(source.input_dim, config.student.hidden_dims, source.dim,
                                rng_streams.stream(seed, "student.init"))
    projection = None
    if config.projection.enabled:
        projection = ProjectionHead.create(tsb.dim, source.dim, rng_streams.stream(seed, "projection.init"),
                                           hidden_dims=config.projection.hidden_dims)
    vsb = VisualSemanticsBank.create(tsb.num_categories, source.dim, config.banks.momentum,
                                     init=config.banks.vsb_init, rng=rng_streams.stream(seed, "vsb.init"))
    queue = None
    if config.loss.mode == "baseline_seed":
        queue = InstanceQueue.random(config.banks.queue_size, source.dim, rng_streams.stream(seed, "queue.init"))
    schedule = CosineSchedule(base_lr=config.optimizer.base_lr, warmup_epochs=config.optimizer.warmup_epochs,
                              total_epochs=config.training.epochs)
    optimizer = OptimizerState(momentum=config.optimizer.momentum, weight_decay=config.optimizer.weight_decay,
                               schedule=schedule)
    text_lift = getattr(source, "text_lift", None)
    if needs_text and tsb.dim != source.dim and text_lift is None:
        logger.warning("文本锚点与教师特征维度不一致且没有固定映射，LGKA 改用投影后的锚点")
    return TrainedArtifacts(config=config, student=student, projection=projection, tsb=tsb, vsb=vsb, queue=queue,
                            optimizer=optimizer, seed=seed, text_lift=text_lift)


def _snapshot(out) -> dict:
    return {k: np.asarray(v).tolist() for k, v in out.score_snapshots.items()}


def train_distillation(config: RunConfig, source: DistillationSource, tsb: TextualSemanticsBank,
                       evaluator: Optional[Callable[[TrainedArtifacts], float]] = None,
                       on_step: Optional[Callable[[dict, bool], None]] = None,
                       on_epoch_end: Optional[Callable[[TrainedArtifacts, int], None]] = None,
                       resume: Optional[TrainedArtifacts] = None,
                       max_steps: Optional[int] = None) -> TrainedArtifacts:
    """
    语言引导蒸馏训练

    Args:
        config: 运行配置
        source: 数据来源（同时提供教师特征）
        tsb: 文本语义库
        evaluator: 可选，按 eval.every_epochs 在epoch结束时计算零样本准确率
        on_step: 指标回调 (row, 是否为epoch最后一步)
        on_epoch_end: epoch结束回调，用于写检查点
        resume: 从已有状态继续训练
        max_steps: 提前停止的步数上限（不改变学习率调度）

    Returns:
        TrainedArtifacts，metrics 为逐步指标序列

    Raises:
        NumericAbort: loss出现非有限值
    """
    art = resume if resume is not None else build_artifacts(config, source, tsb)
    spe = config.training.steps_per_epoch
    total = config.total_steps if max_steps is None else min(config.total_steps, max_steps)
    mode = config.loss.mode
    logger.info(f"开始蒸馏: mode={mode}, steps={art.step}→{total}, C={tsb.num_categories}, D={source.dim}, "
                f"学生参数量={art.student.parameter_count()}")

    while art.step < total:
        step = art.step
        epoch = step // spe
        lr = lr_at(art.optimizer.schedule, step / config.total_steps)
        inputs, z_t = source.draw(step)
        if config.training.jitter_sigma > 0:
            noise = rng_streams.stream(art.seed, "augment", step).standard_normal(inputs.shape)
            inputs = inputs + config.training.jitter_sigma * noise

        if mode != "baseline_seed":
            lgka_step(z_t, art.lgka_anchors(), art.vsb)  # 学生从不写语义库

        z_s, cache = art.student.forward(inputs)
        out = compute_loss(config.loss, z_t, z_s, tsb, art.vsb, projection=art.projection, queue=art.queue)
        if not np.isfinite(out.total):
            raise NumericAbort(f"loss非有限值: {out.total}", step, snapshot=_snapshot(out))

        grads = {f"student.{k}": v for k, v in art.student.backward(cache, out.grad_student_embeddings).items()}
        params = {f"student.{k}": v for k, v in art.student.parameters().items()}
        if art.projection is not None and out.grad_projection is not None:
            grads.update({f"projection.{k}": v for k, v in out.grad_projection.items()})
            params.update({f"projection.{k}": v for k, v in art.projection.parameters().items()})
        updated = sgd_step(params, grads, art.optimizer, lr)
        art.student.set_parameters({k[len("student."):]: v for k, v in updated.items() if k.startswith("student.")})
        if art.projection is not None and out.grad_projection is not None:
            art.projection.set_parameters(
                {k[len("projection."):]: v for k, v in updated.items() if k.startswith("projection.")})
        if art.queue is not None:
            art.queue.enqueue(z_t)

        art.step += 1
        end_of_epoch = art.step % spe == 0 or art.step == total
        row = {"step": step, "epoch": epoch, "lr": lr, "loss_total": out.total,
               "loss_visual": out.components.get("visual"), "loss_textual": out.components.get("textual"),
               "vsb_initialized_count": art.vsb.initialized_count, "zeroshot_acc": None}
        for name, value in out.components.items():
            row[f"component.{name}"] = value
        every = config.eval.every_epochs
        if evaluator is not None and end_of_epoch and every and (epoch + 1) % every == 0:
            row["zeroshot_acc"] = evaluator(art)
        art.metrics.append(row)
        if on_step is not None:
            on_step(row, end_of_epoch)
        logger.debug(f"step {step}: lr={lr:.5f} loss={out.total:.6f}")
        if end_of_epoch:
            logger.info(f"epoch {epoch + 1}/{config.training.epochs}: lr={lr:.5f} loss={out.total:.5f} "
                        f"VSB已初始化={row['vsb_initialized_count']}/{tsb.num_categories}")
            if on_epoch_end is not None:
                on_epoch_end(art, epoch)
    return art
