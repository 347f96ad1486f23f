"""
    评估：零样本分类、线性探测、对齐诊断，以及文本控制 / 模式坍塌两个对比实验
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special

from app.core.exceptions import ConfigurationError, EvalError, InputError, ShapeError
from app.core.run_config import RunConfig
from app.lgd import rng as rng_streams
from app.lgd.banks import TextualSemanticsBank, VisualSemanticsBank, classify_by_anchors, lgka_step, subset_tsb
from app.lgd.losses import LossConfig, appended_logits
from app.lgd.numerics import EmbeddingMatrix, as_matrix, kl_per_row, l2_normalize_rows, matmul, softmax_rows
from app.lgd.student import StudentNet
from app.lgd.synthworld import SyntheticWorld, gen_text_anchors, gen_world, restrict_world, sample_split
from app.lgd.trainer import TrainedArtifacts, WorldSource, build_artifacts, train_distillation

logger = logging.getLogger(__name__)

PROBE_TOL = 1e-8
ContrastKind = Literal["full", "foreign"]


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    zeroshot_accuracy: float = Field(ge=0.0, le=1.0)
    linear_probe_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    mean_kl_teacher_student_textual: Optional[float] = None
    mean_kl_teacher_student_visual: Optional[float] = None
    anchor_separation: Optional[float] = None
    per_class_accuracy: list[Optional[float]] = Field(default_factory=list)


@dataclass(frozen=True)
class EvalSplit:
    """带标签的评估划分：学生输入、对应的教师特征与真实类别"""
    inputs: EmbeddingMatrix
    teacher: EmbeddingMatrix
    labels: np.ndarray

    def __post_init__(self):
        if not (self.inputs.shape[0] == self.teacher.shape[0] == self.labels.shape[0]):
            raise ShapeError("评估划分的行数不一致", self.inputs.shape, self.teacher.shape, self.labels.shape)

    @classmethod
    def from_world(cls, world: SyntheticWorld, size: int, seed: int, name: str = "eval") -> "EvalSplit":
        inputs, teacher, labels = sample_split(world, size, seed, name)
        return cls(inputs=inputs, teacher=teacher, labels=labels)

    def __len__(self):
        return int(self.labels.shape[0])


class Encoder(Protocol):
    def encode(self, split: EvalSplit) -> EmbeddingMatrix:
        ...


class StudentEncoder:
    def __init__(self, student: StudentNet):
        self.student = student

    def encode(self, split: EvalSplit) -> EmbeddingMatrix:
        z, _ = self.student.forward(split.inputs)
        return z


class TeacherEncoder:
    """直接使用教师特征，作为零样本准确率的上界参照"""

    def encode(self, split: EvalSplit) -> EmbeddingMatrix:
        return split.teacher


def _check_labels(labels: np.ndarray, num_classes: int):
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise InputError(f"第 {int(bad[0])} 个标签 {int(labels[bad[0]])} 越界 [0, {num_classes - 1}]")
    return labels


def zeroshot_eval(encoder: Encoder, split: EvalSplit, tsb: TextualSemanticsBank,
                  anchors: Optional[EmbeddingMatrix] = None) -> dict:
    """
    零样本分类：把TSB当作分类器，取最相似的类别

    Args:
        encoder: 学生或教师编码器
        split: 带标签的评估划分
        tsb: 文本语义库，标签i对应第i列
        anchors: 可选，替代 tsb.anchors（有投影头时传入投影后的锚点）

    Returns:
        {"zeroshot_accuracy": float, "per_class_accuracy": list}，样本中未出现的类别记为None
    """
    anchors = tsb.anchors if anchors is None else anchors
    labels = _check_labels(split.labels, tsb.num_categories)
    pred = classify_by_anchors(encoder.encode(split), anchors)
    hit = pred == labels
    per_class = [float(hit[labels == c].mean()) if np.any(labels == c) else None
                 for c in range(tsb.num_categories)]
    return {"zeroshot_accuracy": float(hit.mean()), "per_class_accuracy": per_class}


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    label_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    lr: float = Field(default=1.0, gt=0.0)
    max_iters: int = Field(default=2000, ge=1)
    tol: float = Field(default=PROBE_TOL, gt=0.0)
    seed: int = Field(default=0, ge=0)


def _label_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(labels.shape[0])
    count = max(1, math.ceil(fraction * labels.shape[0]))
    return np.sort(rng_streams.stream(seed, "probe.labels").permutation(labels.shape[0])[:count])


def fit_softmax_regression(features: EmbeddingMatrix, labels: np.ndarray, num_classes: int,
                           cfg: ProbeConfig):
    """
    全批量梯度下降训练多项逻辑回归，零初始化，相邻两次loss变化小于tol时停止

    Returns:
        (W D×K, b K, 迭代次数)
    """
    x = as_matrix(features, "features")
    n = x.shape[0]
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels] = 1.0
    w = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    prev = math.inf
    for it in range(1, cfg.max_iters + 1):
        logits = matmul(x, w) + b
        loss = float(-np.mean(np.sum(onehot * special.log_softmax(logits, axis=1), axis=1)))
        if abs(prev - loss) < cfg.tol:
            return w, b, it
        prev = loss
        g = (special.softmax(logits, axis=1) - onehot) / n
        w = w - cfg.lr * matmul(x.T, g)
        b = b - cfg.lr * g.sum(axis=0)
    logger.debug(f"线性探测在 {cfg.max_iters} 次迭代内未收敛到 tol={cfg.tol}")
    return w, b, cfg.max_iters


def linear_probe(encoder: Encoder, train_split: EvalSplit, test_split: EvalSplit,
                 cfg: Optional[ProbeConfig] = None, num_classes: Optional[int] = None) -> float:
    """
    线性探测：在冻结的特征上训练单层线性分类器，返回测试集准确率

    Args:
        encoder: 冻结的编码器
        train_split: 训练划分（按 label_fraction 取固定子集）
        test_split: 测试划分
        cfg: 探测配置
        num_classes: 类别数，默认取标签最大值+1

    Raises:
        EvalError: 训练标签只有一个类别
    """
    cfg = cfg or ProbeConfig()
    if num_classes is None:
        num_classes = int(max(train_split.labels.max(), test_split.labels.max())) + 1
    train_labels = _check_labels(train_split.labels, num_classes)
    test_labels = _check_labels(test_split.labels, num_classes)
    keep = _label_subset(train_labels, cfg.label_fraction, cfg.seed)
    if np.unique(train_labels[keep]).size < 2:
        raise EvalError(f"线性探测的训练标签只有一个类别 (样本数 {keep.size})")
    train_z = encoder.encode(train_split)[keep]
    test_z = encoder.encode(test_split)
    if train_z.shape[1] != test_z.shape[1]:
        raise ShapeError("训练与测试特征维度不一致", train_z.shape, test_z.shape)
    w, b, iters = fit_softmax_regression(train_z, train_labels[keep], num_classes, cfg)
    acc = float(np.mean(np.argmax(matmul(test_z, w) + b, axis=1) == test_labels))
    logger.info(f"线性探测: 标签比例={cfg.label_fraction}, 训练样本={keep.size}, 迭代={iters}, 准确率={acc:.4f}")
    return acc


def anchor_statistics(anchors: EmbeddingMatrix) -> dict:
    """
    锚点列的平均两两余弦与平均范数；坍塌时余弦趋近1或范数趋近0
    """
    anchors = as_matrix(anchors, "anchors")
    norms = np.linalg.norm(anchors, axis=0)
    unit, _ = l2_normalize_rows(anchors.T)
    cos = matmul(unit, unit.T)
    iu = np.triu_indices(anchors.shape[1], k=1)
    return {"mean_pairwise_cosine": float(np.mean(cos[iu])), "mean_norm": float(np.mean(norms))}


def alignment_diagnostics(z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, tsb: TextualSemanticsBank,
                          vsb: Optional[VisualSemanticsBank], cfg: LossConfig,
                          text_anchors: Optional[EmbeddingMatrix] = None) -> dict:
    """
    教师与学生在文本、视觉两个空间中的平均逐样本 KL(s_T ‖ s_S)

    Args:
        z_t: 教师特征
        z_s: 同一批输入的学生特征
        tsb: 文本语义库
        vsb: 视觉语义库；为None或尚无已初始化锚点时视觉KL为None
        cfg: 提供 τ_T、τ_S
        text_anchors: 可选，投影后的文本锚点

    Returns:
        {"mean_kl_teacher_student_textual", "mean_kl_teacher_student_visual", "anchor_separation"}
    """
    z_t = as_matrix(z_t, "z_t")
    z_s = as_matrix(z_s, "z_s")
    if z_t.shape != z_s.shape:
        raise ShapeError("教师与学生特征形状不一致", z_t.shape, z_s.shape)
    anchors = tsb.anchors if text_anchors is None else as_matrix(text_anchors, "text_anchors")
    if anchors.shape[0] != z_t.shape[1]:
        raise ShapeError("特征维度与文本锚点维度不一致", z_t.shape, anchors.shape)
    s_tl = softmax_rows(matmul(z_t, anchors), cfg.tau_teacher)
    s_sl = softmax_rows(matmul(z_s, anchors), cfg.tau_student)
    report = {"mean_kl_teacher_student_textual": float(np.mean(kl_per_row(s_tl, s_sl))),
              "mean_kl_teacher_student_visual": None,
              "anchor_separation": anchor_statistics(anchors)["mean_pairwise_cosine"]}
    if vsb is not None and vsb.initialized_count > 0:
        if vsb.dim != z_t.shape[1]:
            raise ShapeError("特征维度与VSB不一致", z_t.shape, (vsb.dim, vsb.num_categories))
        v = vsb.anchors
        s_tv = softmax_rows(appended_logits(z_t, v, z_t), cfg.tau_teacher)
        s_sv = softmax_rows(appended_logits(z_s, v, z_t), cfg.tau_student)
        report["mean_kl_teacher_student_visual"] = float(np.mean(kl_per_row(s_tv, s_sv)))
    return report


def reference_vsb(art: TrainedArtifacts, split: EvalSplit) -> VisualSemanticsBank:
    """以评估集教师特征做一次LGKA得到的VSB，不修改 art.vsb"""
    vsb = VisualSemanticsBank.create(art.tsb.num_categories, art.vsb.dim, art.vsb.momentum)
    lgka_step(split.teacher, art.lgka_anchors(), vsb)
    return vsb


def evaluate_artifacts(art: TrainedArtifacts, split: EvalSplit, probe_train: Optional[EvalSplit] = None,
                       probe_cfg: Optional[ProbeConfig] = None) -> EvalReport:
    """
    对训练产物做完整评估；有投影头时零样本与文本KL都使用投影后的锚点

    VSB 尚无已初始化锚点时（训练前、SEED基线）视觉KL针对评估集上一次LGKA得到的参考VSB计算。
    """
    encoder = StudentEncoder(art.student)
    anchors = art.classifier_anchors()
    vsb = art.vsb if art.vsb.initialized_count > 0 else reference_vsb(art, split)
    fields = zeroshot_eval(encoder, split, art.tsb, anchors=anchors)
    fields.update(alignment_diagnostics(split.teacher, encoder.encode(split), art.tsb, vsb,
                                        art.config.loss, text_anchors=anchors))
    if probe_train is not None:
        fields["linear_probe_accuracy"] = linear_probe(encoder, probe_train, split, probe_cfg,
                                                       num_classes=art.tsb.num_categories)
    return EvalReport(**fields)


def probe_config_from(config: RunConfig) -> ProbeConfig:
    return ProbeConfig(label_fraction=config.eval.probe_label_fraction, lr=config.eval.probe_lr,
                       max_iters=config.eval.probe_max_iters, seed=config.seed)


def train_and_evaluate(config: RunConfig, world: SyntheticWorld, train_tsb: TextualSemanticsBank,
                       eval_tsb: Optional[TextualSemanticsBank] = None, with_probe: bool = False):
    """
    在合成世界上训练一个学生并在固定的评估划分上评估

    Args:
        config: 运行配置（seed 决定批次序列与初始化）
        world: 数据来源
        train_tsb: 训练时使用的TSB
        eval_tsb: 零样本评估使用的TSB，默认与训练相同
        with_probe: 是否附加线性探测

    Returns:
        (TrainedArtifacts, EvalReport)
    """
    source = WorldSource(world, config.training.batch_size, config.seed)
    art = train_distillation(config, source, train_tsb)
    split = EvalSplit.from_world(world, config.eval.eval_samples, config.seed)
    if eval_tsb is None or eval_tsb is train_tsb:
        probe = EvalSplit.from_world(world, config.eval.probe_train_samples, config.seed, "probe") if with_probe \
            else None
        return art, evaluate_artifacts(art, split, probe, probe_config_from(config))
    anchors = eval_tsb.anchors
    if art.projection is not None:
        anchors = art.projection.forward(eval_tsb.anchors.T)[0].T
    fields = zeroshot_eval(StudentEncoder(art.student), split, eval_tsb, anchors=anchors)
    return art, EvalReport(**fields)


@dataclass
class ExperimentRecord:
    """配对实验结果：arm → 指标，可展开为 (arm, seed, metric, value) 行"""
    experiment: str
    seed: int
    arms: dict = field(default_factory=dict)

    def rows(self) -> list:
        return [{"arm": arm, "seed": self.seed, "metric": metric, "value": value}
                for arm, metrics in self.arms.items() for metric, value in metrics.items()]


def foreign_anchors(world: SyntheticWorld, names: Sequence[str]) -> TextualSemanticsBank:
    """
    来自另一个世界的文本锚点，取前 len(names) 列并改用给定类别名（错配TSB）
    """
    other = gen_world(world.params.model_copy(update={"seed": world.params.seed + 1}))
    tsb = gen_text_anchors(other)
    rows = tsb.anchors[:, :len(names)].T
    return TextualSemanticsBank.from_rows(rows, names, source_tag=f"{tsb.source_tag}[foreign]")


def text_control_experiment(world: SyntheticWorld, full_tsb: TextualSemanticsBank, subset_names: Sequence[str],
                            config: RunConfig, contrast: ContrastKind = "foreign") -> ExperimentRecord:
    """
    文本控制：子任务上比较"匹配子集TSB"与"完整/错配TSB"训练出的学生

    两个arm使用同一个只含子集类别的世界与同一个seed，零样本评估都以子集TSB为分类器。

    Args:
        world: 完整世界
        full_tsb: 完整TSB
        subset_names: 子任务类别（至少2个）
        config: 运行配置
        contrast: "foreign" 使用来自另一个世界的锚点；"full" 使用完整TSB训练，
            完整TSB在子任务上的列与子集TSB相同，两个arm通常只差在softmax的类别数上

    Returns:
        arms: matched / contrast / difference
    """
    names = list(subset_names)
    if len(names) < 2:
        raise ConfigurationError(f"子任务至少需要2个类别，实际为 {len(names)}")
    if len(names) > full_tsb.num_categories:
        raise ConfigurationError("子任务类别数超过完整TSB")
    task_tsb = subset_tsb(full_tsb, names)
    task_world = restrict_world(world, names)
    contrast_tsb = full_tsb if contrast == "full" else foreign_anchors(world, names)

    _, matched = train_and_evaluate(config, task_world, task_tsb)
    _, other = train_and_evaluate(config, task_world, contrast_tsb, eval_tsb=task_tsb)
    diff = matched.zeroshot_accuracy - other.zeroshot_accuracy
    logger.info(f"文本控制 seed={config.seed}: matched={matched.zeroshot_accuracy:.4f}, "
                f"{contrast}={other.zeroshot_accuracy:.4f}, 差值={diff:+.4f}")
    return ExperimentRecord(experiment="text_control", seed=config.seed, arms={
        "matched": {"zeroshot_accuracy": matched.zeroshot_accuracy},
        contrast: {"zeroshot_accuracy": other.zeroshot_accuracy},
        "difference": {"zeroshot_accuracy": diff},
    })


def _collapse_arm(config: RunConfig, world: SyntheticWorld, tsb: TextualSemanticsBank) -> dict:
    source = WorldSource(world, config.training.batch_size, config.seed)
    art = build_artifacts(config, source, tsb)
    before = anchor_statistics(art.classifier_anchors())
    art = train_distillation(config, source, tsb, resume=art)
    after = anchor_statistics(art.classifier_anchors())
    split = EvalSplit.from_world(world, config.eval.eval_samples, config.seed)
    acc = zeroshot_eval(StudentEncoder(art.student), split, tsb, anchors=art.classifier_anchors())
    return {"zeroshot_accuracy": acc["zeroshot_accuracy"],
            "anchor_cosine_initial": before["mean_pairwise_cosine"],
            "anchor_cosine_final": after["mean_pairwise_cosine"],
            "anchor_norm_initial": before["mean_norm"],
            "anchor_norm_final": after["mean_norm"]}


def collapse_experiment(world: SyntheticWorld, config: RunConfig,
                        tsb: Optional[TextualSemanticsBank] = None) -> ExperimentRecord:
    """
    模式坍塌对比：(a) 只用 L_TEX 且投影头参与教师目标；(b) 三项损失

    文本维度与特征维度不一致时两个arm都启用投影头；维度一致时沿用配置中的 projection。
    """
    tsb = tsb or gen_text_anchors(world)
    projection = config.projection.model_dump()
    if tsb.dim != world.dim:
        projection["enabled"] = True
    arms = {}
    for arm, mode in (("naive", "naive_textual"), ("generalized", "generalized")):
        arm_config = config.with_updates(loss={"mode": mode, "alpha": None}, projection=projection)
        arms[arm] = _collapse_arm(arm_config, world, tsb)
        logger.info(f"坍塌实验 seed={config.seed} arm={arm}: {arms[arm]}")
    return ExperimentRecord(experiment="collapse", seed=config.seed, arms=arms)
