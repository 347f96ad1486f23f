"""
    LGD损失函数及其解析梯度，以及SEED风格的基线损失

    约定：
      - 教师一侧的分布永远是常数目标，梯度不会流向 z_T；
      - 返回的 grad_student_embeddings 是对学生输出 z_S（归一化之后）的梯度，
        归一化的Jacobian由 student.backward 负责；
      - 带投影头时，还返回投影头参数的梯度。
"""
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ConfigurationError, ShapeError, StateError
from app.lgd.banks import InstanceQueue, TextualSemanticsBank, VisualSemanticsBank
from app.lgd.numerics import (EmbeddingMatrix, ScoreDistribution, as_matrix, ce_logit_grad, cross_entropy_rows,
                              kl_rows, kl_target_logit_grad, matmul, reduction_scale, row_dot, softmax_rows)

LossMode = Literal["standard", "generalized", "baseline_seed", "naive_textual"]

DEFAULT_ALPHA = 0.5
DEFAULT_GENERALIZED_ALPHA = 0.33
DEFAULT_TAU_TEACHER = 0.04
DEFAULT_TAU_STUDENT = 0.1


class LossConfig(BaseModel):
    """
        损失配置，温度没有默认值，必须显式给出
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau_teacher: float = Field(gt=0)
    tau_student: float = Field(gt=0)
    alpha: float = Field(ge=0.0, le=1.0)
    mode: LossMode = "standard"
    reduction: Literal["mean", "sum"] = "mean"

    @model_validator(mode="before")
    @classmethod
    def _default_alpha(cls, data):
        if isinstance(data, dict) and data.get("alpha") is None:
            alpha = DEFAULT_GENERALIZED_ALPHA if data.get("mode") == "generalized" else DEFAULT_ALPHA
            data = {**data, "alpha": alpha}
        return data


@dataclass
class LossOutput:
    """
        total = Σ weights[k] · components[k]
    """
    total: float
    components: dict
    weights: dict
    grad_student_embeddings: EmbeddingMatrix
    grad_projection: Optional[dict] = None
    score_snapshots: dict = field(default_factory=dict)
    grad_anchors: Optional[EmbeddingMatrix] = None  # 仅文本项：对（投影后）锚点的梯度


def appended_logits(z: EmbeddingMatrix, anchors: EmbeddingMatrix, z_t: EmbeddingMatrix) -> EmbeddingMatrix:
    """
    批量计算每个样本对 V′ = [anchors | z_T^i] 的点积，不显式复制B份锚点

    Returns:
        B×(K+1)，最后一列为 rowdot(z, z_T)
    """
    return np.concatenate([matmul(z, anchors), row_dot(z, z_t)[:, None]], axis=1)


def _logits(z, anchors, self_feature):
    if self_feature is None:
        return matmul(z, anchors)
    return appended_logits(z, anchors, self_feature)


def _student_term(target: ScoreDistribution, z_s: EmbeddingMatrix, anchors: EmbeddingMatrix, cfg: LossConfig,
                  self_feature: Optional[EmbeddingMatrix] = None):
    """
    CE(target, softmax(z_S·anchors′/τ_S)) 及其对 z_S 与 anchors 的梯度
    """
    pred = softmax_rows(_logits(z_s, anchors, self_feature), cfg.tau_student)
    ce = cross_entropy_rows(target, pred, cfg.reduction)
    g = ce_logit_grad(target, pred) * (reduction_scale(z_s.shape[0], cfg.reduction) / cfg.tau_student)
    k = anchors.shape[1]
    grad_z = matmul(g[:, :k], anchors.T)
    if self_feature is not None:
        grad_z = grad_z + g[:, k:] * self_feature
    grad_anchors = matmul(z_s.T, g[:, :k])
    return ce, pred, grad_z, grad_anchors


def _check_pair(z_t, z_s):
    z_t = as_matrix(z_t, "z_t")
    z_s = as_matrix(z_s, "z_s")
    if z_t.shape != z_s.shape:
        raise ShapeError("教师与学生特征形状不一致", z_t.shape, z_s.shape)
    return z_t, z_s


def _visual_anchors(vsb: VisualSemanticsBank, dim: int) -> EmbeddingMatrix:
    if vsb.dim != dim:
        raise ShapeError("特征维度与VSB不一致", (dim,), (vsb.dim,))
    if vsb.initialized_count == 0:
        raise StateError("VSB中没有已初始化的锚点，无法进行视觉空间对齐")
    return vsb.anchors


def _appended_alignment(z_t, z_s, anchors, cfg: LossConfig, names=("s_T-V", "s_S-V")) -> LossOutput:
    target = softmax_rows(appended_logits(z_t, anchors, z_t), cfg.tau_teacher)
    ce, pred, grad_z, _ = _student_term(target, z_s, anchors, cfg, self_feature=z_t)
    return LossOutput(total=ce, components={"visual": ce}, weights={"visual": 1.0},
                      grad_student_embeddings=grad_z,
                      score_snapshots={names[0]: target, names[1]: pred})


def visual_alignment_loss(z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, vsb: VisualSemanticsBank,
                          cfg: LossConfig) -> LossOutput:
    """
    视觉空间对齐损失 L_VIS = CE(s_{T-V}, s_{S-V})

    Args:
        z_t: 教师特征 B×D
        z_s: 学生特征 B×D
        vsb: 视觉语义库，至少有一个已初始化锚点
        cfg: 损失配置

    Returns:
        LossOutput
    """
    z_t, z_s = _check_pair(z_t, z_s)
    return _appended_alignment(z_t, z_s, _visual_anchors(vsb, z_t.shape[1]), cfg)


def _text_anchors(tsb: TextualSemanticsBank, dim: int, projected: Optional[EmbeddingMatrix]) -> EmbeddingMatrix:
    anchors = tsb.anchors if projected is None else as_matrix(projected, "projected anchors")
    if anchors.shape[0] != dim:
        raise ShapeError(f"特征维度 {dim} 与文本锚点维度 {anchors.shape[0]} 不一致，且未配置投影头",
                         (dim,), (anchors.shape[0],))
    return anchors


def textual_alignment_loss(z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, tsb: TextualSemanticsBank,
                           cfg: LossConfig, projected_anchors: Optional[EmbeddingMatrix] = None) -> LossOutput:
    """
    文本空间对齐损失 L_TEX = CE(s_{T-L}, s_{S-L})

    projected_anchors 给定时替代 tsb.anchors（维度不一致时由投影头得到）。
    """
    z_t, z_s = _check_pair(z_t, z_s)
    anchors = _text_anchors(tsb, z_t.shape[1], projected_anchors)
    target = softmax_rows(matmul(z_t, anchors), cfg.tau_teacher)
    ce, pred, grad_z, grad_anchors = _student_term(target, z_s, anchors, cfg)
    return LossOutput(total=ce, components={"textual": ce}, weights={"textual": 1.0},
                      grad_student_embeddings=grad_z,
                      score_snapshots={"s_T-L": target, "s_S-L": pred},
                      grad_anchors=grad_anchors)


def _project(tsb: TextualSemanticsBank, projection, dim: int):
    """
    用投影头把 L (D_text×C) 映射为 D×C；没有投影头时要求维度一致
    """
    if projection is None:
        if tsb.dim != dim:
            raise ConfigurationError(f"文本锚点维度 {tsb.dim} ≠ 特征维度 {dim}，必须配置投影头")
        return tsb.anchors, None
    rows, cache = projection.forward(tsb.anchors.T)
    if rows.shape[1] != dim:
        raise ShapeError("投影头输出维度与特征维度不一致", rows.shape, (tsb.num_categories, dim))
    return rows.T, cache


def _projection_grads(projection, cache, grad_anchors):
    if projection is None:
        return None
    return projection.backward(cache, grad_anchors.T)


def lgd_loss(z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, tsb: TextualSemanticsBank, vsb: VisualSemanticsBank,
             cfg: LossConfig, projection=None) -> LossOutput:
    """
    L_LGD = α L_VIS + (1−α) L_TEX

    带投影头时，投影头只通过学生一侧的 s_{S-L} 获得梯度。
    """
    if cfg.mode != "standard":
        raise ConfigurationError(f"lgd_loss 需要 mode=standard，实际为 {cfg.mode}")
    z_t, z_s = _check_pair(z_t, z_s)
    projected, cache = (None, None) if projection is None else _project(tsb, projection, z_t.shape[1])
    visual = visual_alignment_loss(z_t, z_s, vsb, cfg)
    textual = textual_alignment_loss(z_t, z_s, tsb, cfg, projected_anchors=projected)
    a = cfg.alpha
    return LossOutput(
        total=a * visual.total + (1.0 - a) * textual.total,
        components={"visual": visual.total, "textual": textual.total},
        weights={"visual": a, "textual": 1.0 - a},
        grad_student_embeddings=a * visual.grad_student_embeddings + (1.0 - a) * textual.grad_student_embeddings,
        grad_projection=_projection_grads(projection, cache, (1.0 - a) * textual.grad_anchors),
        score_snapshots={**visual.score_snapshots, **textual.score_snapshots},
    )


def generalized_lgd_loss(z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, tsb: TextualSemanticsBank,
                         vsb: VisualSemanticsBank, projection, cfg: LossConfig) -> LossOutput:
    """
    三个交叉熵项都以 s_{T-V} 为目标

        α·CE(s_{T-V}, s_{S-V}) + α·CE(s_{T-V}, s_{T-L}) + α·CE(s_{T-V}, s_{S-L})

    s_{T-L}、s_{S-L} 在投影后的锚点末尾同样附加 z_T，宽度与 s_{T-V} 一致（C+1）。
    第二项只训练投影头，第三项同时训练学生与投影头。
    """
    if cfg.mode != "generalized":
        raise ConfigurationError(f"generalized_lgd_loss 需要 mode=generalized，实际为 {cfg.mode}")
    z_t, z_s = _check_pair(z_t, z_s)
    projected, cache = _project(tsb, projection, z_t.shape[1])
    visual_anchors = _visual_anchors(vsb, z_t.shape[1])
    scale = reduction_scale(z_t.shape[0], cfg.reduction)

    target = softmax_rows(appended_logits(z_t, visual_anchors, z_t), cfg.tau_teacher)
    ce_sv, s_sv, grad_z_sv, _ = _student_term(target, z_s, visual_anchors, cfg, self_feature=z_t)

    s_tl = softmax_rows(appended_logits(z_t, projected, z_t), cfg.tau_teacher)
    ce_tl = cross_entropy_rows(target, s_tl, cfg.reduction)
    g_tl = ce_logit_grad(target, s_tl) * (scale / cfg.tau_teacher)
    grad_anchors_tl = matmul(z_t.T, g_tl[:, :projected.shape[1]])

    ce_sl, s_sl, grad_z_sl, grad_anchors_sl = _student_term(target, z_s, projected, cfg, self_feature=z_t)

    a = cfg.alpha
    return LossOutput(
        total=a * (ce_sv + ce_tl + ce_sl),
        components={"visual": ce_sv, "teacher_textual": ce_tl, "textual": ce_sl},
        weights={"visual": a, "teacher_textual": a, "textual": a},
        grad_student_embeddings=a * (grad_z_sv + grad_z_sl),
        grad_projection=_projection_grads(projection, cache, a * (grad_anchors_tl + grad_anchors_sl)),
        score_snapshots={"s_T-V": target, "s_S-V": s_sv, "s_T-L": s_tl, "s_S-L": s_sl},
    )


def naive_textual_loss(z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, tsb: TextualSemanticsBank, projection,
                       cfg: LossConfig) -> LossOutput:
    """
    朴素的投影形式：只用 L_TEX，投影后的锚点同时出现在教师目标与学生预测中

    L_TEX = KL(s_{T-L}‖s_{S-L}) + H(s_{T-L})。学生得到的梯度与 L_TEX 相同；
    投影头优化两侧都可导的 KL 部分，锚点失去区分度（s_{T-L}、s_{S-L} 同时趋于均匀）时 KL 为零，
    用于复现维度不一致时的模式坍塌。

    Returns:
        total 为 KL 部分；components 同时给出 L_TEX（权重0）便于与其它模式对照
    """
    z_t, z_s = _check_pair(z_t, z_s)
    anchors, cache = _project(tsb, projection, z_t.shape[1])
    scale = reduction_scale(z_t.shape[0], cfg.reduction)
    target = softmax_rows(matmul(z_t, anchors), cfg.tau_teacher)
    ce, pred, grad_z, grad_anchors = _student_term(target, z_s, anchors, cfg)
    kl = kl_rows(target, pred, cfg.reduction)
    g_target = kl_target_logit_grad(target, pred) * (scale / cfg.tau_teacher)
    grad_anchors = grad_anchors + matmul(z_t.T, g_target)
    return LossOutput(total=kl, components={"textual": ce, "textual_kl": kl},
                      weights={"textual": 0.0, "textual_kl": 1.0},
                      grad_student_embeddings=grad_z,
                      grad_projection=_projection_grads(projection, cache, grad_anchors),
                      score_snapshots={"s_T-L": target, "s_S-L": pred})


def seed_baseline_loss(z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, queue: InstanceQueue,
                       cfg: LossConfig) -> LossOutput:
    """
    SEED基线：在 [队列中的历史教师特征 | z_T] 上对齐教师与学生的相似度分布

    调用方在计算损失之后再把本batch的教师特征入队。
    """
    z_t, z_s = _check_pair(z_t, z_s)
    if len(queue) == 0:
        raise StateError("实例队列为空")
    if queue.dim != z_t.shape[1]:
        raise ShapeError("队列维度与特征维度不一致", (queue.dim,), z_t.shape)
    return _appended_alignment(z_t, z_s, queue.entries().T, cfg, names=("s_T-Q", "s_S-Q"))


def compute_loss(cfg: LossConfig, z_t: EmbeddingMatrix, z_s: EmbeddingMatrix, tsb: TextualSemanticsBank,
                 vsb: VisualSemanticsBank, projection=None, queue: Optional[InstanceQueue] = None) -> LossOutput:
    """
    按 cfg.mode 分派到对应的损失函数
    """
    if cfg.mode == "standard":
        return lgd_loss(z_t, z_s, tsb, vsb, cfg, projection=projection)
    if cfg.mode == "generalized":
        return generalized_lgd_loss(z_t, z_s, tsb, vsb, projection, cfg)
    if cfg.mode == "naive_textual":
        return naive_textual_loss(z_t, z_s, tsb, projection, cfg)
    if cfg.mode == "baseline_seed":
        if queue is None:
            raise ConfigurationError("baseline_seed 模式需要实例队列")
        return seed_baseline_loss(z_t, z_s, queue, cfg)
    raise ConfigurationError(f"未知的损失模式: {cfg.mode}")
