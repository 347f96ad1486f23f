"""
    稠密线性代数与信息论基础运算

    所有函数都是纯函数：输入不被修改，可在任意线程中并发调用。
    内部统一使用float64，float32只出现在文件读写边界（见dataio）。
"""
from typing import Literal

import numpy as np
import numpy.typing as npt
from scipy import special

from app.core.exceptions import InputError, ParameterError, ShapeError

# 行为样本（B）或锚点（C），列为特征维度（D）
EmbeddingMatrix = npt.NDArray[np.float64]
# 每行是一个概率分布，行和为1
ScoreDistribution = npt.NDArray[np.float64]

Reduction = Literal["mean", "sum"]

EPS = 1e-12
ZERO_NORM = 1e-12


def as_matrix(x, name: str = "matrix") -> EmbeddingMatrix:
    """
    转换为二维float64矩阵并校验 rows ≥ 1, cols ≥ 1

    Args:
        x: 任意array-like
        name: 出错时报告的名称

    Returns:
        EmbeddingMatrix
    """
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} 必须是非空二维矩阵", m.shape)
    return m


def matmul(a: EmbeddingMatrix, b: EmbeddingMatrix) -> EmbeddingMatrix:
    """
    矩阵乘法

    不走BLAS：einsum在optimize=False时按行优先、内层顺序求和，
    对固定构建可逐位复现。

    Args:
        a: m×k
        b: k×n

    Returns:
        m×n
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul维度不匹配", a.shape, b.shape)
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def row_dot(a: EmbeddingMatrix, b: EmbeddingMatrix) -> npt.NDArray[np.float64]:
    """逐行点积"""
    if a.shape != b.shape:
        raise ShapeError("row_dot形状不匹配", a.shape, b.shape)
    return np.einsum("ij,ij->i", a, b, optimize=False)


def l2_normalize_rows(x: EmbeddingMatrix) -> tuple[EmbeddingMatrix, npt.NDArray[np.bool_]]:
    """
    按行L2归一化

    Args:
        x: 任意矩阵

    Returns:
        (归一化后的矩阵, 零行标记)；范数 < 1e-12 的行原样返回并标记为True
    """
    x = as_matrix(x, "x")
    norms = np.sqrt(row_dot(x, x))
    flags = norms < ZERO_NORM
    safe = np.where(flags, 1.0, norms)
    out = x / safe[:, None]
    out[flags] = x[flags]
    return out, flags


def softmax_rows(logits: EmbeddingMatrix, tau: float) -> ScoreDistribution:
    """
    带温度的按行softmax

    Args:
        logits: B×K
        tau: 温度，必须 > 0

    Returns:
        ScoreDistribution B×K
    """
    if not tau > 0:
        raise ParameterError(f"温度必须为正: tau={tau}")
    logits = as_matrix(logits, "logits")
    if not np.all(np.isfinite(logits)):
        raise InputError("logits含有非有限值")
    # scipy的softmax内部先减去行最大值
    return special.softmax(logits / tau, axis=1)


def _reduce(per_row: npt.NDArray[np.float64], reduction: Reduction) -> float:
    if reduction == "mean":
        return float(np.mean(per_row))
    if reduction == "sum":
        return float(np.sum(per_row))
    raise ParameterError(f"未知的reduction: {reduction}")


def _check_same(p, q):
    if p.shape != q.shape:
        raise ShapeError("分布形状不匹配", p.shape, q.shape)


def cross_entropy_rows(target: ScoreDistribution, pred: ScoreDistribution,
                       reduction: Reduction = "mean") -> float:
    """
    −Σ_j target·log(pred + ε)，按batch求和或求平均

    target视为常数。
    """
    target = as_matrix(target, "target")
    pred = as_matrix(pred, "pred")
    _check_same(target, pred)
    per_row = -np.sum(target * np.log(pred + EPS), axis=1)
    return _reduce(per_row, reduction)


def entropy_rows(p: ScoreDistribution, reduction: Reduction = "mean") -> float:
    p = as_matrix(p, "p")
    return _reduce(-np.sum(p * np.log(p + EPS), axis=1), reduction)


def kl_rows(p: ScoreDistribution, q: ScoreDistribution, reduction: Reduction = "sum") -> float:
    """
    KL(p‖q) = Σ p·log((p+ε)/(q+ε))

    与 cross_entropy_rows、entropy_rows 使用相同的ε，因此
    CE(p, q) = KL(p, q) + H(p) 在舍入误差内精确成立。
    """
    p = as_matrix(p, "p")
    q = as_matrix(q, "q")
    _check_same(p, q)
    per_row = np.sum(p * (np.log(p + EPS) - np.log(q + EPS)), axis=1)
    return _reduce(per_row, reduction)


def kl_per_row(p: ScoreDistribution, q: ScoreDistribution) -> npt.NDArray[np.float64]:
    p = as_matrix(p, "p")
    q = as_matrix(q, "q")
    _check_same(p, q)
    return np.sum(p * (np.log(p + EPS) - np.log(q + EPS)), axis=1)


def argmax_rows(x: EmbeddingMatrix) -> npt.NDArray[np.int64]:
    """按行取最大值下标，并列时取最小下标"""
    x = as_matrix(x, "x")
    return np.argmax(x, axis=1).astype(np.int64)


def ce_logit_grad(target: ScoreDistribution, pred: ScoreDistribution) -> EmbeddingMatrix:
    """
    CE(target, softmax(u)) 对 u 的精确梯度（含ε项）

    r = target / (pred + ε)，∂/∂u_j = pred_j · (Σ_k r_k pred_k − r_j)。
    ε → 0 时退化为 pred − target。
    """
    r = target / (pred + EPS)
    return pred * (np.sum(r * pred, axis=1, keepdims=True) - r)


def kl_target_logit_grad(target: ScoreDistribution, pred: ScoreDistribution) -> EmbeddingMatrix:
    """
    KL(softmax(a)‖pred) 对目标一侧logits a 的精确梯度（含ε项）

    g = log(target+ε) − log(pred+ε) + target/(target+ε)，∂/∂a_j = target_j · (g_j − Σ_k target_k g_k)。
    """
    g = np.log(target + EPS) - np.log(pred + EPS) + target / (target + EPS)
    return target * (g - np.sum(target * g, axis=1, keepdims=True))


def reduction_scale(batch: int, reduction: Reduction) -> float:
    if reduction == "mean":
        return 1.0 / batch
    if reduction == "sum":
        return 1.0
    raise ParameterError(f"未知的reduction: {reduction}")
