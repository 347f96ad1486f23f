"""
    文本语义库（TSB）、视觉语义库（VSB）与语言引导知识聚合（LGKA）

    锚点矩阵统一按列存放：anchors 形状为 D×C，第 i 列对应第 i 个类别。
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import numpy.typing as npt

from app.core.exceptions import InputError, ParameterError, ShapeError, StateError, UnknownCategoryError
from app.lgd.numerics import EmbeddingMatrix, ZERO_NORM, argmax_rows, as_matrix, l2_normalize_rows, matmul

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9
DEFAULT_MOMENTUM = 0.999
DESK_QUEUE_SIZE = 1024
PAPER_QUEUE_SIZE = 65536

VsbInit = Literal["replace", "random"]


def _column_norms(anchors: EmbeddingMatrix) -> npt.NDArray[np.float64]:
    return np.sqrt(np.sum(anchors * anchors, axis=0))


@dataclass(frozen=True, eq=False)
class TextualSemanticsBank:
    """
        文本语义库 L ∈ R^{D×C}，构造后不可修改
    """
    anchors: EmbeddingMatrix
    category_names: tuple
    source_tag: str = ""

    def __post_init__(self):
        anchors = np.array(as_matrix(self.anchors, "tsb.anchors"), copy=True)
        names = tuple(self.category_names)
        if anchors.shape[1] < 2:
            raise InputError(f"TSB至少需要2个类别，实际为 {anchors.shape[1]}")
        if len(names) != anchors.shape[1]:
            raise InputError(f"类别名数量 {len(names)} 与锚点数量 {anchors.shape[1]} 不一致")
        if any(not n for n in names):
            raise InputError("类别名不能为空")
        if len(set(names)) != len(names):
            raise InputError("类别名必须唯一")
        norms = _column_norms(anchors)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise InputError(f"TSB锚点必须为单位向量, 最大偏差 {np.max(np.abs(norms - 1.0)):.3e}")
        anchors.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "category_names", names)

    @classmethod
    def from_rows(cls, rows: EmbeddingMatrix, category_names: Sequence[str], source_tag: str = ""):
        """由 C×D 的行矩阵构造（文件与合成世界都按行给出锚点）"""
        return cls(anchors=as_matrix(rows).T, category_names=tuple(category_names), source_tag=source_tag)

    @property
    def dim(self) -> int:
        return self.anchors.shape[0]

    @property
    def num_categories(self) -> int:
        return self.anchors.shape[1]

    def index_of(self, name: str) -> int:
        try:
            return self.category_names.index(name)
        except ValueError:
            raise UnknownCategoryError([name]) from None


class VisualSemanticsBank:
    """
        视觉语义库 V ∈ R^{D×C}，由教师特征的类别中心动量更新

        未初始化的锚点列恒为零向量；所有读写都经过同一把锁，
        保证读取不会看到更新到一半的状态。
    """

    def __init__(self, anchors: EmbeddingMatrix, initialized, momentum: float = DEFAULT_MOMENTUM):
        anchors = np.array(as_matrix(anchors, "vsb.anchors"), copy=True)
        initialized = np.array(initialized, dtype=bool)
        if initialized.shape != (anchors.shape[1],):
            raise ShapeError("初始化标记与锚点数量不一致", initialized.shape, anchors.shape)
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"动量系数必须在[0, 1)内: m={momentum}")
        zero_cols = _column_norms(anchors) < ZERO_NORM
        if np.any(zero_cols == initialized):
            raise InputError("锚点列为零当且仅当该类别未初始化")
        self._anchors = anchors
        self._initialized = initialized
        self.momentum = float(momentum)
        self._lock = threading.Lock()

    @classmethod
    def create(cls, num_categories: int, dim: int, momentum: float = DEFAULT_MOMENTUM,
               init: VsbInit = "replace", rng: Optional[np.random.Generator] = None):
        """
        创建与TSB配对的空VSB

        Args:
            num_categories: 类别数 C
            dim: 特征维度 D
            momentum: 动量系数 m
            init: "replace" 首次出现时直接替换；"random" 从随机单位向量开始动量更新（消融）
            rng: init="random" 时使用的随机数流

        Returns:
            VisualSemanticsBank
        """
        if init == "replace":
            return cls(np.zeros((dim, num_categories)), np.zeros(num_categories, dtype=bool), momentum)
        if init == "random":
            if rng is None:
                raise ParameterError("init='random' 需要提供rng")
            cols, _ = l2_normalize_rows(rng.standard_normal((num_categories, dim)))
            return cls(cols.T, np.ones(num_categories, dtype=bool), momentum)
        raise ParameterError(f"未知的VSB初始化方式: {init}")

    @property
    def dim(self) -> int:
        return self._anchors.shape[0]

    @property
    def num_categories(self) -> int:
        return self._anchors.shape[1]

    @property
    def anchors(self) -> EmbeddingMatrix:
        with self._lock:
            view = self._anchors.copy()
        view.setflags(write=False)
        return view

    @property
    def initialized(self) -> npt.NDArray[np.bool_]:
        with self._lock:
            return self._initialized.copy()

    @property
    def initialized_count(self) -> int:
        with self._lock:
            return int(np.count_nonzero(self._initialized))

    def snapshot(self) -> "VisualSemanticsBank":
        with self._lock:
            return VisualSemanticsBank(self._anchors, self._initialized, self.momentum)

    def apply_update(self, categories, centroids: EmbeddingMatrix):
        """在锁内完成一次动量更新，仅供 momentum_update 调用"""
        with self._lock:
            for i, centroid in zip(categories, centroids):
                if self._initialized[i]:
                    updated = self.momentum * self._anchors[:, i] + (1.0 - self.momentum) * centroid
                else:
                    updated = centroid.copy()
                norm = np.linalg.norm(updated)
                if norm < ZERO_NORM:
                    # 中心为零向量时不更新，保持"零列当且仅当未初始化"
                    logger.warning(f"类别 {i} 的更新结果范数为零，跳过")
                    continue
                self._anchors[:, i] = updated / norm
                self._initialized[i] = True


@dataclass
class LgkaBatchResult:
    """
        一个batch的LGKA中间结果：分类结果 θ 与各出现类别的中心 z_C
    """
    assignments: npt.NDArray[np.int64]
    centroids: EmbeddingMatrix
    present_categories: npt.NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


class InstanceQueue:
    """
        SEED基线使用的FIFO实例队列，容量 K
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ParameterError(f"队列容量必须 ≥ 1: {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._buffer = np.zeros((capacity, dim))
        self._size = 0
        self._head = 0  # 下一个写入位置
        self._lock = threading.Lock()

    def __len__(self):
        return self._size

    @classmethod
    def random(cls, capacity: int, dim: int, rng: np.random.Generator) -> "InstanceQueue":
        """以 capacity 个随机单位向量填满的队列，训练开始后逐batch被教师特征替换"""
        queue = cls(capacity, dim)
        rows, _ = l2_normalize_rows(rng.standard_normal((capacity, dim)))
        queue.enqueue(rows)
        return queue

    def enqueue(self, rows: EmbeddingMatrix):
        rows = as_matrix(rows, "queue rows")
        if rows.shape[1] != self.dim:
            raise ShapeError("入队特征维度不匹配", rows.shape, (self.capacity, self.dim))
        with self._lock:
            for row in rows:
                self._buffer[self._head] = row
                self._head = (self._head + 1) % self.capacity
                self._size = min(self._size + 1, self.capacity)

    def entries(self) -> EmbeddingMatrix:
        """按入队顺序（最旧在前）返回 K×D"""
        with self._lock:
            if self._size < self.capacity:
                return self._buffer[:self._size].copy()
            return np.concatenate([self._buffer[self._head:], self._buffer[:self._head]])


def classify_by_anchors(z: EmbeddingMatrix, anchors: EmbeddingMatrix) -> npt.NDArray[np.int64]:
    """
    最近锚点分类：θ = argmax(z · anchors)

    Args:
        z: B×D 特征，不允许零范数行
        anchors: D×C

    Returns:
        每个样本最相似锚点的下标
    """
    z = as_matrix(z, "z")
    anchors = as_matrix(anchors, "anchors")
    if z.shape[1] != anchors.shape[0]:
        raise ShapeError("特征维度与锚点维度不匹配", z.shape, anchors.shape)
    norms = np.linalg.norm(z, axis=1)
    zero_rows = np.flatnonzero(norms < ZERO_NORM)
    if zero_rows.size:
        raise InputError(f"第 {int(zero_rows[0])} 行特征范数为零，无法分类")
    return argmax_rows(matmul(z, anchors))


def classify_by_tsb(z: EmbeddingMatrix, tsb: TextualSemanticsBank) -> npt.NDArray[np.int64]:
    return classify_by_anchors(z, tsb.anchors)


def batch_centroids(z: EmbeddingMatrix, assignments, num_categories: int) -> LgkaBatchResult:
    """
    类别中心：z_C^i = mean(z[θ = i])，只为batch中出现过的类别计算中心

    Args:
        z: B×D
        assignments: 长度为B的类别下标
        num_categories: C，用于检查越界

    Returns:
        LgkaBatchResult
    """
    z = as_matrix(z, "z")
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (z.shape[0],):
        raise ShapeError("分类结果长度与batch不一致", assignments.shape, z.shape)
    bad = np.flatnonzero((assignments < 0) | (assignments >= num_categories))
    if bad.size:
        raise InputError(f"第 {int(bad[0])} 个样本的类别 {int(assignments[bad[0]])} 越界 [0, {num_categories - 1}]")
    present = np.unique(assignments)
    centroids = np.stack([z[assignments == i].mean(axis=0) for i in present])
    return LgkaBatchResult(assignments=assignments, centroids=centroids, present_categories=present)


def momentum_update(vsb: VisualSemanticsBank, batch: LgkaBatchResult) -> VisualSemanticsBank:
    """
    动量更新：V^i ← m V^i + (1−m) z_C^i；首次出现时 V^i ← z_C^i

    更新后的锚点重新归一化为单位长度，未出现的类别保持不变。

    Returns:
        原地更新后的vsb
    """
    if batch.centroids.shape[1] != vsb.dim:
        raise ShapeError("中心维度与VSB不一致", batch.centroids.shape, (vsb.dim, vsb.num_categories))
    vsb.apply_update(batch.present_categories, batch.centroids)
    return vsb


def lgka_step(z_t: EmbeddingMatrix, classifier_anchors: EmbeddingMatrix,
              vsb: VisualSemanticsBank) -> LgkaBatchResult:
    """
    对一个batch的教师特征执行完整的LGKA（分类、求中心、动量更新）
    """
    assignments = classify_by_anchors(z_t, classifier_anchors)
    result = batch_centroids(z_t, assignments, vsb.num_categories)
    momentum_update(vsb, result)
    return result


def append_teacher_anchor(vsb: VisualSemanticsBank, z_t_row) -> EmbeddingMatrix:
    """
    构造单个样本的 V′ = [V^0, …, V^{C−1}, z_T^i]

    未初始化的列以零列参与计算。训练中不逐样本构造V′，
    而是由 losses.appended_logits 批量计算 [z·V | rowdot(z, z_T)]。
    """
    z_t_row = np.asarray(z_t_row, dtype=np.float64).reshape(-1)
    anchors = vsb.anchors
    if z_t_row.shape[0] != anchors.shape[0]:
        raise ShapeError("教师特征维度与VSB不一致", z_t_row.shape, anchors.shape)
    return np.concatenate([anchors, z_t_row[:, None]], axis=1)


def subset_tsb(tsb: TextualSemanticsBank, names: Sequence[str]) -> TextualSemanticsBank:
    """
    按给定类别名（保持请求顺序）截取TSB；配对的VSB需要重新创建

    Raises:
        UnknownCategoryError: 列出所有不存在的类别名
    """
    missing = [n for n in names if n not in tsb.category_names]
    if missing:
        raise UnknownCategoryError(missing)
    columns = [tsb.category_names.index(n) for n in names]
    tag = f"{tsb.source_tag}[subset:{len(columns)}]"
    return TextualSemanticsBank(anchors=tsb.anchors[:, columns], category_names=tuple(names), source_tag=tag)
