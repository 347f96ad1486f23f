"""
    合成世界：代替真实的CLIP图像编码器与文本编码器

    教师特征就是潜变量本身（单位向量），学生看到的是经过混合矩阵与噪声的原始输入，
    文本锚点是对类别方向的扰动（模拟图文模态间隙）。
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import GenerationError, UnknownCategoryError
from app.lgd import rng as rng_streams
from app.lgd.banks import TextualSemanticsBank, subset_tsb
from app.lgd.numerics import EmbeddingMatrix, l2_normalize_rows, matmul

logger = logging.getLogger(__name__)

MAX_CONDITION = 100.0
ANGLE_TOL_DEG = 1e-9


class WorldParams(BaseModel):
    """
        合成世界参数，(参数, seed) 唯一确定整个世界
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_categories: int = Field(default=16, ge=2)
    dim: int = Field(default=16, ge=2)
    input_dim: int = Field(default=32, ge=2)
    text_dim: Optional[int] = Field(default=None, ge=2)
    text_offset_sigma: float = Field(default=0.1, ge=0.0)
    sample_noise_sigma: float = Field(default=0.15, ge=0.0)
    input_noise_sigma: float = Field(default=0.01, ge=0.0)
    min_angle_deg: float = Field(default=30.0, ge=0.0, le=180.0)
    max_retries: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    category_names: Optional[list[str]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.input_dim < self.dim:
            raise ValueError(f"input_dim ({self.input_dim}) 必须 ≥ dim ({self.dim})")
        if self.category_names is not None and len(self.category_names) != self.num_categories:
            raise ValueError("category_names 数量必须等于 num_categories")
        return self

    @property
    def resolved_text_dim(self) -> int:
        return self.text_dim or self.dim

    def names(self) -> list[str]:
        return list(self.category_names or [f"cat_{i}" for i in range(self.num_categories)])


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    params: WorldParams
    category_directions: EmbeddingMatrix  # C×D
    mixing_map: EmbeddingMatrix  # d_in×D
    text_lift: Optional[EmbeddingMatrix] = None  # D_text×D，列正交；text_dim == dim 时为None

    @property
    def num_categories(self) -> int:
        return self.params.num_categories

    @property
    def dim(self) -> int:
        return self.params.dim

    @property
    def seed(self) -> int:
        return self.params.seed

    def to_spec(self) -> dict:
        """世界描述文件内容：全部参数 + seed + RNG算法标识"""
        return {"params": self.params.model_dump(mode="json"), "seed": self.seed,
                "rng_algorithm": rng_streams.RNG_ALGORITHM}


def min_pairwise_angle_deg(directions: EmbeddingMatrix) -> float:
    cos = np.clip(matmul(directions, directions.T), -1.0, 1.0)
    iu = np.triu_indices(directions.shape[0], k=1)
    return float(np.degrees(np.arccos(np.max(cos[iu]))))


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> EmbeddingMatrix:
    """rows×cols 的随机正交行（rows ≤ cols）"""
    q, r = np.linalg.qr(rng.standard_normal((cols, rows)))
    return (q * np.sign(np.diag(r))).T


def _sample_directions(params: WorldParams) -> EmbeddingMatrix:
    c, d = params.num_categories, params.dim
    floor = params.min_angle_deg - ANGLE_TOL_DEG
    for attempt in range(params.max_retries):
        g = rng_streams.stream(params.seed, "world.directions", attempt)
        if params.min_angle_deg >= 90.0 and c <= d:
            # 90°以上的下界靠拒绝采样几乎不可能命中，直接取随机正交方向
            directions = _orthonormal(g, c, d)
        else:
            directions, _ = l2_normalize_rows(g.standard_normal((c, d)))
        if min_pairwise_angle_deg(directions) >= floor:
            logger.debug(f"类别方向在第 {attempt + 1} 次采样满足最小夹角")
            return directions
    raise GenerationError(f"{params.max_retries} 次重采样后仍无法满足最小夹角 {params.min_angle_deg}° "
                          f"(C={c}, D={d})")


def _sample_mixing_map(params: WorldParams) -> EmbeddingMatrix:
    for attempt in range(params.max_retries):
        g = rng_streams.stream(params.seed, "world.mixing", attempt)
        m = g.standard_normal((params.input_dim, params.dim)) / math.sqrt(params.dim)
        if np.linalg.cond(m) <= MAX_CONDITION:
            return m
    raise GenerationError(f"{params.max_retries} 次重采样后混合矩阵条件数仍大于 {MAX_CONDITION}")


def gen_world(params: WorldParams) -> SyntheticWorld:
    """
    生成合成世界

    Args:
        params: 世界参数

    Returns:
        SyntheticWorld
    """
    directions = _sample_directions(params)
    mixing = _sample_mixing_map(params)
    lift = None
    if params.resolved_text_dim != params.dim:
        g = rng_streams.stream(params.seed, "world.text_lift")
        if params.resolved_text_dim > params.dim:
            lift = _orthonormal(g, params.dim, params.resolved_text_dim).T
        else:
            lift = g.standard_normal((params.resolved_text_dim, params.dim)) / math.sqrt(params.dim)
    logger.info(f"生成合成世界: C={params.num_categories}, D={params.dim}, d_in={params.input_dim}, "
                f"D_text={params.resolved_text_dim}, seed={params.seed}")
    return SyntheticWorld(params=params, category_directions=directions, mixing_map=mixing, text_lift=lift)


def sample_batch(world: SyntheticWorld, batch_size: int, rng: np.random.Generator):
    """
    抽取一个batch

    Args:
        world: 合成世界
        batch_size: B
        rng: 该batch专用的随机数流

    Returns:
        (inputs B×d_in, teacher_embeddings B×D, true_labels)；标签只用于评估
    """
    p = world.params
    labels = rng.integers(0, p.num_categories, size=batch_size)
    latent = world.category_directions[labels] + p.sample_noise_sigma * rng.standard_normal((batch_size, p.dim))
    teacher, _ = l2_normalize_rows(latent)
    inputs = matmul(teacher, world.mixing_map.T)
    inputs = inputs + p.input_noise_sigma * rng.standard_normal(inputs.shape)
    return inputs, teacher, labels.astype(np.int64)


def sample_split(world: SyntheticWorld, size: int, seed: int, name: str):
    """按名称抽取一个固定的数据划分（如评估集）"""
    return sample_batch(world, size, rng_streams.stream(seed, f"split.{name}"))


def gen_text_anchors(world: SyntheticWorld, name_subset: Optional[Sequence[str]] = None,
                     category_names: Optional[Sequence[str]] = None) -> TextualSemanticsBank:
    """
    生成文本锚点 anchor_i = normalize(direction_i + N(0, σ_text))

    锚点对每个世界只生成一次：子集只是从完整TSB中挑选列。
    text_dim ≠ dim 时锚点再经固定的随机线性映射升（降）维。

    Args:
        world: 合成世界
        name_subset: 可选的类别子集
        category_names: 覆盖世界自带的类别名（用于构造"错配"的TSB）

    Returns:
        TextualSemanticsBank
    """
    p = world.params
    g = rng_streams.stream(p.seed, "world.text")
    perturbed = world.category_directions + p.text_offset_sigma * g.standard_normal(world.category_directions.shape)
    rows, _ = l2_normalize_rows(perturbed)
    if world.text_lift is not None:
        rows, _ = l2_normalize_rows(matmul(rows, world.text_lift.T))
    names = list(category_names) if category_names is not None else p.names()
    tsb = TextualSemanticsBank.from_rows(rows, names, source_tag=f"synthetic:seed={p.seed}")
    if name_subset is not None:
        tsb = subset_tsb(tsb, name_subset)
    return tsb


def restrict_world(world: SyntheticWorld, names: Sequence[str]) -> SyntheticWorld:
    """
    只保留给定类别的世界（混合矩阵、文本映射不变），用于文本控制实验中的子任务

    Raises:
        UnknownCategoryError: 类别名不存在
    """
    all_names = world.params.names()
    missing = [n for n in names if n not in all_names]
    if missing:
        raise UnknownCategoryError(missing)
    idx = [all_names.index(n) for n in names]
    params = WorldParams.model_validate({**world.params.model_dump(), "num_categories": len(idx),
                                         "category_names": list(names)})
    return SyntheticWorld(params=params, category_directions=world.category_directions[idx],
                          mixing_map=world.mixing_map, text_lift=world.text_lift)
