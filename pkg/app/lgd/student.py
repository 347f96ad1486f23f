"""
    学生网络（输出单位归一化的MLP）、投影头与SGD优化器

    参数统一以 {名称: ndarray} 的字典保存，名称形如 "layers.0.weight"；
    权重形状为 (in, out)，前向为 h @ W + b。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from app.core.exceptions import InputError, ParameterError, ShapeError, StateError, TrainingError
from app.lgd.numerics import EmbeddingMatrix, as_matrix, l2_normalize_rows, matmul, row_dot

logger = logging.getLogger(__name__)

SGD_MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
BASE_LR = 0.03
WARMUP_EPOCHS = 5


@dataclass
class ForwardCache:
    version: int
    layer_inputs: list
    pre_activations: list
    output: Optional[EmbeddingMatrix] = None
    norms: Optional[np.ndarray] = None
    zero_rows: Optional[np.ndarray] = None


class DenseStack:
    """
        全连接层堆叠，层间为ReLU，可选对输出按行单位归一化
    """

    def __init__(self, params: dict, normalize_output: bool):
        self.num_layers = len(params) // 2
        if self.num_layers < 1 or set(params) != set(self._names(self.num_layers)):
            raise ShapeError(f"参数名不完整: {sorted(params)}")
        for i in range(self.num_layers):
            w, b = params[f"layers.{i}.weight"], params[f"layers.{i}.bias"]
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"第 {i} 层权重与偏置形状不一致", w.shape, b.shape)
            if i and params[f"layers.{i - 1}.weight"].shape[1] != w.shape[0]:
                raise ShapeError(f"第 {i} 层输入维度不匹配", params[f"layers.{i - 1}.weight"].shape, w.shape)
        self._params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
        self.normalize_output = normalize_output
        self.version = 0

    @staticmethod
    def _names(num_layers: int):
        for i in range(num_layers):
            yield f"layers.{i}.weight"
            yield f"layers.{i}.bias"

    @staticmethod
    def init_params(layer_dims: Sequence[int], rng: np.random.Generator, output_std: Optional[float] = None) -> dict:
        """
        He初始化权重、零偏置；output_std 给定时最后一层权重改用该标准差
        """
        params = {}
        last = len(layer_dims) - 2
        for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            std = output_std if (i == last and output_std is not None) else math.sqrt(2.0 / fan_in)
            params[f"layers.{i}.weight"] = rng.normal(0.0, std, size=(fan_in, fan_out))
            params[f"layers.{i}.bias"] = np.zeros(fan_out)
        return params

    @property
    def input_dim(self) -> int:
        return self._params["layers.0.weight"].shape[0]

    @property
    def output_dim(self) -> int:
        return self._params[f"layers.{self.num_layers - 1}.weight"].shape[1]

    def parameters(self) -> dict:
        return {k: v.copy() for k, v in self._params.items()}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self._params.values()))

    def set_parameters(self, params: dict):
        for name, value in params.items():
            if name not in self._params or self._params[name].shape != np.shape(value):
                raise ShapeError(f"参数 {name} 形状不匹配", self._params.get(name, np.empty(0)).shape, np.shape(value))
        for name, value in params.items():
            self._params[name] = np.array(value, dtype=np.float64, copy=True)
        self.version += 1  # 之前的前向缓存全部失效

    def forward(self, inputs: EmbeddingMatrix):
        """
        前向传播

        Args:
            inputs: B×d_in

        Returns:
            (输出 B×D, ForwardCache)
        """
        h = as_matrix(inputs, "inputs")
        if h.shape[1] != self.input_dim:
            raise ShapeError("输入维度不匹配", h.shape, self._params["layers.0.weight"].shape)
        cache = ForwardCache(version=self.version, layer_inputs=[], pre_activations=[])
        for i in range(self.num_layers):
            cache.layer_inputs.append(h)
            a = matmul(h, self._params[f"layers.{i}.weight"]) + self._params[f"layers.{i}.bias"]
            cache.pre_activations.append(a)
            h = np.maximum(a, 0.0) if i < self.num_layers - 1 else a
        if self.normalize_output:
            out, zero_rows = l2_normalize_rows(h)
            cache.norms = np.sqrt(row_dot(h, h))
            cache.zero_rows = zero_rows
            if zero_rows.any():
                logger.debug(f"{int(zero_rows.sum())} 行输出范数为零")
            h = out
        cache.output = h
        return h, cache

    def backward(self, cache: ForwardCache, grad_out: EmbeddingMatrix) -> dict:
        """
        反向传播，包含输出归一化的Jacobian (I − y yᵀ)/‖h‖

        Args:
            cache: 与当前参数匹配的前向缓存
            grad_out: 对输出的梯度 B×D

        Returns:
            与 parameters() 同名同形的梯度字典
        """
        if cache.version != self.version:
            raise StateError(f"前向缓存已过期 (cache v{cache.version}, 参数 v{self.version})")
        g = as_matrix(grad_out, "grad_out")
        if g.shape != cache.output.shape:
            raise ShapeError("输出梯度形状不匹配", g.shape, cache.output.shape)
        if self.normalize_output:
            y = cache.output
            norms = np.where(cache.zero_rows, 1.0, cache.norms)
            g = (g - y * row_dot(y, g)[:, None]) / norms[:, None]
            g[cache.zero_rows] = 0.0  # 零输出处不可导
        grads = {}
        for i in reversed(range(self.num_layers)):
            grads[f"layers.{i}.weight"] = matmul(cache.layer_inputs[i].T, g)
            grads[f"layers.{i}.bias"] = g.sum(axis=0)
            if i > 0:
                g = matmul(g, self._params[f"layers.{i}.weight"].T) * (cache.pre_activations[i - 1] > 0)
        return grads


class StudentNet(DenseStack):
    """
        学生编码器：d_in → hidden… → D，输出 z_S 单位归一化
    """

    def __init__(self, params: dict):
        super().__init__(params, normalize_output=True)

    @classmethod
    def create(cls, input_dim: int, hidden_dims: Sequence[int], output_dim: int, rng: np.random.Generator):
        return cls(cls.init_params([input_dim, *hidden_dims, output_dim], rng))


class ProjectionHead(DenseStack):
    """
        可学习投影头：把文本锚点从 D_text 映射到 D，输出不归一化
    """

    def __init__(self, params: dict):
        super().__init__(params, normalize_output=False)

    @classmethod
    def create(cls, text_dim: int, output_dim: int, rng: np.random.Generator, hidden_dims: Sequence[int] = ()):
        # 最后一层标准差取 1/sqrt(D)，使单位输入的投影范数约为1
        params = cls.init_params([text_dim, *hidden_dims, output_dim], rng, output_std=1.0 / math.sqrt(output_dim))
        return cls(params)


@dataclass
class CosineSchedule:
    """
        线性预热 + 余弦衰减
    """
    base_lr: float = BASE_LR
    warmup_epochs: float = WARMUP_EPOCHS
    total_epochs: float = 30

    def __post_init__(self):
        if not self.total_epochs > self.warmup_epochs >= 0:
            raise ParameterError(f"总epoch数必须大于预热epoch数: {self.total_epochs} ≤ {self.warmup_epochs}")

    @property
    def warmup_fraction(self) -> float:
        return self.warmup_epochs / self.total_epochs


def lr_at(schedule: CosineSchedule, t: float) -> float:
    """
    训练进度 t ∈ [0, 1] 处的学习率

    预热段从0线性升到base_lr；之后 0.5·base_lr·(1 + cos(π·(t−w)/(1−w)))。
    """
    t = min(max(t, 0.0), 1.0)
    w = schedule.warmup_fraction
    if t < w:
        return schedule.base_lr * t / w
    return 0.5 * schedule.base_lr * (1.0 + math.cos(math.pi * (t - w) / (1.0 - w)))


@dataclass
class OptimizerState:
    """
        SGD动量缓冲，形状与参数一一对应
    """
    momentum: float = SGD_MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    schedule: CosineSchedule = field(default_factory=CosineSchedule)
    buffers: dict = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def decays(name: str) -> bool:
        """权重衰减只作用于权重，不作用于偏置"""
        return name.endswith(".weight")


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> dict:
    """
    一次SGD动量更新

        buffer ← momentum·buffer + grad + wd·param
        param  ← param − lr·buffer

    Args:
        params: 参数字典
        grads: 同名梯度
        state: 优化器状态，原地更新动量缓冲与step
        lr: 本步学习率

    Returns:
        更新后的新参数字典
    """
    for name, p in params.items():
        if name not in grads:
            raise InputError(f"缺少参数 {name} 的梯度")
        if grads[name].shape != p.shape:
            raise ShapeError(f"参数 {name} 的梯度形状不匹配", grads[name].shape, p.shape)
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"参数 {name} 的梯度含非有限值", state.step)
    updated = {}
    for name, p in params.items():
        d = grads[name] + state.weight_decay * p if state.decays(name) else grads[name]
        buf = state.buffers.get(name)
        buf = d.copy() if buf is None else state.momentum * buf + d
        state.buffers[name] = buf
        updated[name] = p - lr * buf
    state.step += 1
    return updated
