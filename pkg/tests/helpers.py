"""测试公用工具：随机单位向量与中心差分梯度"""
import numpy as np

from app.lgd.numerics import l2_normalize_rows

FD_STEP = 1e-6


def unit_rows(rng, rows, cols):
    out, _ = l2_normalize_rows(rng.standard_normal((rows, cols)))
    return out


def unit_columns(rng, dim, count):
    return unit_rows(rng, count, dim).T


def finite_difference(func, params: dict, step: float = FD_STEP) -> dict:
    """对参数字典中每个元素做中心差分，func(params) 返回标量"""
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            g[idx] = (func(plus) - func(minus)) / (2 * step)
        grads[name] = g
    return grads


def relative_error(analytic: dict, numeric: dict) -> float:
    a = np.concatenate([analytic[k].ravel() for k in sorted(numeric)])
    n = np.concatenate([numeric[k].ravel() for k in sorted(numeric)])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))
