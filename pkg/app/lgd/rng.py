"""
    基于计数器的随机数流

    所有随机抽样都通过 (seed, 流名称, 序号) 确定，不依赖调用顺序。
"""
import zlib

import numpy as np

RNG_ALGORITHM = "numpy.Philox4x64-10"


def stream_key(seed: int, name: str) -> int:
    if not 0 <= seed < 2 ** 64:
        raise ValueError(f"seed必须在[0, 2^64)内: {seed}")
    return seed | (zlib.crc32(name.encode("utf-8")) << 64)


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """
    获取一个独立的随机数流

    Args:
        seed: 运行种子
        name: 流名称，如 "world.directions"、"batch"
        index: 流内序号（例如step），映射到Philox计数器的高位

    Returns:
        np.random.Generator
    """
    counter = np.array([0, 0, index, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name), counter=counter))
