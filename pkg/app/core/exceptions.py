"""
    引擎异常定义
"""


class LgdError(Exception):
    """
        所有引擎错误的基类
    """


class ShapeError(LgdError, ValueError):
    """
        矩阵形状不匹配
    """

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class ParameterError(LgdError, ValueError):
    pass


class InputError(LgdError, ValueError):
    pass


class StateError(LgdError, RuntimeError):
    pass


class UnknownCategoryError(LgdError, KeyError):
    """
        请求的类别名不在TSB中
    """

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"未知类别: {', '.join(self.missing)}")

    def __str__(self):
        return self.args[0]


class ConfigurationError(LgdError, ValueError):
    pass


class GenerationError(LgdError, RuntimeError):
    pass


class EvalError(LgdError, ValueError):
    pass


class TrainingError(LgdError, RuntimeError):
    """
        训练过程错误，携带出错的step
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class NumericAbort(TrainingError):
    """
        loss出现非有限值，携带得分分布快照用于诊断
    """

    def __init__(self, message: str, step: int, snapshot: dict = None):
        super().__init__(message, step)
        self.snapshot = snapshot or {}


class EmbeddingFormatError(LgdError, ValueError):
    pass


class BadMagicError(EmbeddingFormatError):
    pass


class UnsupportedVersionError(EmbeddingFormatError):
    pass


class UnsupportedDtypeError(EmbeddingFormatError):
    pass


class ChecksumError(EmbeddingFormatError):
    pass


class TruncatedFileError(EmbeddingFormatError):
    pass
