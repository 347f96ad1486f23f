import logging
import sys
from pathlib import Path

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = "INFO", log_file: Path = None):
    """
    配置根日志

    Args:
        level: 日志级别
        log_file: 可选的日志文件路径，通常位于运行输出目录下

    Returns:
        None
    """
    handlers = [logging.StreamHandler(sys.stderr)]  # stdout留给命令输出
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)
