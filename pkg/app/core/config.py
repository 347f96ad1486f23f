#!/usr/bin/env python
# -*- coding: utf-8 -*-
# 注意事项：运行参数（RunConfig）不放在这里，见 app/core/run_config.py
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_ignore_empty=True,
        extra="ignore",
    )

    # 本项目配置
    LGD_OUTPUT_PATH: str = "./temp"
    LGD_THREADS: int = 1
    LGD_LOG_LEVEL: str = "INFO"

    # Redis配置
    REDIS_SERVER: str = "127.0.0.1"
    REDIS_PORT: int = 6379
    REDIS_PASSWORD: str = ""


settings = Settings()

OUTPUT_PATH = settings.LGD_OUTPUT_PATH  # 结果文件默认输出路径


def get_thread_cap():
    """
    获取suite并行上限

    Returns:
        int: 至少为1的线程数
    """
    return max(1, Settings().LGD_THREADS)  # 每次重新读取环境变量
