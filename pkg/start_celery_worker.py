#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Celery Worker启动脚本
按机器资源决定并发数，每个蒸馏任务独占一个进程
"""

import logging
import os
import platform
import subprocess
import sys
from pathlib import Path

import click
import psutil

from app.core.config import settings
from app.core.log import setup_logging

logger = logging.getLogger(__name__)

# 单个desk规模的蒸馏运行（含评估）大致占用的内存
MEMORY_PER_RUN_GB = 1.0


def get_optimal_worker_config():
    """
    根据系统资源获取Worker配置

    Returns:
        dict: pool 与 concurrency
    """
    memory_gb = psutil.virtual_memory().total / (1024 ** 3)
    cpu_count = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    logger.info(f"系统配置: 内存={memory_gb:.1f}GB, 物理核心数={cpu_count}")

    if platform.system() == "Windows":
        # Windows下prefork不可用
        config = {"pool": "solo", "concurrency": 1}
    else:
        # 每个任务内部的suite线程数由 LGD_THREADS 决定，进程数按剩余核心分配
        threads = max(1, settings.LGD_THREADS)
        by_cpu = max(1, cpu_count // threads)
        by_memory = max(1, int(memory_gb // (MEMORY_PER_RUN_GB * threads)))
        config = {"pool": "prefork", "concurrency": min(by_cpu, by_memory)}

    logger.info(f"选择的Worker配置: {config}")
    return config


def purge_queues():
    """
    清空任务队列（启动参数 --purge 时执行）
    """
    from app.core.celery import celery_app

    try:
        count = celery_app.control.purge()
        logger.info(f"已清空任务队列，丢弃 {count} 个待执行任务")
    except Exception as e:
        logger.warning(f"清空队列失败，继续启动Worker: {e}")


def start_celery_worker(purge: bool = False):
    """
    启动Celery Worker进程
    """
    project_root = Path(__file__).parent
    os.chdir(project_root)
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))

    if purge:
        purge_queues()

    config = get_optimal_worker_config()
    cmd = [
        sys.executable, "-m", "celery",
        "-A", "app.core.celery:celery_app",
        "worker",
        f"--pool={config['pool']}",
        f"--concurrency={config['concurrency']}",
        f"--loglevel={settings.LGD_LOG_LEVEL.lower()}",
    ]
    env = os.environ.copy()
    env.update({
        'PYTHONPATH': str(project_root),
        'PYTHONUNBUFFERED': '1',
    })

    logger.info(f"启动Celery Worker命令: {' '.join(cmd)}")
    process = subprocess.Popen(cmd, env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                               universal_newlines=True, bufsize=1)
    try:
        for line in iter(process.stdout.readline, ''):
            if line:
                print(line.rstrip())
    except KeyboardInterrupt:
        logger.info("收到中断信号，正在关闭Worker...")
        process.terminate()
        process.wait()
        logger.info("Worker已关闭")


def check_dependencies():
    """
    检查Celery应用与任务是否可以导入
    """
    try:
        from app.core.celery import celery_app
        import app.task.distill_task  # noqa: F401  注册任务

        registered = sorted(name for name in celery_app.tasks if name.startswith("lgd."))
        logger.info(f"已注册任务: {registered}")
        return bool(registered)
    except ImportError as e:
        logger.error(f"依赖检查失败: {e}")
        return False


@click.command(help="LGD Celery Worker 启动器")
@click.option("--purge", is_flag=True, help="启动前清空任务队列")
def main(purge: bool):
    setup_logging(settings.LGD_LOG_LEVEL)
    if not check_dependencies():
        logger.error("依赖检查失败，无法启动Worker")
        sys.exit(1)
    try:
        start_celery_worker(purge=purge)
    except KeyboardInterrupt:
        logger.info("用户中断，退出程序")
    except Exception as e:
        logger.error(f"程序异常退出: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
