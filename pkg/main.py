#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
lgd 命令行入口

    python main.py gen --C 8 --D 16 --seed 1
    python main.py distill --config desk.json --loss standard
    python main.py suite ablation --seeds 5
"""
from app.cli import cli

if __name__ == "__main__":
    cli(prog_name="lgd")
