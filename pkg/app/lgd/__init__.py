"""
    Language-Guided Distillation 引擎
"""
