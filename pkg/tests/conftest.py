import os

import hypothesis
import numpy as np
import pytest

from app.core.run_config import resolve_run_config
from app.lgd.synthworld import WorldParams, gen_text_anchors, gen_world

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行多seed的方向性实验")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_params():
    return WorldParams(num_categories=4, dim=6, input_dim=8, seed=3)


@pytest.fixture
def tiny_world(tiny_params):
    return gen_world(tiny_params)


@pytest.fixture
def tiny_tsb(tiny_world):
    return gen_text_anchors(tiny_world)


@pytest.fixture
def tiny_config(tiny_params, tmp_path):
    """几秒内可以跑完的运行配置"""
    return resolve_run_config("desk", {
        "world": tiny_params.model_dump(mode="json"),
        "student": {"hidden_dims": [16]},
        "training": {"epochs": 3, "batch_size": 16, "steps_per_epoch": 4},
        "optimizer": {"warmup_epochs": 1},
        "eval": {"eval_samples": 128, "probe_train_samples": 128, "probe_max_iters": 200},
        "output_dir": str(tmp_path / "run"),
    })
