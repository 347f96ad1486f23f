from app.task.distill_task import distill_task, suite_task


def _overrides(tiny_config):
    return {
        "world": tiny_config.world.model_dump(mode="json"),
        "student": {"hidden_dims": [16]},
        "training": {"epochs": 3, "batch_size": 16, "steps_per_epoch": 4},
        "optimizer": {"warmup_epochs": 1},
        "eval": {"eval_samples": 128, "probe_train_samples": 128, "probe_max_iters": 200},
    }


def test_distill_task_runs_eagerly(tiny_config, tmp_path):
    config = {**_overrides(tiny_config), "output_dir": str(tmp_path / "run")}
    result = distill_task.apply(kwargs={"config": config, "max_steps": 4}).get()
    assert result["steps"] == 4
    assert result["output_dir"] == str(tmp_path / "run")
    assert 0.0 <= result["final"]["zeroshot_accuracy"] <= 1.0


def test_suite_task_rows_are_json_ready(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setattr("app.task.distill_task.OUTPUT_PATH", str(tmp_path))
    result = suite_task.apply(kwargs={"suite": "lgd_vs_seed", "seeds": 1, "config": _overrides(tiny_config)}).get()
    assert result["ok"] is True
    assert {row["arm"] for row in result["rows"]} == {"lgd", "seed"}
    seed_visual = [row for row in result["rows"]
                   if row["arm"] == "seed" and row["metric"] == "mean_kl_teacher_student_visual"]
    assert isinstance(seed_visual[0]["value"], float)
    assert seed_visual[0]["value"] >= 0.0
