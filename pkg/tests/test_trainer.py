import numpy as np
import pytest

from app.core.exceptions import ConfigurationError, NumericAbort
from app.lgd import trainer as trainer_module
from app.lgd.synthworld import WorldParams, gen_text_anchors, gen_world, sample_split
from app.lgd.trainer import DatasetSource, WorldSource, build_artifacts, train_distillation


def _source(config, world):
    return WorldSource(world, config.training.batch_size, config.seed)


def test_zero_steps_returns_initial_state(tiny_config, tiny_world, tiny_tsb):
    art = train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb, max_steps=0)
    assert art.step == 0
    assert art.metrics == []
    assert art.vsb.initialized_count == 0


def test_training_is_deterministic(tiny_config, tiny_world, tiny_tsb):
    a = train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb)
    b = train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb)
    assert a.metrics == b.metrics
    for name, value in a.student.parameters().items():
        np.testing.assert_array_equal(b.student.parameters()[name], value)
    np.testing.assert_array_equal(a.vsb.anchors, b.vsb.anchors)


def test_metrics_rows(tiny_config, tiny_world, tiny_tsb):
    art = train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb)
    assert len(art.metrics) == tiny_config.total_steps
    first, last = art.metrics[0], art.metrics[-1]
    assert first["step"] == 0 and first["lr"] == 0.0
    assert last["epoch"] == tiny_config.training.epochs - 1
    assert {"loss_total", "loss_visual", "loss_textual", "component.visual"} <= set(first)
    assert all(np.isfinite(row["loss_total"]) for row in art.metrics)
    assert 1 <= last["vsb_initialized_count"] <= tiny_tsb.num_categories


def test_zero_learning_rate_keeps_student(tiny_config, tiny_world, tiny_tsb):
    config = tiny_config.with_updates(optimizer={"base_lr": 0.0})
    source = _source(config, tiny_world)
    initial = build_artifacts(config, source, tiny_tsb).student.parameters()
    art = train_distillation(config, source, tiny_tsb)
    for name, value in initial.items():
        np.testing.assert_array_equal(art.student.parameters()[name], value)
    assert art.vsb.initialized_count > 0


def test_max_steps_then_resume_matches_full_run(tiny_config, tiny_world, tiny_tsb):
    full = train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb)
    part = train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb, max_steps=5)
    resumed = train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb, resume=part)
    assert resumed.step == full.step
    for name, value in full.student.parameters().items():
        np.testing.assert_array_equal(resumed.student.parameters()[name], value)


def test_baseline_queue_takes_each_batch_once_after_the_loss(tiny_config, tiny_world, tiny_tsb, monkeypatch):
    config = tiny_config.with_updates(loss={"mode": "baseline_seed"}, banks={"queue_size": 64})
    source = _source(config, tiny_world)
    seen = []
    real = trainer_module.compute_loss

    def recording(*args, **kwargs):
        seen.append(kwargs["queue"].entries())
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer_module, "compute_loss", recording)
    art = train_distillation(config, source, tiny_tsb, max_steps=3)
    batch = config.training.batch_size
    drawn = np.concatenate([source.draw(step)[1] for step in range(3)])
    first_batch = {tuple(row) for row in drawn[:batch]}
    assert len(seen[0]) == 64
    assert not first_batch & {tuple(row) for row in seen[0]}
    entries = art.queue.entries()
    assert len(entries) == 64
    np.testing.assert_array_equal(entries[-3 * batch:], drawn)
    assert len({tuple(row) for row in entries}) == 64
    assert art.vsb.initialized_count == 0
    assert set(art.metrics[0]) >= {"loss_total", "component.visual"}


def test_text_dim_mismatch_needs_projection(tiny_config):
    params = WorldParams(num_categories=4, dim=6, input_dim=8, text_dim=12, seed=3)
    world = gen_world(params)
    tsb = gen_text_anchors(world)
    config = tiny_config.with_updates(world=params.model_dump(mode="json"))
    with pytest.raises(ConfigurationError):
        train_distillation(config, _source(config, world), tsb)
    config = config.with_updates(projection={"enabled": True})
    art = train_distillation(config, _source(config, world), tsb, max_steps=2)
    assert art.classifier_anchors().shape == (6, 4)


def test_generalized_mode_trains_projection(tiny_config):
    params = WorldParams(num_categories=4, dim=6, input_dim=8, text_dim=12, seed=3)
    world = gen_world(params)
    tsb = gen_text_anchors(world)
    config = tiny_config.with_updates(world=params.model_dump(mode="json"), projection={"enabled": True},
                                      loss={"mode": "generalized", "alpha": None})
    source = _source(config, world)
    before = build_artifacts(config, source, tsb).projection.parameters()
    art = train_distillation(config, source, tsb, max_steps=4)
    assert config.loss.alpha == 0.33
    assert any(not np.array_equal(before[k], v) for k, v in art.projection.parameters().items())


def test_evaluator_called_at_epoch_end(tiny_config, tiny_world, tiny_tsb):
    config = tiny_config.with_updates(eval={"every_epochs": 1})
    calls = []

    def evaluator(art):
        calls.append(art.step)
        return 0.5

    art = train_distillation(config, _source(config, tiny_world), tiny_tsb, evaluator=evaluator)
    spe = config.training.steps_per_epoch
    assert calls == [spe * (i + 1) for i in range(config.training.epochs)]
    assert [row["zeroshot_acc"] for row in art.metrics if row["zeroshot_acc"] is not None] == [0.5] * len(calls)


def test_nonfinite_loss_aborts(tiny_config, tiny_world, tiny_tsb, monkeypatch):
    real = trainer_module.compute_loss

    def broken(*args, **kwargs):
        out = real(*args, **kwargs)
        out.total = float("nan")
        return out

    monkeypatch.setattr(trainer_module, "compute_loss", broken)
    with pytest.raises(NumericAbort) as info:
        train_distillation(tiny_config, _source(tiny_config, tiny_world), tiny_tsb)
    assert info.value.step == 0


def test_dataset_source_covers_each_pass(tiny_world):
    inputs, teacher, _ = sample_split(tiny_world, 40, seed=0, name="data")
    source = DatasetSource(inputs, teacher * 3.0, batch_size=8, seed=1)
    seen = np.concatenate([source.draw(step)[0] for step in range(5)])
    assert sorted(map(tuple, seen)) == sorted(map(tuple, inputs))
    np.testing.assert_allclose(np.linalg.norm(source.draw(0)[1], axis=1), 1.0, atol=1e-12)
    with pytest.raises(ConfigurationError):
        DatasetSource(inputs, teacher[:10], batch_size=8, seed=1)


def _lifted_setup(tiny_config, mode="generalized"):
    params = WorldParams(num_categories=4, dim=6, input_dim=8, text_dim=12, seed=3)
    world = gen_world(params)
    tsb = gen_text_anchors(world)
    config = tiny_config.with_updates(world=params.model_dump(mode="json"), projection={"enabled": True},
                                      loss={"mode": mode, "alpha": None})
    return config, world, tsb


def test_lgka_anchors_come_from_frozen_text_bank(tiny_config, tiny_world, tiny_tsb):
    config, world, tsb = _lifted_setup(tiny_config)
    art = build_artifacts(config, _source(config, world), tsb)
    np.testing.assert_allclose(art.lgka_anchors(), world.text_lift.T @ tsb.anchors, atol=1e-12)
    same = build_artifacts(tiny_config, _source(tiny_config, tiny_world), tiny_tsb)
    assert same.lgka_anchors() is tiny_tsb.anchors


@pytest.mark.parametrize("mode", ["generalized", "naive_textual"])
def test_vsb_does_not_depend_on_projection_training(tiny_config, mode):
    config, world, tsb = _lifted_setup(tiny_config, mode)
    frozen = config.with_updates(optimizer={"base_lr": 0.0})
    a = train_distillation(config, _source(config, world), tsb, max_steps=6)
    b = train_distillation(frozen, _source(frozen, world), tsb, max_steps=6)
    assert a.vsb.initialized_count > 0
    np.testing.assert_array_equal(a.vsb.anchors, b.vsb.anchors)
