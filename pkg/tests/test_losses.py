import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.exceptions import ConfigurationError, ShapeError, StateError
from app.lgd.banks import InstanceQueue, TextualSemanticsBank, VisualSemanticsBank, lgka_step
from app.lgd.losses import (LossConfig, compute_loss, generalized_lgd_loss, lgd_loss, naive_textual_loss,
                            seed_baseline_loss, textual_alignment_loss, visual_alignment_loss)
from app.lgd.numerics import cross_entropy_rows, entropy_rows, kl_rows, softmax_rows
from app.lgd.student import ProjectionHead, StudentNet
from helpers import finite_difference, relative_error, unit_columns, unit_rows

FD_TOL = 1e-6


def _names(c):
    return [f"c{i}" for i in range(c)]


class Case:
    """一组随机的损失输入：学生、可选投影头、TSB、VSB、队列"""

    def __init__(self, seed, mode, text_dim_factor=1, projection=False, batch=6, categories=4, dim=5,
                 input_dim=6, hidden=(7,)):
        rng = np.random.default_rng(seed)
        self.cfg = LossConfig(tau_teacher=0.1, tau_student=0.2, mode=mode)
        self.inputs = rng.standard_normal((batch, input_dim))
        self.z_t = unit_rows(rng, batch, dim)
        self.student = StudentNet.create(input_dim, hidden, dim, rng)
        text_dim = dim * text_dim_factor
        self.tsb = TextualSemanticsBank.from_rows(unit_rows(rng, categories, text_dim), _names(categories))
        self.projection = ProjectionHead.create(text_dim, dim, rng) if projection else None
        self.vsb = VisualSemanticsBank.create(categories, dim)
        lgka_step(self.z_t, unit_columns(rng, dim, categories), self.vsb)
        self.queue = InstanceQueue(16, dim)
        self.queue.enqueue(unit_rows(rng, 10, dim))

    def params(self):
        params = {f"student.{k}": v for k, v in self.student.parameters().items()}
        if self.projection is not None:
            params.update({f"projection.{k}": v for k, v in self.projection.parameters().items()})
        return params

    def loss(self, params):
        student = StudentNet({k[len("student."):]: v for k, v in params.items() if k.startswith("student.")})
        projection = None
        if self.projection is not None:
            projection = ProjectionHead({k[len("projection."):]: v for k, v in params.items()
                                         if k.startswith("projection.")})
        z_s, _ = student.forward(self.inputs)
        return compute_loss(self.cfg, self.z_t, z_s, self.tsb, self.vsb, projection=projection,
                            queue=self.queue).total

    def analytic(self):
        z_s, cache = self.student.forward(self.inputs)
        out = compute_loss(self.cfg, self.z_t, z_s, self.tsb, self.vsb, projection=self.projection,
                           queue=self.queue)
        grads = {f"student.{k}": v for k, v in self.student.backward(cache, out.grad_student_embeddings).items()}
        if self.projection is not None:
            grads.update({f"projection.{k}": v for k, v in out.grad_projection.items()})
        return grads


@pytest.mark.parametrize("seed", range(25))
@pytest.mark.parametrize("mode, kwargs", [
    ("standard", {}),
    ("standard", {"projection": True, "text_dim_factor": 2}),
    ("generalized", {"projection": True, "text_dim_factor": 2}),
    ("baseline_seed", {}),
    ("naive_textual", {"projection": True, "text_dim_factor": 2}),
])
def test_gradients_match_finite_difference(seed, mode, kwargs):
    case = Case(seed, mode, **kwargs)
    numeric = finite_difference(case.loss, case.params())
    assert relative_error(case.analytic(), numeric) <= FD_TOL


def test_generalized_without_projection_when_dims_match():
    case = Case(0, "generalized")
    numeric = finite_difference(case.loss, case.params())
    assert relative_error(case.analytic(), numeric) <= FD_TOL


@pytest.mark.parametrize("seed", range(50))
def test_seed_baseline_equals_visual_loss_on_vsb_queue(seed):
    rng = np.random.default_rng(seed)
    c, d, b = 5, 6, 4
    vsb = VisualSemanticsBank.create(c, d, init="random", rng=rng)
    queue = InstanceQueue(c, d)
    queue.enqueue(vsb.anchors.T)
    cfg = LossConfig(tau_teacher=0.04, tau_student=0.1)
    z_t, z_s = unit_rows(rng, b, d), unit_rows(rng, b, d)
    seed_out = seed_baseline_loss(z_t, z_s, queue, cfg)
    visual_out = visual_alignment_loss(z_t, z_s, vsb, cfg)
    assert abs(seed_out.total - visual_out.total) <= 1e-12
    np.testing.assert_allclose(seed_out.grad_student_embeddings, visual_out.grad_student_embeddings, atol=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
def test_lgd_loss_is_alpha_linear(rng, alpha):
    d, c = 4, 3
    tsb = TextualSemanticsBank.from_rows(unit_rows(rng, c, d), _names(c))
    vsb = VisualSemanticsBank.create(c, d, init="random", rng=rng)
    z_t, z_s = unit_rows(rng, 5, d), unit_rows(rng, 5, d)
    cfg = LossConfig(tau_teacher=0.04, tau_student=0.1, alpha=alpha)
    out = lgd_loss(z_t, z_s, tsb, vsb, cfg)
    vis = visual_alignment_loss(z_t, z_s, vsb, cfg)
    tex = textual_alignment_loss(z_t, z_s, tsb, cfg)
    assert out.total == pytest.approx(alpha * vis.total + (1 - alpha) * tex.total, abs=1e-12)
    np.testing.assert_allclose(out.grad_student_embeddings,
                               alpha * vis.grad_student_embeddings + (1 - alpha) * tex.grad_student_embeddings,
                               atol=1e-12)
    assert out.weights == {"visual": alpha, "textual": 1 - alpha}


def test_textual_loss_with_one_hot_target():
    tsb = TextualSemanticsBank(anchors=np.eye(3), category_names=("a", "b", "c"))
    z_t = np.array([[1.0, 0.0, 0.0]])
    z_s = np.array([[0.6, 0.8, 0.0]])
    cfg = LossConfig(tau_teacher=0.01, tau_student=0.1)
    out = textual_alignment_loss(z_t, z_s, tsb, cfg)
    pred = softmax_rows(z_s @ np.eye(3), 0.1)
    assert out.total == pytest.approx(-math.log(pred[0, 0]), rel=1e-9)


def test_textual_loss_equals_entropy_when_student_matches_teacher(rng):
    tsb = TextualSemanticsBank.from_rows(unit_rows(rng, 4, 5), _names(4))
    z = unit_rows(rng, 3, 5)
    cfg = LossConfig(tau_teacher=0.1, tau_student=0.1)
    out = textual_alignment_loss(z, z, tsb, cfg)
    assert out.total == pytest.approx(entropy_rows(out.score_snapshots["s_T-L"]), abs=1e-12)


def test_seed_single_orthogonal_entry():
    queue = InstanceQueue(1, 2)
    queue.enqueue(np.array([[0.0, 1.0]]))
    cfg = LossConfig(tau_teacher=0.5, tau_student=0.5)
    z = np.array([[1.0, 0.0]])
    out = seed_baseline_loss(z, z, queue, cfg)
    np.testing.assert_allclose(out.score_snapshots["s_T-Q"], softmax_rows(np.array([[0.0, 2.0]]), 1.0))


def test_visual_loss_needs_initialized_anchor(rng):
    vsb = VisualSemanticsBank.create(3, 4)
    z = unit_rows(rng, 2, 4)
    with pytest.raises(StateError):
        visual_alignment_loss(z, z, vsb, LossConfig(tau_teacher=0.04, tau_student=0.1))


def test_uninitialized_vsb_columns_contribute_zero_logits():
    vsb = VisualSemanticsBank.create(2, 2)
    lgka_step(np.array([[1.0, 0.0]]), np.eye(2), vsb)
    cfg = LossConfig(tau_teacher=1.0, tau_student=1.0)
    z = np.array([[1.0, 0.0]])
    out = visual_alignment_loss(z, z, vsb, cfg)
    # V′ = [e0, 0, z_T]
    np.testing.assert_allclose(out.score_snapshots["s_T-V"], softmax_rows(np.array([[1.0, 0.0, 1.0]]), 1.0))


def test_seed_needs_nonempty_queue(rng):
    z = unit_rows(rng, 2, 3)
    with pytest.raises(StateError):
        seed_baseline_loss(z, z, InstanceQueue(4, 3), LossConfig(tau_teacher=0.04, tau_student=0.1))


def test_dimension_mismatch_without_projection(rng):
    tsb = TextualSemanticsBank.from_rows(unit_rows(rng, 3, 8), _names(3))
    vsb = VisualSemanticsBank.create(3, 4, init="random", rng=rng)
    z = unit_rows(rng, 2, 4)
    with pytest.raises(ShapeError):
        lgd_loss(z, z, tsb, vsb, LossConfig(tau_teacher=0.04, tau_student=0.1))
    with pytest.raises(ConfigurationError):
        generalized_lgd_loss(z, z, tsb, vsb, None, LossConfig(tau_teacher=0.04, tau_student=0.1, mode="generalized"))


def test_student_and_teacher_shape_mismatch(rng):
    tsb = TextualSemanticsBank.from_rows(unit_rows(rng, 3, 4), _names(3))
    with pytest.raises(ShapeError):
        textual_alignment_loss(unit_rows(rng, 2, 4), unit_rows(rng, 3, 4), tsb,
                               LossConfig(tau_teacher=0.04, tau_student=0.1))


def test_generalized_score_widths(rng):
    case = Case(1, "generalized", projection=True, text_dim_factor=2)
    z_s, _ = case.student.forward(case.inputs)
    out = compute_loss(case.cfg, case.z_t, z_s, case.tsb, case.vsb, projection=case.projection)
    widths = {k: v.shape[1] for k, v in out.score_snapshots.items()}
    assert widths == {"s_T-V": 5, "s_S-V": 5, "s_T-L": 5, "s_S-L": 5}
    assert set(out.components) == {"visual", "teacher_textual", "textual"}


def test_loss_config_defaults_and_validation():
    assert LossConfig(tau_teacher=0.04, tau_student=0.1).alpha == 0.5
    assert LossConfig(tau_teacher=0.04, tau_student=0.1, mode="generalized").alpha == 0.33
    with pytest.raises(ValidationError):
        LossConfig(tau_student=0.1)
    with pytest.raises(ValidationError):
        LossConfig(tau_teacher=0.0, tau_student=0.1)
    with pytest.raises(ValidationError):
        LossConfig(tau_teacher=0.04, tau_student=0.1, alpha=1.5)
    with pytest.raises(ValidationError):
        LossConfig(tau_teacher=0.04, tau_student=0.1, temperature=1.0)


@pytest.mark.parametrize("seed", range(10))
def test_generalized_reduces_to_three_entropies_when_projection_hits_vsb(seed):
    rng = np.random.default_rng(seed)
    c, d, text_dim = 4, 3, 6
    visual = unit_columns(rng, d, c)
    lift, _ = np.linalg.qr(rng.standard_normal((text_dim, d)))
    tsb = TextualSemanticsBank(anchors=lift @ visual, category_names=tuple(_names(c)))
    vsb = VisualSemanticsBank(visual, np.ones(c, dtype=bool))
    projection = ProjectionHead({"layers.0.weight": lift, "layers.0.bias": np.zeros(d)})
    z = unit_rows(rng, 5, d)
    cfg = LossConfig(tau_teacher=0.07, tau_student=0.07, mode="generalized")
    out = generalized_lgd_loss(z, z, tsb, vsb, projection, cfg)
    expected = 3 * cfg.alpha * entropy_rows(out.score_snapshots["s_T-V"])
    assert out.total == pytest.approx(expected, abs=1e-10)
    np.testing.assert_allclose(out.score_snapshots["s_T-L"], out.score_snapshots["s_T-V"], atol=1e-12)


def test_visual_loss_single_category_splits_evenly():
    vsb = VisualSemanticsBank.create(1, 3)
    z_t = np.array([[0.0, 0.6, 0.8]])
    lgka_step(z_t, np.array([[1.0], [0.0], [0.0]]), vsb)
    out = visual_alignment_loss(z_t, z_t, vsb, LossConfig(tau_teacher=0.04, tau_student=0.1))
    np.testing.assert_allclose(out.score_snapshots["s_T-V"], [[0.5, 0.5]], atol=1e-12)
    np.testing.assert_allclose(out.score_snapshots["s_S-V"], [[0.5, 0.5]], atol=1e-12)
    assert out.total == pytest.approx(math.log(2.0), abs=1e-10)


@pytest.mark.parametrize("mode, kwargs", [
    ("standard", {}),
    ("generalized", {"projection": True, "text_dim_factor": 2}),
    ("baseline_seed", {}),
    ("naive_textual", {"projection": True, "text_dim_factor": 2}),
])
def test_batch_order_does_not_change_update(mode, kwargs):
    case = Case(3, mode, batch=8, **kwargs)
    shuffled = Case(3, mode, batch=8, **kwargs)
    perm = np.random.default_rng(99).permutation(8)
    shuffled.inputs, shuffled.z_t = case.inputs[perm], case.z_t[perm]
    assert case.cfg.reduction == "mean"
    assert shuffled.loss(shuffled.params()) == pytest.approx(case.loss(case.params()), abs=1e-12)
    expected, actual = case.analytic(), shuffled.analytic()
    for name, value in expected.items():
        np.testing.assert_allclose(actual[name], value, atol=1e-12, err_msg=name)


def test_naive_textual_total_is_kl_part():
    case = Case(5, "naive_textual", projection=True, text_dim_factor=2)
    z_s, _ = case.student.forward(case.inputs)
    out = naive_textual_loss(case.z_t, z_s, case.tsb, case.projection, case.cfg)
    target, pred = out.score_snapshots["s_T-L"], out.score_snapshots["s_S-L"]
    assert out.total == pytest.approx(kl_rows(target, pred, "mean"), abs=1e-12)
    assert out.components["textual"] == pytest.approx(cross_entropy_rows(target, pred), abs=1e-12)
    assert out.components["textual"] - out.total == pytest.approx(entropy_rows(target), abs=1e-10)
    assert out.weights == {"textual": 0.0, "textual_kl": 1.0}


def test_naive_textual_vanishes_on_degenerate_anchors(rng):
    tsb = TextualSemanticsBank.from_rows(unit_rows(rng, 3, 8), _names(3))
    projection = ProjectionHead({"layers.0.weight": np.zeros((8, 4)), "layers.0.bias": np.ones(4)})
    z_t, z_s = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    cfg = LossConfig(tau_teacher=0.04, tau_student=0.1, mode="naive_textual")
    out = naive_textual_loss(z_t, z_s, tsb, projection, cfg)
    assert out.total == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(out.grad_student_embeddings, 0.0, atol=1e-12)
