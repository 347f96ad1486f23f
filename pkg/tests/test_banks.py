import threading

import numpy as np
import pytest

from app.core.exceptions import InputError, ParameterError, ShapeError, UnknownCategoryError
from app.lgd.banks import (InstanceQueue, TextualSemanticsBank, VisualSemanticsBank, append_teacher_anchor,
                           batch_centroids, classify_by_tsb, lgka_step, momentum_update, subset_tsb)
from helpers import unit_columns, unit_rows


@pytest.fixture
def axis_tsb():
    return TextualSemanticsBank(anchors=np.eye(2), category_names=("cat", "dog"))


def test_tsb_is_read_only(axis_tsb):
    with pytest.raises(ValueError):
        axis_tsb.anchors[0, 0] = 5.0


@pytest.mark.parametrize("anchors, names", [
    (np.ones((2, 1)) / np.sqrt(2), ("only",)),
    (np.eye(2), ("a", "a")),
    (np.eye(2), ("a", "")),
    (np.array([[2.0, 0.0], [0.0, 1.0]]), ("a", "b")),
])
def test_tsb_validation(anchors, names):
    with pytest.raises(InputError):
        TextualSemanticsBank(anchors=anchors, category_names=names)


def test_classify_by_tsb(axis_tsb):
    z = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert classify_by_tsb(z, axis_tsb).tolist() == [0, 1]


def test_classify_tie_takes_lowest_index(axis_tsb):
    z = np.array([[1.0, 1.0]]) / np.sqrt(2)
    assert classify_by_tsb(z, axis_tsb).tolist() == [0]


def test_classify_rejects_zero_row_and_dim_mismatch(axis_tsb):
    with pytest.raises(InputError):
        classify_by_tsb(np.zeros((1, 2)), axis_tsb)
    with pytest.raises(ShapeError):
        classify_by_tsb(np.ones((1, 3)), axis_tsb)


def test_batch_centroids_only_present_categories():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    result = batch_centroids(z, [0, 2, 0], num_categories=3)
    assert result.present_categories.tolist() == [0, 2]
    np.testing.assert_allclose(result.centroids[0], [0.8, 0.4])
    np.testing.assert_allclose(result.centroids[1], [0.0, 1.0])


def test_batch_centroids_rejects_out_of_range():
    with pytest.raises(InputError):
        batch_centroids(np.eye(2), [0, 5], num_categories=3)


def test_momentum_update_init_replace():
    vsb = VisualSemanticsBank.create(num_categories=2, dim=2)
    assert vsb.initialized_count == 0
    momentum_update(vsb, batch_centroids(np.array([[0.6, 0.8]]), [1], 2))
    np.testing.assert_allclose(vsb.anchors[:, 1], [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(vsb.anchors[:, 0], [0.0, 0.0])
    assert vsb.initialized.tolist() == [False, True]


def test_momentum_update_formula():
    vsb = VisualSemanticsBank(np.array([[1.0], [0.0]]), [True], momentum=0.999)
    momentum_update(vsb, batch_centroids(np.array([[0.0, 1.0]]), [0], 1))
    expected = np.array([0.999, 0.001]) / np.linalg.norm([0.999, 0.001])
    np.testing.assert_allclose(vsb.anchors[:, 0], expected, atol=1e-15)


def test_vsb_columns_stay_unit(rng):
    vsb = VisualSemanticsBank.create(num_categories=4, dim=5)
    anchors = unit_columns(rng, 5, 4)
    for _ in range(20):
        lgka_step(unit_rows(rng, 16, 5), anchors, vsb)
    norms = np.linalg.norm(vsb.anchors, axis=0)
    np.testing.assert_allclose(norms[vsb.initialized], 1.0, atol=1e-12)


def test_random_init_vsb(rng):
    vsb = VisualSemanticsBank.create(3, 4, init="random", rng=rng)
    assert vsb.initialized_count == 3
    with pytest.raises(ParameterError):
        VisualSemanticsBank.create(3, 4, init="random")


def test_vsb_rejects_bad_momentum():
    with pytest.raises(ParameterError):
        VisualSemanticsBank.create(2, 2, momentum=1.0)


def test_append_teacher_anchor_keeps_zero_columns():
    vsb = VisualSemanticsBank.create(2, 2)
    v = append_teacher_anchor(vsb, [0.0, 1.0])
    assert v.shape == (2, 3)
    np.testing.assert_array_equal(v[:, :2], 0.0)
    np.testing.assert_array_equal(v[:, 2], [0.0, 1.0])


def test_subset_tsb_keeps_request_order(rng):
    tsb = TextualSemanticsBank.from_rows(unit_rows(rng, 4, 3), ["a", "b", "c", "d"])
    sub = subset_tsb(tsb, ["c", "a"])
    assert sub.category_names == ("c", "a")
    np.testing.assert_array_equal(sub.anchors[:, 0], tsb.anchors[:, 2])


def test_subset_tsb_reports_all_missing(axis_tsb):
    with pytest.raises(UnknownCategoryError) as info:
        subset_tsb(axis_tsb, ["cat", "zebra", "yak"])
    assert info.value.missing == ["zebra", "yak"]


def test_instance_queue_fifo():
    queue = InstanceQueue(capacity=3, dim=1)
    queue.enqueue(np.array([[1.0], [2.0]]))
    assert len(queue) == 2
    queue.enqueue(np.array([[3.0], [4.0]]))
    assert len(queue) == 3
    assert queue.entries().ravel().tolist() == [2.0, 3.0, 4.0]


def test_concurrent_readers_never_see_partial_update(rng):
    vsb = VisualSemanticsBank.create(8, 6)
    anchors = unit_columns(rng, 6, 8)
    batches = [unit_rows(rng, 32, 6) for _ in range(50)]
    bad = []

    def reader():
        for _ in range(200):
            v = vsb.snapshot().anchors
            norms = np.linalg.norm(v, axis=0)
            if np.any(np.abs(norms[norms > 0] - 1.0) > 1e-9):
                bad.append(norms)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for batch in batches:
        lgka_step(batch, anchors, vsb)
    for t in threads:
        t.join()
    assert not bad


def test_random_queue_starts_full_of_unit_rows(rng):
    queue = InstanceQueue.random(capacity=8, dim=3, rng=rng)
    assert len(queue) == 8
    np.testing.assert_allclose(np.linalg.norm(queue.entries(), axis=1), 1.0, atol=1e-12)
    queue.enqueue(np.array([[1.0, 0.0, 0.0]]))
    assert len(queue) == 8
    np.testing.assert_array_equal(queue.entries()[-1], [1.0, 0.0, 0.0])


def test_momentum_converges_geometrically_to_constant_centroid():
    m = 0.9
    target = np.array([1.0, 0.0])
    vsb = VisualSemanticsBank(np.array([[np.cos(0.3)], [np.sin(0.3)]]), [True], momentum=m)
    distances = [np.linalg.norm(vsb.anchors[:, 0] - target)]
    for _ in range(40):
        momentum_update(vsb, batch_centroids(target[None, :], [0], 1))
        distances.append(np.linalg.norm(vsb.anchors[:, 0] - target))
    ratios = np.array(distances[1:]) / np.array(distances[:-1])
    assert np.all(ratios >= m - 1e-9)
    assert np.all(ratios <= m + 5e-3)
    assert ratios[-1] == pytest.approx(m, abs=1e-4)
