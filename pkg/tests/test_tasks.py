"""
Tests for task sampling, task embeddings and augmentation:
- seeded task reconstruction for both families
- embedding layout per family
- rotation and noise augmentation
"""

import numpy as np
import pytest

from src.weightdiff.nn_core import LabeledBatch, SpecError
from src.weightdiff.tasks import (
    augment,
    downstream_spec,
    embed_task,
    embedding_dim,
    rotation_matrix,
    sample_task,
    task_from_seed,
)


def _make_batch(inputs, targets=None):
    inputs = np.asarray(inputs, dtype=np.float64)
    if targets is None:
        targets = np.zeros(inputs.shape[0], dtype=np.int64)
    return LabeledBatch(inputs=inputs, targets=np.asarray(targets))


# ──────────────────────────────────────────────────────────────────────────────
# Sampling
# ──────────────────────────────────────────────────────────────────────────────

def test_same_seed_rebuilds_same_task():
    a = task_from_seed("blobs", 3, 4, 6, task_seed=11)
    b = task_from_seed("blobs", 3, 4, 6, task_seed=11)
    np.testing.assert_array_equal(a.support.inputs, b.support.inputs)
    np.testing.assert_array_equal(a.query.targets, b.query.targets)


def test_different_seeds_differ():
    a = task_from_seed("sine", 1, 5, 5, task_seed=1)
    b = task_from_seed("sine", 1, 5, 5, task_seed=2)
    assert not np.array_equal(a.support.inputs, b.support.inputs)


def test_blobs_shapes_and_labels():
    task = task_from_seed("blobs", 3, 4, 6, task_seed=0)
    assert task.support.inputs.shape == (12, 2)
    assert task.query.inputs.shape == (18, 2)
    np.testing.assert_array_equal(np.bincount(task.support.targets), [4, 4, 4])
    assert task.is_classification


def test_sine_is_single_output_regression():
    task = task_from_seed("sine", 5, 10, 7, task_seed=3)
    assert task.n_way == 1
    assert task.support.targets.shape == (10, 1)
    assert task.query.inputs.shape == (7, 1)
    assert not task.is_classification


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        task_from_seed("mnist", 2, 1, 1, task_seed=0)


def test_sample_task_is_reproducible_from_rng():
    a = sample_task("blobs", 2, 3, 3, np.random.default_rng(5))
    b = sample_task("blobs", 2, 3, 3, np.random.default_rng(5))
    assert a.task_seed == b.task_seed


def test_downstream_spec_per_family():
    assert downstream_spec("blobs", 4, hidden=(8,)).layer_sizes == (2, 8, 4)
    sine = downstream_spec("sine", 1, hidden=(16, 16))
    assert sine.layer_sizes == (1, 16, 16, 1)
    assert sine.output_head == "mse"


# ──────────────────────────────────────────────────────────────────────────────
# Embedding
# ──────────────────────────────────────────────────────────────────────────────

@pytest.mark.parametrize("family,n_way", [("blobs", 2), ("blobs", 5), ("sine", 1)])
def test_embedding_length_matches_embedding_dim(family, n_way):
    task = task_from_seed(family, n_way, 3, 3, task_seed=8)
    assert embed_task(task).dim == embedding_dim(family, n_way)


def test_blob_embedding_is_class_mean_then_variance():
    task = task_from_seed("blobs", 2, 5, 2, task_seed=4)
    vec = embed_task(task).vector
    class0 = task.support.inputs[task.support.targets == 0]
    np.testing.assert_allclose(vec[:2], class0.mean(axis=0))
    np.testing.assert_allclose(vec[2:4], class0.var(axis=0))


def test_sine_embedding_uses_joint_pairs():
    task = task_from_seed("sine", 1, 6, 2, task_seed=9)
    vec = embed_task(task).vector
    assert vec[0] == pytest.approx(task.support.inputs.mean())
    assert vec[1] == pytest.approx(task.support.targets.mean())


# ──────────────────────────────────────────────────────────────────────────────
# Augmentation
# ──────────────────────────────────────────────────────────────────────────────

def test_quarter_turn_maps_x_axis_to_y_axis():
    batch = _make_batch([[1.0, 0.0]])
    out = augment(batch, 0.0, True, np.random.default_rng(0), angle=np.pi / 2)
    np.testing.assert_allclose(out.inputs, [[0.0, 1.0]], atol=1e-12)


def test_rotation_preserves_norms_and_labels():
    rng = np.random.default_rng(1)
    batch = _make_batch(rng.normal(size=(8, 2)), targets=np.arange(8))
    out = augment(batch, 0.0, True, rng)
    np.testing.assert_allclose(np.linalg.norm(out.inputs, axis=1), np.linalg.norm(batch.inputs, axis=1))
    np.testing.assert_array_equal(out.targets, batch.targets)


def test_rotation_matrix_is_orthogonal():
    R = rotation_matrix(0.7)
    np.testing.assert_allclose(R @ R.T, np.eye(2), atol=1e-12)


def test_disabled_augmentation_returns_batch_untouched():
    batch = _make_batch([[1.0, 2.0]])
    rng = np.random.default_rng(2)
    assert augment(batch, 0.0, False, rng) is batch
    assert rng.random() == np.random.default_rng(2).random()


def test_noise_changes_inputs_only():
    batch = _make_batch(np.zeros((5, 2)), targets=np.arange(5))
    out = augment(batch, 0.1, False, np.random.default_rng(3))
    assert not np.allclose(out.inputs, 0.0)
    np.testing.assert_array_equal(out.targets, batch.targets)


def test_noise_has_requested_std():
    batch = _make_batch(np.zeros((5000, 2)))
    out = augment(batch, 0.05, False, np.random.default_rng(4))
    assert np.std(out.inputs) == pytest.approx(0.05, rel=0.05)


def test_rotation_with_noise_keeps_batch_size_and_labels():
    rng = np.random.default_rng(5)
    batch = _make_batch(rng.normal(size=(12, 2)), targets=np.arange(12) % 3)
    out = augment(batch, 0.05, True, rng)
    assert len(out) == len(batch)
    np.testing.assert_array_equal(out.targets, batch.targets)


def test_rotation_requires_planar_inputs():
    with pytest.raises(SpecError):
        augment(_make_batch(np.zeros((3, 1))), 0.0, True, np.random.default_rng(0))


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        augment(_make_batch([[0.0, 0.0]]), -1.0, False, np.random.default_rng(0))
