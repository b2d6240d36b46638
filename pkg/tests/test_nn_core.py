"""
Tests for the dense-network core:
- spec validation and parameter layout
- task losses and their analytic gradients against central differences
- Adam, SAM and plain SGD steps
"""

import numpy as np
import pytest

from src.weightdiff.nn_core import (
    AdamState,
    LabeledBatch,
    NetworkSpec,
    NonFiniteError,
    SpecError,
    adam_step,
    central_difference,
    finite_diff_grad,
    forward,
    forward_trace,
    init_network,
    parameter_count,
    predict_labels,
    relative_error,
    sam_perturb,
    sgd_step,
    task_loss,
    task_loss_grad,
    unflatten,
)


def _make_classification_batch(rng, n=12, n_way=3, dim=2):
    return LabeledBatch(inputs=rng.normal(size=(n, dim)), targets=rng.integers(0, n_way, size=n))


def _make_regression_batch(rng, n=10, dim=1, out=1):
    return LabeledBatch(inputs=rng.normal(size=(n, dim)), targets=rng.normal(size=(n, out)))


# ──────────────────────────────────────────────────────────────────────────────
# Spec and layout
# ──────────────────────────────────────────────────────────────────────────────

def test_parameter_count_small_classifier():
    assert parameter_count(NetworkSpec((2, 8, 2))) == 42


def test_parameter_count_matches_spec_property():
    spec = NetworkSpec((3, 5, 4, 2))
    assert spec.parameter_count == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2


@pytest.mark.parametrize("sizes", [(3,), (2, 0, 1), ()])
def test_invalid_layer_sizes_rejected(sizes):
    with pytest.raises(SpecError):
        NetworkSpec(sizes)


def test_unknown_activation_rejected():
    with pytest.raises(SpecError):
        NetworkSpec((2, 2), activation="sigmoid")


def test_unflatten_is_row_major_weight_then_bias():
    spec = NetworkSpec((2, 3, 1), output_head="mse")
    w = np.arange(spec.parameter_count, dtype=np.float64)
    (W0, b0), (W1, b1) = unflatten(spec, w)
    np.testing.assert_array_equal(W0, np.arange(6).reshape(2, 3))
    np.testing.assert_array_equal(b0, [6, 7, 8])
    np.testing.assert_array_equal(W1, np.array([[9], [10], [11]]))
    np.testing.assert_array_equal(b1, [12])


def test_unflatten_rejects_wrong_length():
    with pytest.raises(SpecError):
        unflatten(NetworkSpec((2, 2)), np.zeros(5))


def test_forward_output_shape():
    rng = np.random.default_rng(0)
    spec = NetworkSpec((2, 4, 3))
    out = forward(spec, init_network(spec, 0.1, rng), rng.normal(size=(7, 2)))
    assert out.shape == (7, 3)


def test_forward_rejects_wrong_input_width():
    spec = NetworkSpec((2, 3))
    with pytest.raises(SpecError):
        forward(spec, np.zeros(spec.parameter_count), np.zeros((4, 3)))


def test_non_finite_weights_report_layer():
    spec = NetworkSpec((2, 3, 2))
    w = np.zeros(spec.parameter_count)
    w[0] = np.inf
    with pytest.raises(NonFiniteError) as exc:
        forward_trace(spec, w, np.ones((1, 2)))
    assert exc.value.layer == 0


# ──────────────────────────────────────────────────────────────────────────────
# Losses and gradients
# ──────────────────────────────────────────────────────────────────────────────

def test_zero_weights_give_uniform_softmax_loss():
    rng = np.random.default_rng(1)
    spec = NetworkSpec((2, 4, 3))
    batch = _make_classification_batch(rng)
    assert task_loss(spec, np.zeros(spec.parameter_count), batch) == pytest.approx(np.log(3))


def test_mse_is_mean_over_all_output_elements():
    spec = NetworkSpec((1, 1), output_head="mse")
    batch = LabeledBatch(inputs=np.array([[1.0], [2.0]]), targets=np.zeros((2, 1)))
    assert task_loss(spec, np.array([2.0, 0.0]), batch) == pytest.approx(10.0)


def test_linear_head_scored_like_mse():
    rng = np.random.default_rng(2)
    batch = _make_regression_batch(rng, out=2)
    w = init_network(NetworkSpec((1, 3, 2), output_head="mse"), 0.5, rng)
    linear = task_loss(NetworkSpec((1, 3, 2), output_head="linear"), w, batch)
    mse = task_loss(NetworkSpec((1, 3, 2), output_head="mse"), w, batch)
    assert linear == mse


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_softmax_gradient_matches_central_differences(activation):
    rng = np.random.default_rng(3)
    spec = NetworkSpec((2, 5, 3), activation=activation)
    batch = _make_classification_batch(rng)
    w = init_network(spec, 0.5, rng)
    assert relative_error(task_loss_grad(spec, w, batch).grad, finite_diff_grad(spec, w, batch)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_mse_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec((1, 6, 4, 2), output_head="mse")
    batch = _make_regression_batch(rng, out=2)
    w = init_network(spec, 0.5, rng)
    assert relative_error(task_loss_grad(spec, w, batch).grad, finite_diff_grad(spec, w, batch)) < 1e-4


def test_loss_grad_reports_same_loss_as_task_loss():
    rng = np.random.default_rng(4)
    spec = NetworkSpec((2, 4, 2))
    batch = _make_classification_batch(rng, n_way=2)
    w = init_network(spec, 0.3, rng)
    assert task_loss_grad(spec, w, batch).loss == task_loss(spec, w, batch)


def test_empty_batch_rejected():
    spec = NetworkSpec((2, 2))
    batch = LabeledBatch(inputs=np.zeros((0, 2)), targets=np.zeros(0, dtype=int))
    with pytest.raises(SpecError):
        task_loss(spec, np.zeros(spec.parameter_count), batch)


def test_labels_outside_head_rejected():
    spec = NetworkSpec((2, 2))
    batch = LabeledBatch(inputs=np.zeros((2, 2)), targets=np.array([0, 5]))
    with pytest.raises(SpecError):
        task_loss(spec, np.zeros(spec.parameter_count), batch)


def test_predict_labels_follows_bias():
    spec = NetworkSpec((2, 3))
    w = np.zeros(spec.parameter_count)
    w[-3:] = [0.0, 5.0, 1.0]
    np.testing.assert_array_equal(predict_labels(spec, w, np.zeros((4, 2))), [1, 1, 1, 1])


def test_init_network_is_seeded_gaussian():
    spec = NetworkSpec((99, 100))
    a = init_network(spec, 0.1, np.random.default_rng(5))
    b = init_network(spec, 0.1, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.size == 10_000
    assert np.std(a) == pytest.approx(0.1, rel=0.05)


def test_central_difference_on_half_squared_norm():
    grad = central_difference(lambda v: 0.5 * float(v @ v), np.array([3.0, 4.0]))
    np.testing.assert_allclose(grad, [3.0, 4.0], atol=1e-8)


def test_central_difference_error_is_second_order():
    w = np.array([0.3, -0.2])
    exact = np.exp(w)
    errors = [
        np.max(np.abs(central_difference(lambda v: float(np.sum(np.exp(v))), w, h) - exact))
        for h in (1e-2, 5e-3)
    ]
    assert 3.5 < errors[0] / errors[1] < 4.5


def test_relative_error_zero_for_identical_vectors():
    v = np.array([1.0, -2.0, 3.0])
    assert relative_error(v, v.copy()) == 0.0


# ──────────────────────────────────────────────────────────────────────────────
# Optimizer steps
# ──────────────────────────────────────────────────────────────────────────────

def test_first_adam_step_moves_by_lr_against_gradient_sign():
    state = AdamState.zeros(2, lr=0.01)
    w, state = adam_step(state, np.zeros(2), np.array([1.0, -2.0]))
    np.testing.assert_allclose(w, [-0.01, 0.01], atol=1e-7)
    assert state.step == 1


def test_adam_step_does_not_mutate_inputs():
    state = AdamState.zeros(3)
    w = np.ones(3)
    adam_step(state, w, np.ones(3))
    np.testing.assert_array_equal(w, np.ones(3))
    np.testing.assert_array_equal(state.m, np.zeros(3))


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.zeros(2), np.zeros(2), np.array([np.nan, 0.0]))


def test_adam_rejects_dimension_mismatch():
    with pytest.raises(SpecError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))


def test_sam_perturbation_has_norm_rho():
    eps = sam_perturb(np.array([3.0, 4.0]), 0.05)
    assert np.linalg.norm(eps) == pytest.approx(0.05)
    np.testing.assert_allclose(eps, [0.03, 0.04])


def test_sam_perturbation_zero_for_vanishing_gradient():
    np.testing.assert_array_equal(sam_perturb(np.zeros(4), 0.05), np.zeros(4))


def test_sam_rejects_negative_rho():
    with pytest.raises(ValueError):
        sam_perturb(np.ones(2), -0.1)


def test_sgd_step():
    np.testing.assert_allclose(sgd_step(np.array([1.0, 1.0]), np.array([2.0, -4.0]), 0.5), [0.0, 3.0])
