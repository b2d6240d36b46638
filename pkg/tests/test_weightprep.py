"""
Tests for weight preparation:
- early stopping and the choice of M
- trajectory collection, divergence and truncation
- local target sampling
- binary trajectory records
"""

from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from src.weightdiff.nn_core import (
    AdamState,
    NetworkSpec,
    NonFiniteError,
    adam_step,
    init_network,
    sam_perturb,
    task_loss,
    task_loss_grad,
)
from src.weightdiff.schedule import ScheduleError
from src.weightdiff.tasks import downstream_spec, task_from_seed
from src.weightdiff.weightprep import (
    DivergenceError,
    PrepConfig,
    RecordFormatError,
    Trajectory,
    collect_trajectory,
    determine_M,
    load_trajectory,
    sample_local_targets,
    save_trajectory,
    truncate_trajectory,
)


def _make_trajectory(M=6, task_id=7):
    spec = NetworkSpec((1, 1, 1), output_head="mse")
    thetas = np.arange((M + 1) * spec.parameter_count, dtype=np.float64).reshape(M + 1, -1)
    return Trajectory(task_id=task_id, spec=spec, M=M, thetas=thetas, final_loss=0.25)


def _make_task(seed=0):
    return task_from_seed("blobs", 2, 4, 4, task_seed=seed)


# ──────────────────────────────────────────────────────────────────────────────
# Early stopping
# ──────────────────────────────────────────────────────────────────────────────

def test_flat_history_stops_after_patience():
    assert determine_M([1.0] * 10, patience=2, k=3) == 3


def test_improving_history_uses_full_length_rounded_down():
    history = [1.0 - 0.01 * e for e in range(11)]
    assert determine_M(history, patience=3, k=3) == 9


def test_M_never_below_k():
    assert determine_M([1.0, 1.0], patience=1, k=4) == 4


def test_tiny_improvements_do_not_reset_patience():
    history = [1.0, 1.0 - 1e-6, 1.0 - 2e-6, 1.0 - 3e-6]
    assert determine_M(history, patience=2, k=1) == 3


def test_prep_config_needs_enough_epochs_for_k():
    with pytest.raises(ValueError):
        PrepConfig(max_epochs=2, k=3)


# ──────────────────────────────────────────────────────────────────────────────
# Collection
# ──────────────────────────────────────────────────────────────────────────────

def test_trajectory_starts_from_seeded_init():
    spec = downstream_spec("blobs", 2, hidden=(4,))
    cfg = PrepConfig(max_epochs=9, patience=3, k=3)
    traj = collect_trajectory(_make_task(), spec, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(traj.theta_0, init_network(spec, cfg.init_std, np.random.default_rng(3)))


def test_trajectory_length_is_multiple_of_k():
    spec = downstream_spec("blobs", 2, hidden=(4,))
    cfg = PrepConfig(max_epochs=12, patience=2, k=3)
    traj = collect_trajectory(_make_task(1), spec, cfg, np.random.default_rng(0), task_id=5)
    assert traj.M % 3 == 0
    assert 3 <= traj.M <= 12
    assert traj.thetas.shape == (traj.M + 1, spec.parameter_count)
    assert traj.task_id == 5


def test_collection_is_deterministic():
    spec = downstream_spec("blobs", 2, hidden=(4,))
    cfg = PrepConfig(max_epochs=6, patience=2, k=2, rotate=True)
    a = collect_trajectory(_make_task(2), spec, cfg, np.random.default_rng(9))
    b = collect_trajectory(_make_task(2), spec, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a.thetas, b.thetas)
    assert a.final_loss == b.final_loss


def test_final_loss_is_support_loss_at_M():
    spec = downstream_spec("blobs", 2, hidden=(4,))
    task = _make_task(3)
    traj = collect_trajectory(task, spec, PrepConfig(max_epochs=6, patience=2, k=3), np.random.default_rng(1))
    assert traj.final_loss == task_loss(spec, traj.theta_M, task.support)


def test_non_finite_loss_raises_divergence():
    spec = downstream_spec("blobs", 2, hidden=(4,))
    with patch("src.weightdiff.weightprep.task_loss", return_value=float("nan")):
        with pytest.raises(DivergenceError) as exc:
            collect_trajectory(_make_task(), spec, PrepConfig(max_epochs=6, k=3), np.random.default_rng(0))
    assert exc.value.epoch == 1


def test_non_finite_sam_gradient_raises_divergence():
    spec = downstream_spec("blobs", 2, hidden=(4,))
    cfg = PrepConfig(max_epochs=6, k=3, rho=0.05)
    with patch("src.weightdiff.weightprep.task_loss_grad", side_effect=NonFiniteError("inf logits", layer=1)):
        with pytest.raises(DivergenceError) as exc:
            collect_trajectory(_make_task(), spec, cfg, np.random.default_rng(0))
    assert exc.value.epoch == 1


def _reference_iterates(task, spec, cfg, seed, steps):
    """Adam on the clean support set, with the SAM perturbation when rho > 0."""
    theta = init_network(spec, cfg.init_std, np.random.default_rng(seed))
    state = AdamState.zeros(spec.parameter_count, lr=cfg.lr)
    iterates = [theta.copy()]
    for _ in range(steps):
        perturbed = theta
        if cfg.rho > 0:
            perturbed = theta + sam_perturb(task_loss_grad(spec, theta, task.support).grad, cfg.rho)
        theta, state = adam_step(state, theta, task_loss_grad(spec, perturbed, task.support).grad)
        iterates.append(theta.copy())
    return np.stack(iterates)


@pytest.mark.parametrize("rho", [0.0, 0.05])
def test_collection_without_augmentation_matches_reference_loop(rho):
    spec = downstream_spec("blobs", 2, hidden=(4,))
    task = _make_task(4)
    cfg = PrepConfig(rho=rho, noise_std=0.0, rotate=False, max_epochs=9, patience=3, k=3)
    traj = collect_trajectory(task, spec, cfg, np.random.default_rng(11))
    np.testing.assert_array_equal(traj.thetas, _reference_iterates(task, spec, cfg, 11, traj.M))


def test_sam_changes_the_iterates():
    spec = downstream_spec("blobs", 2, hidden=(4,))
    task = _make_task(4)
    plain = PrepConfig(rho=0.0, noise_std=0.0, max_epochs=6, patience=6, k=3)
    sam = replace(plain, rho=0.05)
    a = collect_trajectory(task, spec, plain, np.random.default_rng(11))
    b = collect_trajectory(task, spec, sam, np.random.default_rng(11))
    np.testing.assert_array_equal(a.theta_0, b.theta_0)
    assert a.M == b.M == 6
    assert not np.array_equal(a.theta_M, b.theta_M)


# ──────────────────────────────────────────────────────────────────────────────
# Truncation and local targets
# ──────────────────────────────────────────────────────────────────────────────

def test_local_targets_are_evenly_spaced_iterates():
    traj = _make_trajectory(M=6)
    targets = sample_local_targets(traj, 3)
    assert targets.d == 2
    for i in (1, 2, 3):
        np.testing.assert_array_equal(targets.target(i), traj.thetas[2 * i])


def test_last_local_target_is_final_weights():
    traj = _make_trajectory(M=6)
    np.testing.assert_array_equal(sample_local_targets(traj, 2).target(2), traj.theta_M)


def test_local_targets_are_copies():
    traj = _make_trajectory(M=4)
    sample_local_targets(traj, 2).target(1)[0] = -1.0
    assert traj.thetas[2, 0] != -1.0


def test_local_targets_need_k_dividing_M():
    with pytest.raises(ScheduleError):
        sample_local_targets(_make_trajectory(M=6), 4)


def test_truncation_keeps_prefix():
    traj = _make_trajectory(M=7)
    cut = truncate_trajectory(traj, 3, final_loss=0.5)
    assert cut.M == 6
    np.testing.assert_array_equal(cut.thetas, traj.thetas[:7])
    assert cut.final_loss == 0.5


def test_truncation_no_op_when_divisible():
    traj = _make_trajectory(M=6)
    assert truncate_trajectory(traj, 3) is traj


def test_truncation_rejects_short_trajectory():
    with pytest.raises(ScheduleError):
        truncate_trajectory(_make_trajectory(M=2), 3)


# ──────────────────────────────────────────────────────────────────────────────
# Binary records
# ──────────────────────────────────────────────────────────────────────────────

def test_saved_trajectory_loads_back(tmp_path):
    traj = _make_trajectory(M=4, task_id=123)
    path = tmp_path / "task.traj"
    save_trajectory(traj, path)
    loaded = load_trajectory(path, output_head="mse")
    assert loaded.task_id == 123
    assert loaded.spec == traj.spec
    np.testing.assert_array_equal(loaded.thetas, traj.thetas)
    assert loaded.final_loss == traj.final_loss


def test_bad_magic_reported(tmp_path):
    path = tmp_path / "bad.traj"
    path.write_bytes(b"NOTATRAJ" + b"\x00" * 32)
    with pytest.raises(RecordFormatError) as exc:
        load_trajectory(path)
    assert exc.value.field == "magic"
    assert exc.value.offset == 0


def test_truncated_file_reports_field(tmp_path):
    path = tmp_path / "cut.traj"
    save_trajectory(_make_trajectory(M=3), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(RecordFormatError) as exc:
        load_trajectory(path, output_head="mse")
    assert exc.value.field == "trailer"


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "long.traj"
    save_trajectory(_make_trajectory(M=3), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(RecordFormatError) as exc:
        load_trajectory(path, output_head="mse")
    assert exc.value.field == "eof"
