"""
Tests for the conditional noise predictor:
- sinusoidal timestep embedding
- input validation and output shape
- pullback against central differences
- checkpoint files
"""

import numpy as np
import pytest

from src.weightdiff.denoiser import (
    init_denoiser,
    load_denoiser,
    predict_eps,
    save_denoiser,
    timestep_embed,
)
from src.weightdiff.nn_core import NetworkSpec, SpecError, central_difference, relative_error
from src.weightdiff.tasks import TaskEmbedding
from src.weightdiff.weightprep import RecordFormatError, Trajectory, save_trajectory


def _make_denoiser(D=3, t_embed_dim=4, E=2, hidden=(6,), seed=0, T=8, init_std=0.3):
    return init_denoiser(D, t_embed_dim, E, hidden, np.random.default_rng(seed), T=T, init_std=init_std)


def _make_emb(E=2):
    return TaskEmbedding(np.linspace(-1.0, 1.0, E))


# ──────────────────────────────────────────────────────────────────────────────
# Timestep embedding
# ──────────────────────────────────────────────────────────────────────────────

def test_timestep_embedding_at_zero():
    np.testing.assert_array_equal(timestep_embed(0, 10, 4), [0.0, 1.0, 0.0, 1.0])


def test_timestep_embedding_first_pair():
    emb = timestep_embed(5, 10, 2)
    assert emb[0] == pytest.approx(np.sin(0.5))
    assert emb[1] == pytest.approx(np.cos(0.5))


def test_timestep_embedding_rejects_odd_width():
    with pytest.raises(SpecError):
        timestep_embed(1, 10, 3)


def test_timestep_embedding_rejects_out_of_range_step():
    with pytest.raises(SpecError):
        timestep_embed(11, 10, 4)


# ──────────────────────────────────────────────────────────────────────────────
# Prediction
# ──────────────────────────────────────────────────────────────────────────────

def test_denoiser_input_width():
    den = _make_denoiser(D=5, t_embed_dim=4, E=3)
    assert den.spec.layer_sizes == (12, 6, 5)
    assert den.spec.output_head == "linear"


def test_prediction_has_weight_width():
    den = _make_denoiser()
    assert predict_eps(den, np.zeros(3), 2, _make_emb()).shape == (3,)


def test_zero_parameters_predict_zero():
    den = _make_denoiser()
    den = den.with_phi(np.zeros_like(den.phi))
    np.testing.assert_array_equal(den.predict(np.ones(3), 1, _make_emb()), np.zeros(3))


def test_timestep_changes_prediction():
    den = _make_denoiser()
    x = np.array([0.1, -0.2, 0.3])
    assert not np.allclose(den.predict(x, 0, _make_emb()), den.predict(x, 7, _make_emb()))


def test_wrong_state_width_rejected():
    with pytest.raises(SpecError):
        _make_denoiser().predict(np.zeros(4), 0, _make_emb())


def test_wrong_embedding_width_rejected():
    with pytest.raises(SpecError):
        _make_denoiser().predict(np.zeros(3), 0, _make_emb(E=5))


def test_pullback_matches_central_differences():
    den = _make_denoiser()
    x = np.array([0.4, -0.1, 0.7])
    emb = _make_emb()
    upstream = np.array([1.0, -2.0, 0.5])

    _, pullback = den.predict_with_pullback(x, 3, emb)
    numeric = central_difference(lambda phi: float(upstream @ den.with_phi(phi).predict(x, 3, emb)), den.phi)
    assert relative_error(pullback(upstream), numeric) < 1e-4


# ──────────────────────────────────────────────────────────────────────────────
# Checkpoints
# ──────────────────────────────────────────────────────────────────────────────

def test_checkpoint_restores_state(tmp_path):
    den = _make_denoiser(D=4, t_embed_dim=6, E=3, hidden=(5, 7), T=12)
    path = tmp_path / "den.ckpt"
    save_denoiser(den, path)
    loaded = load_denoiser(path)
    assert (loaded.D, loaded.t_embed_dim, loaded.E, loaded.T) == (4, 6, 3, 12)
    assert loaded.spec == den.spec
    np.testing.assert_array_equal(loaded.phi, den.phi)


def test_trajectory_file_is_not_a_checkpoint(tmp_path):
    spec = NetworkSpec((1, 1), output_head="mse")
    path = tmp_path / "task.traj"
    save_trajectory(Trajectory(0, spec, 1, np.zeros((2, 2)), 0.0), path)
    with pytest.raises(RecordFormatError):
        load_denoiser(path)
