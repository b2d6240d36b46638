"""
Training losses and the reverse inference chain.

vanilla:  x_t = sqrt(abar_t) theta + sqrt(1-abar_t) eps
          L   = ||eps_phi(x_t, t) - eps||^2

local:    x_t = sqrt(abar^i_t) theta_{i*d} + sqrt(1-abar^i_t) eps
          L   = ||sqrt(1-abar^i_t) eps_phi(x_t, t) - sqrt(1-abar_t) eps||^2

When segment i ends at T the two square roots are the same number, they
cancel, and the local loss is evaluated in the vanilla form.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .denoiser import NoisePredictor
from .nn_core import NonFiniteError
from .schedule import NoiseSchedule, ScheduleError, alpha_bar, alpha_bar_local
from .tasks import TaskEmbedding
from .weightprep import LocalTargetSet


InferenceMode = Literal["posterior", "eq2"]
INFERENCE_MODES: tuple[str, ...] = ("posterior", "eq2")


@dataclass(frozen=True)
class LossSample:
    value: float
    grad_phi: np.ndarray


@dataclass(frozen=True)
class InferenceChain:
    states: np.ndarray  # (T+1, D)
    readouts: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _check_step(t: int, end: int) -> None:
    if not 0 <= t < end:
        raise ScheduleError(f"t={t} outside [0, {end})")


def _residual_loss(
    den: NoisePredictor,
    x_t: np.ndarray,
    t: int,
    emb: TaskEmbedding,
    eps: np.ndarray,
    model_scale: float,
    noise_scale: float,
) -> LossSample:
    eps_hat, pullback = den.predict_with_pullback(x_t, t, emb)
    residual = model_scale * eps_hat - noise_scale * eps
    value = float(residual @ residual)
    grad_phi = pullback(2.0 * model_scale * residual)
    return LossSample(value=value, grad_phi=grad_phi)


def vanilla_loss_sample(
    den: NoisePredictor,
    s: NoiseSchedule,
    theta_target: np.ndarray,
    t: int,
    eps: np.ndarray,
    emb: TaskEmbedding,
) -> LossSample:
    _check_step(t, s.T)
    ab = alpha_bar(s, t)
    x_t = np.sqrt(ab) * theta_target + np.sqrt(1.0 - ab) * eps
    return _residual_loss(den, x_t, t, emb, eps, 1.0, 1.0)


def local_loss_sample(
    den: NoisePredictor,
    s: NoiseSchedule,
    theta_local: np.ndarray,
    i: int,
    t: int,
    eps: np.ndarray,
    emb: TaskEmbedding,
) -> LossSample:
    _check_step(t, s.boundary(i))
    ab_local = alpha_bar_local(s, t, i)
    x_t = np.sqrt(ab_local) * theta_local + np.sqrt(1.0 - ab_local) * eps
    if s.boundary(i) == s.T:
        return _residual_loss(den, x_t, t, emb, eps, 1.0, 1.0)
    model_scale = np.sqrt(1.0 - ab_local)
    noise_scale = np.sqrt(1.0 - alpha_bar(s, t))
    return _residual_loss(den, x_t, t, emb, eps, model_scale, noise_scale)


def expected_local_loss(
    den: NoisePredictor,
    s: NoiseSchedule,
    targets: LocalTargetSet,
    emb: TaskEmbedding,
    n_mc: int,
    rng: np.random.Generator,
) -> LossSample:
    """Monte-Carlo average over i ~ U{1..k}, t ~ U[0, i*T/k), eps ~ N(0, I)."""
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    if targets.k != s.k:
        raise ScheduleError(f"target set has k={targets.k}, schedule has k={s.k}")
    total = 0.0
    grad = None
    for _ in range(n_mc):
        i = int(rng.integers(1, s.k + 1))
        t = int(rng.integers(0, s.boundary(i)))
        eps = rng.standard_normal(den.D)
        sample = local_loss_sample(den, s, targets.target(i), i, t, eps, emb)
        total += sample.value
        grad = sample.grad_phi if grad is None else grad + sample.grad_phi
    return LossSample(value=total / n_mc, grad_phi=grad / n_mc)


# ──────────────────────────────────────────────────────────────────────────────
# Inference
# ──────────────────────────────────────────────────────────────────────────────

def inference_step(
    den: NoisePredictor,
    s: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    emb: TaskEmbedding,
    mode: InferenceMode = "posterior",
) -> np.ndarray:
    _check_step(t, s.T)
    eps_hat = den.predict(x_t, t, emb)
    if mode == "posterior":
        alpha_t = s.alphas[t]
        coef = (1.0 - alpha_t) / (np.sqrt(1.0 - alpha_bar(s, t)) * np.sqrt(alpha_t))
        return x_t / np.sqrt(alpha_t) - coef * eps_hat
    if mode == "eq2":
        ab_next = alpha_bar(s, t + 1)
        return (x_t - np.sqrt(1.0 - ab_next) * eps_hat) / np.sqrt(ab_next)
    raise ValueError(f"unknown inference mode {mode!r}")


def generate_chain(
    den: NoisePredictor,
    s: NoiseSchedule,
    x_0: np.ndarray,
    emb: TaskEmbedding,
    mode: InferenceMode = "posterior",
) -> InferenceChain:
    x = np.asarray(x_0, dtype=np.float64)
    if x.shape != (den.D,):
        raise ValueError(f"x_0 has shape {x.shape}, expected ({den.D},)")
    states = np.empty((s.T + 1, den.D))
    states[0] = x
    for t in range(s.T):
        x = inference_step(den, s, x, t, emb, mode)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state after inference step {t}", step=t)
        states[t + 1] = x
    readouts = {i: states[s.boundary(i)].copy() for i in range(1, s.k + 1)}
    return InferenceChain(states=states, readouts=readouts)


def export_chain_csv(chain: InferenceChain, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "coordinate", "value"])
        for step, state in enumerate(chain.states):
            for coord, value in enumerate(state):
                writer.writerow([step, coord, repr(float(value))])
