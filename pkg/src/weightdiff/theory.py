"""
Numerical checks of the convergence results on constructed quadratics, the
k=1 loss equivalence, gradient fidelity, and a finite-difference power
iteration for the top Hessian eigenvalue.

Quadratic loss:  L(theta) = 1/2 (theta - theta*)^T diag(eigs) (theta - theta*)

Lemma bound:     ||theta_M - theta*||^2 <= (2 psi / mu) (1 - mu/l)^M
Generation:      L(theta_hat) - L(theta*) <= (lambda/2) [c + (2 psi / mu) (1 - mu/l)^M]
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Literal

import numpy as np

from .denoiser import DenoiserState
from .diffusion import local_loss_sample, vanilla_loss_sample
from .nn_core import LabeledBatch, NetworkSpec, central_difference, relative_error, task_loss, task_loss_grad
from .schedule import NoiseSchedule, ScheduleError, alpha_bar, alpha_bar_local
from .tasks import TaskEmbedding

log = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-12
MAX_RESTARTS = 3

Surrogate = Literal["inward", "sphere"]


@dataclass(frozen=True)
class QuadraticProblem:
    eigenvalues: np.ndarray
    theta_star: np.ndarray
    theta_0: np.ndarray

    def __post_init__(self) -> None:
        eigs = np.asarray(self.eigenvalues, dtype=np.float64)
        if eigs.ndim != 1 or eigs.size == 0:
            raise ValueError("eigenvalues must be a non-empty vector")
        if np.any(eigs <= 0):
            raise ValueError("eigenvalues must be positive")
        if self.theta_star.shape != eigs.shape or self.theta_0.shape != eigs.shape:
            raise ValueError("theta_star and theta_0 must match the eigenvalue count")
        object.__setattr__(self, "eigenvalues", eigs)

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    @property
    def mu(self) -> float:
        return float(self.eigenvalues.min())

    @property
    def l(self) -> float:
        return float(self.eigenvalues.max())

    def loss(self, theta: np.ndarray) -> float:
        diff = theta - self.theta_star
        return 0.5 * float(diff @ (self.eigenvalues * diff))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.eigenvalues * (theta - self.theta_star)

    @property
    def psi(self) -> float:
        return self.loss(self.theta_0)


def random_quadratic(rng: np.random.Generator, n_max: int = 20) -> QuadraticProblem:
    n = int(rng.integers(1, n_max + 1))
    mu = float(rng.uniform(0.1, 1.0))
    top = mu * float(rng.uniform(1.0, 10.0))
    eigs = rng.uniform(mu, top, size=n)
    eigs[0] = mu
    if n > 1:
        eigs[-1] = top
    return QuadraticProblem(
        eigenvalues=eigs,
        theta_star=rng.standard_normal(n),
        theta_0=rng.standard_normal(n),
    )


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    holds: bool
    margin: float

    @classmethod
    def compare(cls, lhs: float, rhs: float) -> BoundReport:
        return cls(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + BOUND_TOLERANCE), margin=rhs - lhs)


@dataclass(frozen=True)
class ReportRow:
    check: str
    instance: int
    report: BoundReport
    informational: bool = False

    @property
    def violation(self) -> bool:
        return not self.informational and not self.report.holds


# ──────────────────────────────────────────────────────────────────────────────
# Gradient descent bounds
# ──────────────────────────────────────────────────────────────────────────────

def gradient_descent(p: QuadraticProblem, M: int) -> np.ndarray:
    """Iterates theta_0..theta_M of GD with step 1/l, shape (M+1, n)."""
    thetas = np.empty((M + 1, p.n))
    theta = p.theta_0.copy()
    thetas[0] = theta
    step = 1.0 / p.l
    for t in range(M):
        theta = theta - step * p.grad(theta)
        thetas[t + 1] = theta
    return thetas


def contraction_ratios(p: QuadraticProblem, M: int) -> np.ndarray:
    dist = np.linalg.norm(gradient_descent(p, M) - p.theta_star, axis=1)
    return dist[1:] / dist[:-1]


def _lemma_bound(p: QuadraticProblem, M: int) -> float:
    return (2.0 * p.psi / p.mu) * (1.0 - p.mu / p.l) ** M


def lemma1_verify(p: QuadraticProblem, M: int, rhs_scale: float = 1.0) -> BoundReport:
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    theta_M = gradient_descent(p, M)[-1]
    diff = theta_M - p.theta_star
    return BoundReport.compare(float(diff @ diff), rhs_scale * _lemma_bound(p, M))


def theorem2_verify(
    p: QuadraticProblem,
    c: float,
    M: int,
    rng: np.random.Generator,
    surrogate: Surrogate = "inward",
    rhs_scale: float = 1.0,
) -> BoundReport:
    """
    theta_hat = theta_M + r with ||r||^2 <= c. The "inward" surrogate points r
    against theta_M - theta*, the "sphere" surrogate keeps the raw draw.
    """
    if c < 0:
        raise ValueError(f"c must be nonnegative, got {c}")
    if M < 0:
        raise ValueError(f"M must be nonnegative, got {M}")
    theta_M = gradient_descent(p, M)[-1]
    direction = rng.standard_normal(p.n)
    direction /= np.linalg.norm(direction)
    r = direction * (rng.uniform() * np.sqrt(c))
    if surrogate == "inward":
        if r @ (theta_M - p.theta_star) > 0:
            r = -r
    elif surrogate != "sphere":
        raise ValueError(f"unknown surrogate {surrogate!r}")
    lhs = p.loss(theta_M + r) - p.loss(p.theta_star)
    rhs = 0.5 * p.l * (c + _lemma_bound(p, M))
    return BoundReport.compare(lhs, rhs_scale * rhs)


def lemma1_sweep(
    n_instances: int,
    rng: np.random.Generator,
    n_max: int = 20,
    M_max: int = 50,
    rhs_scale: float = 1.0,
) -> list[ReportRow]:
    rows = []
    for idx in range(n_instances):
        p = random_quadratic(rng, n_max)
        M = int(rng.integers(1, M_max + 1))
        rows.append(ReportRow("lemma1", idx, lemma1_verify(p, M, rhs_scale)))
    return rows


def theorem2_sweep(
    n_instances: int,
    rng: np.random.Generator,
    n_max: int = 20,
    M_max: int = 50,
    surrogate: Surrogate = "inward",
    rhs_scale: float = 1.0,
) -> list[ReportRow]:
    rows = []
    for idx in range(n_instances):
        p = random_quadratic(rng, n_max)
        M = int(rng.integers(0, M_max + 1))
        c = float(rng.uniform(0.0, 1.0))
        report = theorem2_verify(p, c, M, rng, surrogate=surrogate, rhs_scale=rhs_scale)
        rows.append(ReportRow(f"theorem2_{surrogate}", idx, report, informational=surrogate == "sphere"))
    return rows


# ──────────────────────────────────────────────────────────────────────────────
# k = 1 equivalence
# ──────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EquivalenceReport:
    max_loss_diff: float
    max_relative_diff: float
    max_grad_diff: float
    max_coefficient_diff: float


def prop1_check(
    s: NoiseSchedule,
    den: DenoiserState,
    n_trials: int,
    rng: np.random.Generator,
    phi_std: float = 0.1,
) -> EquivalenceReport:
    if s.k != 1:
        raise ScheduleError(f"the k=1 equivalence check needs k=1, got k={s.k}")
    coef_diff = max(abs(alpha_bar_local(s, t, 1) - alpha_bar(s, t)) for t in range(s.T + 1))
    max_loss = max_rel = max_grad = 0.0
    for _ in range(n_trials):
        trial = den.with_phi(phi_std * rng.standard_normal(den.phi.size))
        theta = rng.standard_normal(den.D)
        t = int(rng.integers(0, s.T))
        eps = rng.standard_normal(den.D)
        emb = TaskEmbedding(rng.standard_normal(den.E))
        local = local_loss_sample(trial, s, theta, 1, t, eps, emb)
        vanilla = vanilla_loss_sample(trial, s, theta, t, eps, emb)
        diff = abs(local.value - vanilla.value)
        max_loss = max(max_loss, diff)
        max_rel = max(max_rel, diff / max(abs(vanilla.value), 1e-300))
        max_grad = max(max_grad, float(np.max(np.abs(local.grad_phi - vanilla.grad_phi))))
    return EquivalenceReport(max_loss, max_rel, max_grad, coef_diff)


# ──────────────────────────────────────────────────────────────────────────────
# Gradient fidelity
# ──────────────────────────────────────────────────────────────────────────────

def check_task_gradient(spec: NetworkSpec, w: np.ndarray, batch: LabeledBatch, tol: float = 1e-4) -> BoundReport:
    analytic = task_loss_grad(spec, w, batch).grad
    numeric = central_difference(lambda v: task_loss(spec, v, batch), w)
    return BoundReport.compare(relative_error(analytic, numeric), tol)


def check_denoiser_gradient(
    den: DenoiserState,
    s: NoiseSchedule,
    theta: np.ndarray,
    t: int,
    eps: np.ndarray,
    emb: TaskEmbedding,
    i: int | None = None,
    tol: float = 1e-4,
) -> BoundReport:
    """Analytic grad_phi of the vanilla loss (i=None) or local loss for segment i against central differences."""

    def sample(phi: np.ndarray):
        state = den.with_phi(phi)
        if i is None:
            return vanilla_loss_sample(state, s, theta, t, eps, emb)
        return local_loss_sample(state, s, theta, i, t, eps, emb)

    analytic = sample(den.phi).grad_phi
    numeric = central_difference(lambda phi: sample(phi).value, den.phi)
    return BoundReport.compare(relative_error(analytic, numeric), tol)


# ──────────────────────────────────────────────────────────────────────────────
# Curvature
# ──────────────────────────────────────────────────────────────────────────────

def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def power_iteration_hvp(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray,
    iters: int,
    rng: np.random.Generator,
) -> float:
    """
    Top Hessian eigenvalue at w from Hv ~ [g(w + hv) - g(w - hv)] / 2h with
    h = 1e-4 (1 + ||w||). Returns the Rayleigh quotient v.Hv of the last
    unit iterate.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    h = 1e-4 * (1.0 + float(np.linalg.norm(w)))
    v = _random_unit(rng, w.size)
    restarts = 0
    estimate = 0.0
    done = 0
    while done < iters:
        hv = (grad_fn(w + h * v) - grad_fn(w - h * v)) / (2.0 * h)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            restarts += 1
            if restarts > MAX_RESTARTS:
                raise RuntimeError(f"power iteration broke down after {MAX_RESTARTS} restarts")
            log.debug("power iteration hit a zero iterate, restarting (%d)", restarts)
            v = _random_unit(rng, w.size)
            continue
        estimate = float(v @ hv)
        v = hv / norm
        done += 1
    return estimate


def hessian_max_eig(
    spec: NetworkSpec,
    w: np.ndarray,
    batch: LabeledBatch,
    iters: int,
    rng: np.random.Generator,
) -> float:
    return power_iteration_hvp(lambda v: task_loss_grad(spec, v, batch).grad, w, iters, rng)


def write_report_csv(rows: Iterable[ReportRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["check", "instance", "lhs", "rhs", "margin", "holds"])
        for row in rows:
            r = row.report
            writer.writerow([row.check, row.instance, repr(r.lhs), repr(r.rhs), repr(r.margin), r.holds])
