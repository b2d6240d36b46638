"""
REPTILE meta-training of the denoiser over local target sets, and the plain
REPTILE baseline acting directly on downstream weights.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .denoiser import DenoiserState
from .diffusion import LossSample, local_loss_sample, vanilla_loss_sample
from .nn_core import NetworkSpec, NonFiniteError, init_network, sgd_step, task_loss_grad
from .schedule import NoiseSchedule, ScheduleError
from .tasks import TaskEmbedding, TaskInstance
from .weightprep import LocalTargetSet

log = logging.getLogger(__name__)

LossKind = Literal["local_consistency", "vanilla_on_locals", "vanilla_global_only"]
LOSS_KINDS: tuple[str, ...] = ("local_consistency", "vanilla_on_locals", "vanilla_global_only")

# Report names for each loss kind.
VARIANT_NAMES: dict[str, str] = {
    "local_consistency": "Mc-Di",
    "vanilla_on_locals": "Tw-Di",
    "vanilla_global_only": "Mv-Di",
}

TargetStore = Sequence[tuple[LocalTargetSet, TaskEmbedding]]


@dataclass(frozen=True)
class MetaConfig:
    eta: float = 0.005
    zeta: float = 0.001
    K: int = 3
    B: int = 5
    epochs: int = 6000
    loss_kind: LossKind = "local_consistency"
    n_mc: int = 1
    log_every: int = 500
    baseline_inner_lr: float = 0.02
    baseline_outer_lr: float = 0.1

    def __post_init__(self) -> None:
        if self.eta < 0 or self.zeta < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.K < 0 or self.epochs < 0:
            raise ValueError("K and epochs must be nonnegative")
        if self.B < 1 or self.n_mc < 1:
            raise ValueError("B and n_mc must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def grad_evals_per_epoch(self) -> int:
        return self.B * self.K * self.n_mc


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    seg_losses: tuple[float, ...]
    wall_clock: float


@dataclass
class TrainLog:
    seed: int
    k: int
    records: list[EpochRecord] = field(default_factory=list)
    grad_evals: int = 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "mean_loss", *[f"loss_seg_{i}" for i in range(1, self.k + 1)], "seed"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.mean_loss), *[repr(v) for v in r.seg_losses], self.seed])


@dataclass(frozen=True)
class InnerLoopResult:
    phi: np.ndarray
    losses: tuple[float, ...]


# ──────────────────────────────────────────────────────────────────────────────
# Inner / outer loop
# ──────────────────────────────────────────────────────────────────────────────

def _step_loss(
    den: DenoiserState,
    target: np.ndarray,
    i: int,
    emb: TaskEmbedding,
    s: NoiseSchedule,
    loss_kind: LossKind,
    rng: np.random.Generator,
) -> LossSample:
    if loss_kind == "local_consistency":
        t = int(rng.integers(0, s.boundary(i)))
        eps = rng.standard_normal(den.D)
        return local_loss_sample(den, s, target, i, t, eps, emb)
    t = int(rng.integers(0, s.T))
    eps = rng.standard_normal(den.D)
    return vanilla_loss_sample(den, s, target, t, eps, emb)


def inner_loop(
    den: DenoiserState,
    target: np.ndarray,
    i: int,
    task_emb: TaskEmbedding,
    s: NoiseSchedule,
    cfg: MetaConfig,
    rng: np.random.Generator,
) -> InnerLoopResult:
    """K plain gradient-descent steps from a copy of phi, fresh (t, eps) each step."""
    if not 0 < i <= s.k:
        raise ScheduleError(f"segment index i={i} outside (0, {s.k}]")
    phi = den.phi.copy()
    losses = []
    for step in range(cfg.K):
        current = den.with_phi(phi)
        total = 0.0
        grad = np.zeros_like(phi)
        for _ in range(cfg.n_mc):
            sample = _step_loss(current, target, i, task_emb, s, cfg.loss_kind, rng)
            total += sample.value
            grad += sample.grad_phi
        loss = total / cfg.n_mc
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite inner loss at inner step {step}", step=step)
        losses.append(loss)
        phi = sgd_step(phi, grad / cfg.n_mc, cfg.eta)
    return InnerLoopResult(phi=phi, losses=tuple(losses))


def outer_update(phi: np.ndarray, deltas: Sequence[np.ndarray], zeta: float) -> np.ndarray:
    if len(deltas) == 0:
        raise ValueError("outer update needs at least one delta")
    total = np.zeros_like(phi)
    for delta in deltas:
        if np.shape(delta) != np.shape(phi):
            raise ValueError(f"delta shape {np.shape(delta)} does not match phi {np.shape(phi)}")
        total += delta
    return phi + (zeta / len(deltas)) * total


def meta_train(
    store: TargetStore,
    den: DenoiserState,
    s: NoiseSchedule,
    cfg: MetaConfig,
    rng: np.random.Generator,
    seed: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[DenoiserState, TrainLog]:
    if not store:
        raise ValueError("target store is empty")
    for targets, _ in store:
        if targets.k != s.k:
            raise ScheduleError(f"target set has k={targets.k}, schedule has k={s.k}")
    train_log = TrainLog(seed=seed, k=s.k)
    phi = den.phi.copy()
    started = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        current = den.with_phi(phi)
        deltas = []
        step_losses: list[float] = []
        seg_sums = np.zeros(s.k)
        seg_counts = np.zeros(s.k)
        for _ in range(cfg.B):
            j = int(rng.integers(0, len(store)))
            i = int(rng.integers(1, s.k + 1))
            if cfg.loss_kind == "vanilla_global_only":
                i = s.k
            targets, emb = store[j]
            result = inner_loop(current, targets.target(i), i, emb, s, cfg, rng)
            deltas.append(result.phi - phi)
            step_losses.extend(result.losses)
            if result.losses:
                seg_sums[i - 1] += result.losses[0]
                seg_counts[i - 1] += 1
        phi = outer_update(phi, deltas, cfg.zeta)
        train_log.grad_evals += cfg.grad_evals_per_epoch

        with np.errstate(invalid="ignore", divide="ignore"):
            seg = np.where(seg_counts > 0, seg_sums / np.maximum(seg_counts, 1), np.nan)
        record = EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(step_losses)) if step_losses else float("nan"),
            seg_losses=tuple(float(v) for v in seg),
            wall_clock=time.perf_counter() - started,
        )
        train_log.records.append(record)
        if on_epoch:
            on_epoch(record)
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("meta epoch %d/%d: mean inner loss %.5f", epoch, cfg.epochs, record.mean_loss)

    return den.with_phi(phi), train_log


def segment_half_life(train_log: TrainLog, i: int) -> int | None:
    """First epoch whose running-minimum loss_seg_i falls below half its first value."""
    initial = None
    best = np.inf
    for r in train_log.records:
        value = r.seg_losses[i - 1]
        if np.isnan(value):
            continue
        if initial is None:
            initial = value
        best = min(best, value)
        if best < 0.5 * initial:
            return r.epoch
    return None


# ──────────────────────────────────────────────────────────────────────────────
# REPTILE on downstream weights
# ──────────────────────────────────────────────────────────────────────────────

def reptile_baseline(
    tasks: Sequence[TaskInstance],
    spec: NetworkSpec,
    cfg: MetaConfig,
    rng: np.random.Generator,
    init_std: float = 0.1,
) -> np.ndarray:
    if not tasks:
        raise ValueError("task collection is empty")
    theta = init_network(spec, init_std, rng)
    for _ in range(cfg.epochs):
        deltas = []
        for _ in range(cfg.B):
            task = tasks[int(rng.integers(0, len(tasks)))]
            adapted = theta.copy()
            for _ in range(cfg.K):
                adapted = sgd_step(adapted, task_loss_grad(spec, adapted, task.support).grad, cfg.baseline_inner_lr)
            deltas.append(adapted - theta)
        theta = outer_update(theta, deltas, cfg.baseline_outer_lr)
    return theta
