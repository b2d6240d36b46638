"""
Weight preparation: optimize a task's downstream network with SAM-perturbed
Adam on augmented support data, record every iterate, stop early, and sample
the k local targets theta_d, theta_2d, ..., theta_kd from the trajectory.

Trajectory files are little-endian binary:

    magic "MCDITRAJ" | version u32 | task_id u64 | n_sizes u32 | sizes u32[]
    | activation u8 | M u64 | D u64 | (M+1)*D float64 | final_loss float64
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .nn_core import (
    ACTIVATIONS,
    AdamState,
    NetworkSpec,
    NonFiniteError,
    OutputHead,
    adam_step,
    init_network,
    sam_perturb,
    task_loss,
    task_loss_grad,
)
from .schedule import ScheduleError
from .tasks import TaskInstance, augment

log = logging.getLogger(__name__)

TRAJ_MAGIC = b"MCDITRAJ"
FORMAT_VERSION = 1
IMPROVEMENT_THRESHOLD = 1e-4


class DivergenceError(NonFiniteError):
    """Support loss became non-finite while collecting a trajectory."""

    def __init__(self, message: str, *, epoch: int):
        super().__init__(message, step=epoch)
        self.epoch = epoch


class RecordFormatError(ValueError):
    """Malformed weight record file."""

    def __init__(self, message: str, *, field: str, offset: int):
        super().__init__(f"{message} (field {field!r} at byte offset {offset})")
        self.field = field
        self.offset = offset


@dataclass(frozen=True)
class PrepConfig:
    lr: float = 0.005
    rho: float = 0.05
    noise_std: float = 0.05
    rotate: bool = False
    max_epochs: int = 60
    patience: int = 5
    k: int = 3
    init_std: float = 0.1

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.rho < 0 or self.noise_std < 0:
            raise ValueError("rho and noise_std must be nonnegative")
        if self.patience < 1 or self.k < 1:
            raise ValueError("patience and k must be positive")
        if self.max_epochs < self.k:
            raise ValueError(f"max_epochs={self.max_epochs} must be >= k={self.k}")


@dataclass(frozen=True)
class Trajectory:
    task_id: int
    spec: NetworkSpec
    M: int
    thetas: np.ndarray  # (M+1, D)
    final_loss: float

    def __post_init__(self) -> None:
        if self.thetas.ndim != 2 or self.thetas.shape[0] != self.M + 1:
            raise ValueError(f"trajectory needs M+1={self.M + 1} rows, got {self.thetas.shape}")
        if self.thetas.shape[1] != self.spec.parameter_count:
            raise ValueError("trajectory width does not match the network spec")

    @property
    def theta_0(self) -> np.ndarray:
        return self.thetas[0]

    @property
    def theta_M(self) -> np.ndarray:
        return self.thetas[self.M]


@dataclass(frozen=True)
class LocalTargetSet:
    k: int
    d: int
    targets: tuple[np.ndarray, ...]

    def target(self, i: int) -> np.ndarray:
        """theta_{i*d} for segment i in (0, k]."""
        return self.targets[i - 1]


# ──────────────────────────────────────────────────────────────────────────────
# Early stopping
# ──────────────────────────────────────────────────────────────────────────────

def _stop_epoch(loss_history: list[float] | np.ndarray, patience: int) -> int | None:
    """Epoch (1-based) at which `patience` non-improving epochs have piled up."""
    if len(loss_history) == 0:
        raise ValueError("loss history is empty")
    best = loss_history[0]
    waited = 0
    for epoch in range(2, len(loss_history) + 1):
        loss = loss_history[epoch - 1]
        if best - loss >= IMPROVEMENT_THRESHOLD:
            best = loss
            waited = 0
        else:
            waited += 1
            if waited >= patience:
                return epoch
    return None


def determine_M(loss_history: list[float] | np.ndarray, patience: int, k: int) -> int:
    """
    loss_history[e-1] is the support loss after epoch e. The raw stop index is
    the early-stopping epoch (or the history length); M is that rounded down
    to a multiple of k, never below k.
    """
    stop = _stop_epoch(loss_history, patience)
    raw = len(loss_history) if stop is None else stop
    return max(k, (raw // k) * k)


# ──────────────────────────────────────────────────────────────────────────────
# Trajectory collection
# ──────────────────────────────────────────────────────────────────────────────

def collect_trajectory(
    task: TaskInstance,
    spec: NetworkSpec,
    cfg: PrepConfig,
    rng: np.random.Generator,
    task_id: int = 0,
) -> Trajectory:
    if len(task.support) == 0:
        raise ValueError("task support set is empty")
    theta = init_network(spec, cfg.init_std, rng)
    state = AdamState.zeros(spec.parameter_count, lr=cfg.lr)
    thetas = [theta.copy()]
    history: list[float] = []

    for epoch in range(1, cfg.max_epochs + 1):
        batch = augment(task.support, cfg.noise_std, cfg.rotate, rng)
        try:
            if cfg.rho > 0:
                perturbed = theta + sam_perturb(task_loss_grad(spec, theta, batch).grad, cfg.rho)
            else:
                perturbed = theta
            grad = task_loss_grad(spec, perturbed, batch).grad
            theta, state = adam_step(state, theta, grad)
            loss = task_loss(spec, theta, task.support)
        except NonFiniteError as e:
            raise DivergenceError(f"trajectory diverged at epoch {epoch}: {e}", epoch=epoch) from e
        if not np.isfinite(loss):
            raise DivergenceError(f"support loss is {loss} at epoch {epoch}", epoch=epoch)
        thetas.append(theta.copy())
        history.append(loss)
        if epoch >= cfg.k and _stop_epoch(history, cfg.patience) is not None:
            break

    M = determine_M(history, cfg.patience, cfg.k)
    log.debug("task %d: %d epochs run, M=%d, loss %.5f", task_id, len(history), M, history[M - 1])
    return Trajectory(
        task_id=task_id,
        spec=spec,
        M=M,
        thetas=np.stack(thetas[:M + 1]),
        final_loss=history[M - 1],
    )


def truncate_trajectory(traj: Trajectory, k: int, final_loss: float | None = None) -> Trajectory:
    """Cut the trajectory back to the largest multiple of k not above M."""
    if traj.M < k:
        raise ScheduleError(f"trajectory with M={traj.M} is shorter than k={k}")
    M = (traj.M // k) * k
    if M == traj.M:
        return traj
    return replace(
        traj,
        M=M,
        thetas=traj.thetas[:M + 1].copy(),
        final_loss=traj.final_loss if final_loss is None else final_loss,
    )


def sample_local_targets(traj: Trajectory, k: int) -> LocalTargetSet:
    if k < 1 or traj.M % k:
        raise ScheduleError(f"k={k} does not divide M={traj.M}")
    d = traj.M // k
    return LocalTargetSet(k=k, d=d, targets=tuple(traj.thetas[i * d].copy() for i in range(1, k + 1)))


# ──────────────────────────────────────────────────────────────────────────────
# Binary records
# ──────────────────────────────────────────────────────────────────────────────

def encode_record(
    magic: bytes,
    header_id: int,
    spec: NetworkSpec,
    rows: np.ndarray,
    trailer: float,
) -> bytes:
    rows = np.ascontiguousarray(rows, dtype="<f8")
    M = rows.shape[0] - 1
    parts = [
        magic,
        struct.pack("<IQI", FORMAT_VERSION, header_id, len(spec.layer_sizes)),
        struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes),
        struct.pack("<BQQ", ACTIVATIONS.index(spec.activation), M, rows.shape[1]),
        rows.tobytes(),
        struct.pack("<d", trailer),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, fmt: str, field: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise RecordFormatError("file truncated", field=field, offset=self.offset)
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values


def decode_record(
    payload: bytes,
    magic: bytes,
    output_head: OutputHead,
) -> tuple[int, NetworkSpec, np.ndarray, float]:
    if payload[:len(magic)] != magic:
        raise RecordFormatError(f"bad magic, expected {magic!r}", field="magic", offset=0)
    reader = _Reader(payload)
    reader.offset = len(magic)
    (version,) = reader.take("<I", "version")
    if version != FORMAT_VERSION:
        raise RecordFormatError(f"unsupported version {version}", field="version", offset=reader.offset - 4)
    (header_id,) = reader.take("<Q", "header_id")
    (n_sizes,) = reader.take("<I", "layer_count")
    sizes = reader.take(f"<{n_sizes}I", "layer_sizes")
    (act,) = reader.take("<B", "activation")
    if act >= len(ACTIVATIONS):
        raise RecordFormatError(f"unknown activation code {act}", field="activation", offset=reader.offset - 1)
    try:
        spec = NetworkSpec(tuple(sizes), activation=ACTIVATIONS[act], output_head=output_head)
    except ValueError as e:
        raise RecordFormatError(str(e), field="layer_sizes", offset=len(magic) + 16) from e
    M, D = reader.take("<QQ", "M/D")
    if D != spec.parameter_count:
        raise RecordFormatError(
            f"D={D} does not match the header's parameter count {spec.parameter_count}",
            field="D",
            offset=reader.offset - 8,
        )
    n_values = (M + 1) * D
    start = reader.offset
    if start + 8 * n_values > len(payload):
        raise RecordFormatError("weight block truncated", field="weights", offset=start)
    rows = np.frombuffer(payload, dtype="<f8", count=n_values, offset=start).astype(np.float64)
    reader.offset += 8 * n_values
    (trailer,) = reader.take("<d", "trailer")
    if reader.offset != len(payload):
        raise RecordFormatError("trailing bytes after record", field="eof", offset=reader.offset)
    return header_id, spec, rows.reshape(M + 1, D), trailer


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    Path(path).write_bytes(encode_record(TRAJ_MAGIC, traj.task_id, traj.spec, traj.thetas, traj.final_loss))


def load_trajectory(path: str | Path, output_head: OutputHead = "softmax_ce") -> Trajectory:
    task_id, spec, rows, final_loss = decode_record(Path(path).read_bytes(), TRAJ_MAGIC, output_head)
    if rows.shape[0] < 2:
        raise RecordFormatError("trajectory needs M >= 1", field="M", offset=0)
    return Trajectory(task_id=task_id, spec=spec, M=rows.shape[0] - 1, thetas=rows, final_loss=final_loss)
