"""
Synthetic few-shot task families, support-set task embeddings and the
augmentation applied while collecting trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .nn_core import LabeledBatch, NetworkSpec, SpecError

TaskFamily = Literal["blobs", "sine"]
FAMILIES: tuple[str, ...] = ("blobs", "sine")

BLOB_MEAN_RANGE = 3.0
BLOB_STD = 0.5
SINE_AMPLITUDE = (0.1, 5.0)
SINE_PHASE = (0.0, np.pi)
SINE_X_RANGE = 5.0


@dataclass(frozen=True)
class TaskInstance:
    family: TaskFamily
    support: LabeledBatch
    query: LabeledBatch
    n_way: int
    k_shot: int
    task_seed: int

    @property
    def input_dim(self) -> int:
        return self.support.inputs.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.family == "blobs"


@dataclass(frozen=True)
class TaskEmbedding:
    vector: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


# ──────────────────────────────────────────────────────────────────────────────
# Sampling
# ──────────────────────────────────────────────────────────────────────────────

def task_from_seed(
    family: TaskFamily,
    n_way: int,
    k_shot: int,
    query_size: int,
    task_seed: int,
) -> TaskInstance:
    """Rebuild the task identified by task_seed; same seed, same task."""
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}")
    if n_way < 1 or k_shot < 1 or query_size < 1:
        raise ValueError("n_way, k_shot and query_size must be positive")
    rng = np.random.default_rng(task_seed)
    if family == "blobs":
        means = rng.uniform(-BLOB_MEAN_RANGE, BLOB_MEAN_RANGE, size=(n_way, 2))
        support = _blob_batch(rng, means, k_shot)
        query = _blob_batch(rng, means, query_size)
        return TaskInstance("blobs", support, query, n_way, k_shot, task_seed)

    amplitude = rng.uniform(*SINE_AMPLITUDE)
    phase = rng.uniform(*SINE_PHASE)
    support = _sine_batch(rng, amplitude, phase, k_shot)
    query = _sine_batch(rng, amplitude, phase, query_size)
    return TaskInstance("sine", support, query, 1, k_shot, task_seed)


def sample_task(
    family: TaskFamily,
    n_way: int,
    k_shot: int,
    query_size: int,
    rng: np.random.Generator,
) -> TaskInstance:
    task_seed = int(rng.integers(0, 2**63 - 1))
    return task_from_seed(family, n_way, k_shot, query_size, task_seed)


def _blob_batch(rng: np.random.Generator, means: np.ndarray, per_class: int) -> LabeledBatch:
    n_way = means.shape[0]
    labels = np.repeat(np.arange(n_way), per_class)
    inputs = means[labels] + rng.normal(0.0, BLOB_STD, size=(labels.shape[0], 2))
    return LabeledBatch(inputs=inputs, targets=labels)


def _sine_batch(rng: np.random.Generator, amplitude: float, phase: float, n: int) -> LabeledBatch:
    x = rng.uniform(-SINE_X_RANGE, SINE_X_RANGE, size=(n, 1))
    return LabeledBatch(inputs=x, targets=amplitude * np.sin(x + phase))


def downstream_spec(family: TaskFamily, n_way: int, hidden: tuple[int, ...] = (32, 32)) -> NetworkSpec:
    """Dense downstream network for a family: [input, *hidden, n_way]."""
    if family == "blobs":
        return NetworkSpec((2, *hidden, n_way), activation="tanh", output_head="softmax_ce")
    return NetworkSpec((1, *hidden, 1), activation="tanh", output_head="mse")


def embedding_dim(family: TaskFamily, n_way: int) -> int:
    if family == "blobs":
        return n_way * 2 * 2
    return 2 * (1 + 1)


# ──────────────────────────────────────────────────────────────────────────────
# Embedding
# ──────────────────────────────────────────────────────────────────────────────

def embed_task(task: TaskInstance) -> TaskEmbedding:
    """
    Per-class support moments, classes in label order: [mean_c, var_c] blocks.
    Regression tasks have a single pseudo-class over joint (x, y) pairs.
    """
    support = task.support
    if task.is_classification:
        labels = support.targets.astype(np.int64).reshape(-1)
        blocks = []
        for c in range(task.n_way):
            members = support.inputs[labels == c]
            if members.shape[0] == 0:
                raise ValueError(f"class {c} has no support samples")
            blocks.append(members.mean(axis=0))
            blocks.append(members.var(axis=0))
        return TaskEmbedding(np.concatenate(blocks))

    if len(support) == 0:
        raise ValueError("support set is empty")
    pairs = np.hstack([support.inputs, np.asarray(support.targets, dtype=np.float64).reshape(len(support), -1)])
    return TaskEmbedding(np.concatenate([pairs.mean(axis=0), pairs.var(axis=0)]))


# ──────────────────────────────────────────────────────────────────────────────
# Augmentation
# ──────────────────────────────────────────────────────────────────────────────

def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def augment(
    batch: LabeledBatch,
    noise_std: float,
    rotate: bool,
    rng: np.random.Generator,
    angle: float | None = None,
) -> LabeledBatch:
    """
    One planar rotation for the whole batch, then i.i.d. Gaussian input noise.
    Draws nothing from rng when both are disabled.
    """
    if noise_std < 0:
        raise ValueError(f"noise_std must be nonnegative, got {noise_std}")
    inputs = batch.inputs
    if rotate:
        if inputs.shape[1] != 2:
            raise SpecError(f"rotation needs 2-dimensional inputs, got {inputs.shape[1]}")
        if angle is None:
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
        inputs = inputs @ rotation_matrix(angle).T
    if noise_std > 0:
        inputs = inputs + rng.normal(0.0, noise_std, size=inputs.shape)
    if inputs is batch.inputs:
        return batch
    return batch.with_inputs(inputs)
