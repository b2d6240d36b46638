"""
Conditional noise predictor eps_phi(x_t, t, Emb_T): a dense tanh network over
[x_t, sinusoidal(t), task embedding] with a linear head of width D.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .nn_core import NetworkSpec, SpecError, backward, forward_trace, init_network
from .tasks import TaskEmbedding
from .weightprep import RecordFormatError, decode_record, encode_record

DENOISER_MAGIC = b"MCDIDENO"

# Maps dL/d(eps_hat) to dL/d(phi).
Pullback = Callable[[np.ndarray], np.ndarray]


class NoisePredictor(Protocol):
    D: int

    def predict(self, x_t: np.ndarray, t: int, emb: TaskEmbedding) -> np.ndarray: ...

    def predict_with_pullback(
        self, x_t: np.ndarray, t: int, emb: TaskEmbedding
    ) -> tuple[np.ndarray, Pullback]: ...


def timestep_embed(t: int, T: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise SpecError(f"timestep embedding width must be even, got {dim}")
    if not 0 <= t <= T:
        raise SpecError(f"t={t} outside [0, {T}]")
    p = np.arange(dim // 2)
    omega = (1.0 / T) * 10000.0 ** (-2.0 * p / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(t * omega)
    out[1::2] = np.cos(t * omega)
    return out


@dataclass(frozen=True)
class DenoiserState:
    spec: NetworkSpec
    phi: np.ndarray
    D: int
    t_embed_dim: int
    E: int
    T: int

    def __post_init__(self) -> None:
        if self.spec.output_dim != self.D:
            raise SpecError(f"denoiser output width {self.spec.output_dim} != D={self.D}")
        if self.spec.input_dim != self.D + self.t_embed_dim + self.E:
            raise SpecError("denoiser input width must be D + t_embed_dim + E")
        if self.phi.shape != (self.spec.parameter_count,):
            raise SpecError(f"phi has shape {self.phi.shape}, expected ({self.spec.parameter_count},)")

    def with_phi(self, phi: np.ndarray) -> DenoiserState:
        return replace(self, phi=phi)

    def _inputs(self, x_t: np.ndarray, t: int, emb: TaskEmbedding) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (self.D,):
            raise SpecError(f"x_t has shape {x_t.shape}, expected ({self.D},)")
        if emb.dim != self.E:
            raise SpecError(f"task embedding has {emb.dim} entries, expected {self.E}")
        return np.concatenate([x_t, timestep_embed(t, self.T, self.t_embed_dim), emb.vector])[None, :]

    def predict(self, x_t: np.ndarray, t: int, emb: TaskEmbedding) -> np.ndarray:
        return forward_trace(self.spec, self.phi, self._inputs(x_t, t, emb)).output[0]

    def predict_with_pullback(self, x_t: np.ndarray, t: int, emb: TaskEmbedding) -> tuple[np.ndarray, Pullback]:
        trace = forward_trace(self.spec, self.phi, self._inputs(x_t, t, emb))

        def pullback(grad_eps: np.ndarray) -> np.ndarray:
            return backward(self.spec, self.phi, trace, np.asarray(grad_eps)[None, :])

        return trace.output[0], pullback


def init_denoiser(
    D: int,
    t_embed_dim: int,
    E: int,
    hidden: tuple[int, ...] | list[int],
    rng: np.random.Generator,
    T: int = 20,
    init_std: float = 0.05,
) -> DenoiserState:
    if D < 1 or E < 1:
        raise SpecError("D and E must be positive")
    spec = NetworkSpec((D + t_embed_dim + E, *hidden, D), activation="tanh", output_head="linear")
    return DenoiserState(spec=spec, phi=init_network(spec, init_std, rng), D=D, t_embed_dim=t_embed_dim, E=E, T=T)


def predict_eps(state: DenoiserState, x_t: np.ndarray, t: int, emb: TaskEmbedding) -> np.ndarray:
    return state.predict(x_t, t, emb)


def save_denoiser(state: DenoiserState, path: str | Path) -> None:
    header = (state.T << 32) | state.t_embed_dim
    Path(path).write_bytes(encode_record(DENOISER_MAGIC, header, state.spec, state.phi[None, :], 0.0))


def load_denoiser(path: str | Path) -> DenoiserState:
    header, spec, rows, _ = decode_record(Path(path).read_bytes(), DENOISER_MAGIC, "linear")
    if rows.shape[0] != 1:
        raise RecordFormatError("denoiser checkpoint must hold a single vector", field="M", offset=0)
    T, t_embed_dim = header >> 32, header & 0xFFFFFFFF
    D = spec.output_dim
    E = spec.input_dim - D - t_embed_dim
    if E < 1:
        raise RecordFormatError("layer sizes leave no room for a task embedding", field="layer_sizes", offset=24)
    return DenoiserState(spec=spec, phi=rows[0].copy(), D=D, t_embed_dim=t_embed_dim, E=E, T=T)
