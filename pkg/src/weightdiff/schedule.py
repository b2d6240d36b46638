"""
Noise-schedule algebra.

Diffusion states run x_0 (noise) -> x_T (weights). With per-step factors
alpha_0..alpha_{T-1}:

    alpha_bar(t)          = prod_{j=t}^{T-1}        alpha_j
    alpha_bar_local(t, i) = prod_{j=t}^{i*T/k - 1}  alpha_j

Both are built by one running multiplication from the top index downward,
so alpha_bar_local(t, k) and alpha_bar(t) are the same float operations and
agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range indices."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    k: int
    alphas: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.T < 1 or self.k < 1:
            raise ScheduleError(f"T and k must be positive, got T={self.T} k={self.k}")
        if self.T % self.k:
            raise ScheduleError(f"segment number k={self.k} must divide T={self.T}")
        if len(self.alphas) != self.T:
            raise ScheduleError(f"expected {self.T} alphas, got {len(self.alphas)}")
        if any(not 0.0 < a < 1.0 for a in self.alphas):
            raise ScheduleError("every alpha must lie strictly inside (0, 1)")
        if any(a > b for a, b in zip(self.alphas, self.alphas[1:])):
            raise ScheduleError("alphas must be nondecreasing")

    @property
    def segment_length(self) -> int:
        return self.T // self.k

    def boundary(self, i: int) -> int:
        """Step index i*T/k at which segment i ends."""
        if not 0 < i <= self.k:
            raise ScheduleError(f"segment index i={i} outside (0, {self.k}]")
        return i * self.segment_length

    @cached_property
    def _local_products(self) -> dict[int, np.ndarray]:
        return {i: _suffix_products(self.alphas, self.boundary(i)) for i in range(1, self.k + 1)}

    def alpha_bar_array(self) -> np.ndarray:
        return self._local_products[self.k].copy()

    def alpha_bar_local_array(self, i: int) -> np.ndarray:
        return self._local_products[i].copy()


def _suffix_products(alphas: tuple[float, ...], end: int) -> np.ndarray:
    out = np.empty(end + 1)
    acc = 1.0
    out[end] = acc
    for j in range(end - 1, -1, -1):
        acc = alphas[j] * acc
        out[j] = acc
    return out


def linear_alpha_schedule(T: int, k: int, alpha_min: float, alpha_max: float) -> NoiseSchedule:
    if not (0.0 < alpha_min < 1.0 and 0.0 < alpha_max < 1.0):
        raise ScheduleError(f"alpha bounds must lie in (0, 1), got [{alpha_min}, {alpha_max}]")
    if alpha_min > alpha_max:
        raise ScheduleError(f"alpha_min {alpha_min} exceeds alpha_max {alpha_max}")
    if T < 1 or k < 1 or T % k:
        raise ScheduleError(f"segment number k={k} must divide T={T}")
    return NoiseSchedule(T=T, k=k, alphas=tuple(np.linspace(alpha_min, alpha_max, T)))


def alpha_bar(s: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise ScheduleError(f"t={t} outside [0, {s.T}]")
    return float(s._local_products[s.k][t])


def alpha_bar_local(s: NoiseSchedule, t: int, i: int) -> float:
    end = s.boundary(i)
    if not 0 <= t <= end:
        raise ScheduleError(f"t={t} outside [0, {end}] for segment i={i}")
    return float(s._local_products[i][t])


def forward_noise(
    s: NoiseSchedule,
    theta_target: np.ndarray,
    t: int,
    i: int | None,
    eps: np.ndarray,
) -> np.ndarray:
    """
    x_t = sqrt(abar) * theta + sqrt(1 - abar) * eps, with the local product for
    segment i, or the global one when i is None. t = i*T/k is accepted and
    returns theta unchanged.
    """
    theta_target = np.asarray(theta_target, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if theta_target.shape != eps.shape:
        raise ScheduleError(f"theta {theta_target.shape} and eps {eps.shape} differ in shape")
    ab = alpha_bar(s, t) if i is None else alpha_bar_local(s, t, i)
    return np.sqrt(ab) * theta_target + np.sqrt(1.0 - ab) * eps
