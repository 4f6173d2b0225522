"""Variance schedules for the forward/reverse chains, plus timestep respacing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VARIANCE_MODES = ("fixed-small", "fixed-large", "none")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta[1..T] and their cumulative products.

    Arrays are float64 and 0-indexed: index t-1 holds step t. `alpha_bar(0)`
    is 1 by convention, so `forward_sample(x, 0, ...)` is the identity.
    """

    kind: str
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    # chain positions coincide with base timesteps for an unrespaced schedule
    def net_t(self, t: int) -> int:
        return t

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside 1..{self.steps}")
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside 0..{self.steps}")
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int, mode: str) -> float:
        """Reverse-step noise scale at position t under a fixed-variance mode."""
        if mode not in VARIANCE_MODES:
            raise ValueError(f"unknown variance mode {mode!r}")
        if mode == "none" or t <= 1:
            return 0.0
        b = self.beta(t)
        if mode == "fixed-large":
            return math.sqrt(b)
        abar_prev = self.alpha_bar(t - 1)
        abar = self.alpha_bar(t)
        return math.sqrt(b * (1.0 - abar_prev) / (1.0 - abar))


def make_schedule(kind: str, T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear interpolation or squared-cosine-derived betas over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"invalid beta range ({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((ts + s) / (1.0 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.minimum(1.0 - abar[1:] / abar[:-1], 0.999)
        betas = np.maximum(betas, 1e-12)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind=kind, betas=betas)


@dataclass(frozen=True)
class RespacedSchedule:
    """An evenly-spaced subsequence of a base schedule.

    Per-position betas are recomputed so the running product of (1 - beta')
    reproduces the base cumulative products at the selected indices. The
    reverse chain starts at position ``steps - skip`` and the denoiser is
    conditioned on the base timestep of each position.
    """

    base: NoiseSchedule
    indices: np.ndarray  # 1-based base timesteps, strictly increasing
    skip: int
    betas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if np.any(np.diff(idx) <= 0):
            raise ValueError("respacing indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        abars = self.base.alpha_bars[idx - 1]
        prev = np.concatenate([[1.0], abars[:-1]])
        object.__setattr__(self, "betas", 1.0 - abars / prev)
        object.__setattr__(self, "alpha_bars", abars)

    @property
    def steps(self) -> int:
        return int(self.indices.size)

    @property
    def start(self) -> int:
        """First active position of the reverse chain."""
        return self.steps - self.skip

    def net_t(self, pos: int) -> int:
        if not 1 <= pos <= self.steps:
            raise ValueError(f"position {pos} outside 1..{self.steps}")
        return int(self.indices[pos - 1])

    def beta(self, pos: int) -> float:
        if not 1 <= pos <= self.steps:
            raise ValueError(f"position {pos} outside 1..{self.steps}")
        return float(self.betas[pos - 1])

    def alpha(self, pos: int) -> float:
        return 1.0 - self.beta(pos)

    def alpha_bar(self, pos: int) -> float:
        if pos == 0:
            return 1.0
        if not 1 <= pos <= self.steps:
            raise ValueError(f"position {pos} outside 0..{self.steps}")
        return float(self.alpha_bars[pos - 1])

    def sigma(self, pos: int, mode: str) -> float:
        if mode not in VARIANCE_MODES:
            raise ValueError(f"unknown variance mode {mode!r}")
        if mode == "none" or pos <= 1:
            return 0.0
        b = self.beta(pos)
        if mode == "fixed-large":
            return math.sqrt(b)
        return math.sqrt(b * (1.0 - self.alpha_bar(pos - 1)) / (1.0 - self.alpha_bar(pos)))


def respace(schedule: NoiseSchedule, target_len: int, skip: int = 0) -> RespacedSchedule:
    """Select target_len evenly spaced timesteps (first=1, last=T)."""
    T = schedule.steps
    if not 1 <= target_len <= T:
        raise ValueError(f"target_len {target_len} outside 1..{T}")
    if not 0 <= skip < target_len:
        raise ValueError(f"skip {skip} outside 0..{target_len - 1}")
    if target_len == 1:
        idx = np.array([T], dtype=np.int64)
    else:
        idx = np.rint(np.linspace(1, T, target_len)).astype(np.int64)
    return RespacedSchedule(base=schedule, indices=idx, skip=skip)
