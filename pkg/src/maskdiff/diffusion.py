"""Forward noising, reverse denoising, clean-image prediction, and training."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

from .denoiser import DenoiserNet
from .optim import adamw_step
from .rng import spawn
from .schedule import NoiseSchedule, RespacedSchedule, make_schedule, respace
from .tensor import Graph, NonFiniteError

Schedule = NoiseSchedule | RespacedSchedule


def _predict(net, x: np.ndarray, t: int, schedule: Schedule) -> np.ndarray:
    """Evaluate the noise predictor; plain callables act as oracle stand-ins."""
    base_t = schedule.net_t(t)
    ts = np.full(x.shape[0], base_t, dtype=np.int64)
    if isinstance(net, DenoiserNet):
        return net.predict(x, ts)
    return np.asarray(net(x, ts), dtype=x.dtype)


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: Schedule) -> np.ndarray:
    """Jump straight to noise level t: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"forward_sample: noise shape {eps.shape} != image shape {x0.shape}")
    abar = schedule.alpha_bar(t)
    return (math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps).astype(x0.dtype)


def predict_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: Schedule) -> np.ndarray:
    """Posterior mean of the previous step given the predicted noise."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"predict_mean: prediction shape {eps_hat.shape} != image shape {x_t.shape}")
    a = schedule.alpha(t)
    abar = schedule.alpha_bar(t)
    coef = (1.0 - a) / math.sqrt(1.0 - abar)
    return ((x_t - coef * eps_hat) / math.sqrt(a)).astype(x_t.dtype)


def tweedie_x0(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    schedule: Schedule,
    clamp: tuple[float, float] | None = (-1.5, 1.5),
) -> np.ndarray:
    """Closed-form clean-image estimate from a noisy sample and its noise."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"tweedie_x0: prediction shape {eps_hat.shape} != image shape {x_t.shape}")
    abar = schedule.alpha_bar(t)
    if abar <= 0.0:
        raise ValueError(f"tweedie_x0 undefined at t={t}: cumulative alpha is 0")
    x0 = (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    if clamp is not None:
        x0 = np.clip(x0, clamp[0], clamp[1])
    return x0.astype(x_t.dtype)


def reverse_step(
    net,
    x_t: np.ndarray,
    t: int,
    schedule: Schedule,
    rng: np.random.Generator,
    variance_mode: str = "fixed-small",
    eps_hat: np.ndarray | None = None,
) -> np.ndarray:
    """One denoising transition x_t -> x_{t-1}.

    The final step (t == 1) never adds noise. `eps_hat` short-circuits the
    net evaluation when the prediction is already available.
    """
    if eps_hat is None:
        eps_hat = _predict(net, x_t, t, schedule)
    mu = predict_mean(x_t, t, eps_hat, schedule)
    sig = schedule.sigma(t, variance_mode)
    if sig > 0.0:
        mu = mu + sig * rng.standard_normal(mu.shape, dtype=np.float32).astype(mu.dtype)
    return mu.astype(x_t.dtype)


def sample(
    net,
    respaced: RespacedSchedule,
    count: int,
    rng: np.random.Generator,
    size: int = 32,
    channels: int = 4,
    variance_mode: str = "fixed-small",
) -> np.ndarray:
    """Unconditional ancestral sampling over the full respaced chain."""
    if count < 1:
        raise ValueError("count must be >= 1")
    x = rng.standard_normal((count, channels, size, size), dtype=np.float32)
    for pos in range(respaced.steps, 0, -1):
        x = reverse_step(net, x, pos, respaced, rng, variance_mode)
    return np.clip(x, -1.0, 1.0)


def train_step(
    net: DenoiserNet,
    batch: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    lr: float,
    weight_decay: float = 0.0,
) -> float:
    """One noise-prediction MSE step over a batch of 4-channel samples."""
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ValueError(f"train_step needs a non-empty [N,C,H,W] batch, got {batch.shape}")
    n = batch.shape[0]
    ts = rng.integers(1, schedule.steps + 1, size=n)
    eps = rng.standard_normal(batch.shape, dtype=np.float32)
    abar = schedule.alpha_bars[ts - 1].astype(np.float32)[:, None, None, None]
    x_t = np.sqrt(abar) * batch + np.sqrt(1.0 - abar) * eps

    g = Graph()
    pred, _, leaves = net.forward(g, g.tensor(x_t), ts, train=True)
    diff = pred - g.tensor(eps)
    loss = (diff * diff).mean()
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite training loss; parameters left untouched")
    g.backward(loss)
    grads = {name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None}
    adamw_step(net.params, grads, lr=lr, weight_decay=weight_decay)
    return value


@dataclass
class TrainConfig:
    """Denoiser training hyperparameters (desk-scale defaults)."""

    batch_size: int = 16
    iterations: int = 3000
    lr: float = 2e-4
    weight_decay: float = 0.0
    schedule_kind: str = "cosine"
    timesteps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    respaced_len: int = 50
    skip: int = 20
    seed: int = 0
    base_width: int = 16

    def __post_init__(self):
        for field in ("batch_size", "iterations", "timesteps", "respaced_len", "base_width"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_kind, self.timesteps, self.beta_min, self.beta_max)

    def make_respaced(self) -> RespacedSchedule:
        return respace(self.make_schedule(), self.respaced_len, self.skip)

    def to_dict(self) -> dict[str, object]:
        return {f"train.{k}": v for k, v in asdict(self).items()}


def train_model(
    data: np.ndarray | Sequence[np.ndarray],
    config: TrainConfig,
    rng: np.random.Generator | int | None = None,
    log: Callable[[int, float], None] | None = None,
) -> tuple[DenoiserNet, list[float]]:
    """Train a fresh denoiser on stacked 4-channel samples.

    Batches are drawn with replacement; the loss trace is returned for
    convergence checks.
    """
    stack = np.stack(list(data)) if not isinstance(data, np.ndarray) else data
    if stack.ndim != 4:
        raise ValueError(f"training data must stack to [N,C,H,W], got {stack.shape}")
    rng = spawn(config.seed if rng is None else rng, "train")
    schedule = config.make_schedule()
    net = DenoiserNet.create(rng, in_channels=stack.shape[1], base=config.base_width)
    losses: list[float] = []
    for it in range(config.iterations):
        idx = rng.integers(0, stack.shape[0], size=min(config.batch_size, stack.shape[0]))
        loss = train_step(net, stack[idx], schedule, rng, config.lr, config.weight_decay)
        losses.append(loss)
        if log is not None and (it + 1) % 100 == 0:
            log(it + 1, float(np.mean(losses[-100:])))
    return net, losses
