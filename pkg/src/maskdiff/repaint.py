"""Mask-conditioned generation: known regions re-noised from the source,
unknown regions denoised by the model, harmonized by resampling jumps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import forward_sample, reverse_step
from .schedule import RespacedSchedule

KNOWN, UNKNOWN = 1.0, 0.0


@dataclass
class RepaintMask:
    """Binary keep-mask: 1 = known (kept), 0 = unknown (inpainted)."""

    m: np.ndarray  # [H, W] float32 in {0, 1}
    radius: int
    all_known: bool = field(init=False)
    all_unknown: bool = field(init=False)

    def __post_init__(self):
        vals = np.unique(self.m)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("repaint mask must be binary")
        self.all_known = bool(np.all(self.m == 1.0))
        self.all_unknown = bool(np.all(self.m == 0.0))

    def broadcast(self, channels: int) -> np.ndarray:
        return np.broadcast_to(self.m, (channels,) + self.m.shape)


def default_dilation_radius(height: int) -> int:
    """20 px at 256 resolution, scaled proportionally."""
    return int(round(20 * height / 256))


def binarize_and_dilate(mask01: np.ndarray, threshold: float = 0.5, radius: int | None = None) -> RepaintMask:
    """Label pixels >= threshold, grow them by a Chebyshev radius, invert.

    Input is the [0,1]-scaled label mask; the output marks the dilated
    label region as unknown and everything else as known.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    if mask01.ndim != 2:
        raise ValueError(f"expected a single-channel [H,W] mask, got {mask01.shape}")
    if radius is None:
        radius = default_dilation_radius(mask01.shape[0])
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    label = mask01 >= threshold
    if radius > 0:
        k = 2 * radius + 1
        padded = np.zeros((label.shape[0] + k - 1, label.shape[1] + k - 1), dtype=bool)
        padded[radius:-radius, radius:-radius] = label
        win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
        label = win.any(axis=(2, 3))
    return RepaintMask(m=(1.0 - label.astype(np.float32)), radius=radius)


@dataclass(frozen=True)
class RepaintPlan:
    """Ordered (t_from, t_to) transitions over the active reverse chain."""

    chain_len: int
    jump_len: int
    resamples: int
    transitions: tuple[tuple[int, int], ...]

    @property
    def n_down(self) -> int:
        return sum(1 for a, b in self.transitions if b < a)

    @property
    def n_up(self) -> int:
        return sum(1 for a, b in self.transitions if b > a)


def repaint_plan(chain_len: int, j: int, r: int) -> RepaintPlan:
    """Descend one step at a time; after each j primary down-steps run
    (r - 1) cycles of j up-jumps followed by j down-steps."""
    if chain_len < 1:
        raise ValueError("chain_len must be >= 1")
    if j < 1 or r < 1:
        raise ValueError("jump length and resample count must be >= 1")
    if j > chain_len:
        raise ValueError(f"jump length {j} exceeds chain length {chain_len}")
    transitions: list[tuple[int, int]] = []
    t = chain_len
    downs_in_block = 0
    while t > 0:
        transitions.append((t, t - 1))
        t -= 1
        downs_in_block += 1
        if downs_in_block == j:
            downs_in_block = 0
            for _ in range(r - 1):
                for _ in range(j):
                    transitions.append((t, t + 1))
                    t += 1
                for _ in range(j):
                    transitions.append((t, t - 1))
                    t -= 1
    return RepaintPlan(chain_len=chain_len, jump_len=j, resamples=r, transitions=tuple(transitions))


@dataclass
class GenerationConfig:
    """Per-source inpainting parameters."""

    samples: int = 3
    dilation_radius: int | None = None  # None = resolution-scaled default
    jump_len: int = 5
    resamples: int = 2
    variance_mode: str = "fixed-small"
    mask_threshold: float = 0.5

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.jump_len < 1 or self.resamples < 1:
            raise ValueError("jump_len and resamples must be >= 1")


def repaint_step(
    net,
    x_t: np.ndarray,
    t: int,
    source_x0: np.ndarray,
    mask: RepaintMask,
    schedule: RespacedSchedule,
    rng: np.random.Generator,
    variance_mode: str = "fixed-small",
) -> np.ndarray:
    """Compose the re-noised known region with the denoised unknown one.

    Accepts [C,H,W] or [N,C,H,W]; the mask broadcasts across channels. At
    t-1 == 0 the known part is the clean source (no noise is drawn).
    """
    if x_t.shape != source_x0.shape:
        raise ValueError(f"repaint_step: source shape {source_x0.shape} != sample shape {x_t.shape}")
    m = mask.m
    if t - 1 == 0:
        known = m * source_x0
    else:
        eps = rng.standard_normal(source_x0.shape, dtype=np.float32)
        known = m * forward_sample(source_x0, t - 1, eps, schedule)
    batched = x_t if x_t.ndim == 4 else x_t[None]
    stepped = reverse_step(net, batched, t, schedule, rng, variance_mode)
    if x_t.ndim != 4:
        stepped = stepped[0]
    return (known + (1.0 - m) * stepped).astype(np.float32)


def renoise_step(x: np.ndarray, t_next: int, schedule: RespacedSchedule, rng: np.random.Generator) -> np.ndarray:
    """One-step forward transition x_t -> x_{t+1} used for resampling jumps."""
    b = schedule.beta(t_next)
    eps = rng.standard_normal(x.shape, dtype=np.float32)
    return (np.sqrt(1.0 - b) * x + np.sqrt(b) * eps).astype(np.float32)


def finalize_output(x: np.ndarray, source_x0: np.ndarray, mask: RepaintMask) -> np.ndarray:
    """Clamp colors, re-binarize the mask channel, paste the known region."""
    out = x.astype(np.float32).copy()
    out[:3] = np.clip(out[:3], -1.0, 1.0)
    out[3] = np.where(out[3] >= 0.0, 1.0, -1.0)
    m = mask.m
    return (m * source_x0 + (1.0 - m) * out).astype(np.float32)


def repaint_walk(
    net,
    sources: np.ndarray,
    masks: list[RepaintMask],
    plan: RepaintPlan,
    schedule: RespacedSchedule,
    rngs: list[np.random.Generator],
    variance_mode: str = "fixed-small",
) -> np.ndarray:
    """Run the full RePaint chain for a batch sharing one model.

    Each sample draws noise from its own generator, so results match a
    sequential per-sample walk up to GEMM batching effects.
    """
    n = sources.shape[0]
    if len(masks) != n or len(rngs) != n:
        raise ValueError("sources, masks, and rngs must align")
    mstack = np.stack([mk.broadcast(sources.shape[1]) for mk in masks]).astype(np.float32)
    draw = lambda: np.stack([rng.standard_normal(sources.shape[1:], dtype=np.float32) for rng in rngs])
    x = draw()
    t_to = plan.chain_len
    for t_from, t_to in plan.transitions:
        if t_to < t_from:
            known = mstack * sources if t_to == 0 else mstack * forward_sample(sources, t_to, draw(), schedule)
            stepped = reverse_step(net, x, t_from, schedule, _NullRng(), variance_mode="none")
            sig = schedule.sigma(t_from, variance_mode)
            if sig > 0.0:
                stepped = stepped + sig * draw()
            x = known + (1.0 - mstack) * stepped
        else:
            b = schedule.beta(t_to)
            x = (np.sqrt(1.0 - b) * x + np.sqrt(b) * draw()).astype(np.float32)
    if t_to != 0:
        raise RuntimeError(f"repaint plan ended at {t_to}, expected 0")
    out = np.empty_like(sources)
    for i in range(n):
        out[i] = finalize_output(x[i], sources[i], masks[i])
    return out


class _NullRng:
    """Placeholder generator for deterministic reverse steps."""

    def standard_normal(self, *a, **k):  # pragma: no cover - must never be hit
        raise RuntimeError("deterministic step attempted to draw noise")


def inpaint(
    registry,
    source: np.ndarray,
    source_cluster: int | None,
    config: GenerationConfig,
    rng: np.random.Generator,
    respaced: RespacedSchedule,
) -> tuple[list[np.ndarray], list[str]]:
    """Generate `config.samples` synthetic variants of one labeled image.

    Each variant independently draws a cluster model (uniform over all
    clusters; the full model in full-only registries), obscures the dilated
    label region, and walks the resampling plan. Returns (outputs,
    warnings); the known region of every output equals the source exactly.
    """
    if source.ndim != 3 or source.shape[0] != 4:
        raise ValueError(f"inpaint expects a [4,H,W] source, got {source.shape}")
    mask01 = (source[3] + 1.0) / 2.0
    mask = binarize_and_dilate(mask01, config.mask_threshold, config.dilation_radius)
    warnings: list[str] = []
    if mask.all_known:
        warnings.append("mask has no label region; returning the source unchanged")
        return [source.copy() for _ in range(config.samples)], warnings
    if mask.all_unknown:
        warnings.append("dilated mask covers the whole image; generation is unconditional")
    chain = respaced.start
    plan = repaint_plan(chain, config.jump_len, config.resamples)
    outputs = []
    for k in range(config.samples):
        cluster = registry.pick_model(rng)
        net = registry.load_net(cluster)
        out = repaint_walk(
            net,
            source[None],
            [mask],
            plan,
            respaced,
            [rng],
            variance_mode=config.variance_mode,
        )[0]
        outputs.append(out)
    return outputs, warnings
