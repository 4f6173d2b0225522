"""Loss-guided reverse diffusion that restyles inpainted images toward their source.

The guidance losses see the Tweedie clean-image prediction, and the update
subtracts the gradient of the total loss with respect to the noisy sample
from the plain reverse step. Feature-based terms run on a pluggable
extractor: a fixed seeded conv stack by default, or the denoiser's own
encoder taps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as td
from .denoiser import DenoiserNet
from .diffusion import predict_mean
from .schedule import RespacedSchedule
from .tensor import Graph, Tensor


class FeatureExtractor:
    """Multi-scale spatial features plus a global token for 3-channel images.

    Modes: ``seeded`` (fixed random conv stack, no training) or
    ``denoiser-taps`` (encoder features of a trained net at t=1). The global
    token is the spatial mean of the deepest map.
    """

    def __init__(
        self,
        mode: str = "seeded",
        seed: int = 0,
        widths: tuple[int, ...] = (8, 16, 32),
        net: DenoiserNet | None = None,
        input_size: int = 32,
    ):
        self.mode = mode
        self.seed = seed
        self.input_size = input_size
        if mode == "seeded":
            rng = np.random.Generator(np.random.PCG64(seed))
            self.widths = widths
            self._weights = []
            c_in = 3
            for c_out in widths:
                std = math.sqrt(2.0 / (c_in * 9))
                self._weights.append((rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(np.float32))
                c_in = c_out
            self.token_dim = widths[-1]
        elif mode == "denoiser-taps":
            if net is None:
                raise ValueError("denoiser-taps mode needs a trained net")
            self.net = net
            self.token_dim = net.base * 2
        else:
            raise ValueError(f"unknown extractor mode {mode!r}")

    def features(self, g: Graph, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """Layer maps and global token for [N,3,H,W] input, inside a graph."""
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ValueError(f"extractor expects [N,3,H,W], got {x.data.shape}")
        if self.mode == "seeded":
            maps = []
            h = x
            for i, w in enumerate(self._weights):
                wt = g.tensor(w.astype(x.data.dtype.type))
                h = td.silu(td.conv2d(h, wt, pad=1))
                maps.append(h)
                if i < len(self._weights) - 1:
                    h = td.avgpool2x2(h)
            token = maps[-1].mean(axes=(2, 3))
            return maps, token
        n = x.data.shape[0]
        fill = g.tensor(np.zeros((n, 1) + x.data.shape[2:], dtype=x.data.dtype))
        x4 = td.concat([x, fill], axis=1)
        _, taps, _ = self.net.forward(g, x4, np.ones(n, dtype=np.int64))
        return [taps["enc0"], taps["enc1"], taps["enc2"]], taps["token"]

    def features_np(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        g = Graph()
        maps, token = self.features(g, g.tensor(x))
        return [m.data for m in maps], token.data

    def tokens_np(self, x: np.ndarray) -> np.ndarray:
        """Global tokens only, [N,3,H,W] -> [N,D]."""
        return self.features_np(x)[1]


@dataclass
class StyleWeights:
    """Loss-term weights and guidance step parameters.

    ``extra_pixel_mse`` is accepted for config compatibility but unused
    unless folded into the pixel term, since the total loss has a single
    pixel-distance component.
    """

    contrastive: float = 500.0
    feature_mse: float = 100.0
    extra_pixel_mse: float = 5000.0
    global_token: float = 10000.0
    pixel_mse: float = 10000.0
    semantic_step: float = 40000.0
    out_of_range: float = 200.0
    fold_extra_mse: bool = False
    step_scale: float = 1.0
    grad_clip: float = 10.0
    temperature: float = 0.07
    locations: int = 16

    def __post_init__(self):
        for name in (
            "contrastive", "feature_mse", "extra_pixel_mse", "global_token",
            "pixel_mse", "semantic_step", "out_of_range",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"style weight {name} must be >= 0")

    @property
    def effective_pixel_mse(self) -> float:
        return self.pixel_mse + (self.extra_pixel_mse if self.fold_extra_mse else 0.0)

    def any_active(self) -> bool:
        return any(
            w > 0
            for w in (
                self.contrastive, self.feature_mse, self.global_token,
                self.effective_pixel_mse, self.semantic_step, self.out_of_range,
            )
        )


class StyleTargets:
    """Fixed per-run styling targets plus the previous-step token cache.

    `content` is the inpainted image being restyled (its features anchor
    the content terms and its mask channel stays frozen); `style` is the
    real image the content was inpainted from.
    """

    def __init__(self, content: np.ndarray, style: np.ndarray, extractor: FeatureExtractor):
        if content.shape != style.shape:
            raise ValueError(f"content {content.shape} and style {style.shape} must share dims")
        if content.ndim != 4 or content.shape[1] != 4:
            raise ValueError(f"targets expect [N,4,H,W], got {content.shape}")
        self.content = content.astype(np.float32)
        self.style = style.astype(np.float32)
        self.content_feats, self.content_tokens = extractor.features_np(self.content[:, :3])
        self.style_tokens = extractor.tokens_np(self.style[:, :3])
        self.prev_tokens: np.ndarray | None = None


def zecon_loss(
    feats_x: list[Tensor],
    feats_ref: list[np.ndarray],
    rng: np.random.Generator,
    temperature: float = 0.07,
    locations: int = 16,
) -> Tensor:
    """Patchwise contrastive loss for one image.

    For sampled spatial locations, the feature of the candidate image must
    match the reference feature at the same location against all other
    locations, under cosine-similarity logits. Summed over layers,
    averaged over sampled locations.
    """
    if not feats_x:
        raise ValueError("zecon_loss needs at least one feature layer")
    g = feats_x[0].graph
    total: Tensor | None = None
    for fx, fref in zip(feats_x, feats_ref):
        if fx.data.shape[0] != 1:
            raise ValueError("zecon_loss operates on a single image; slice the batch first")
        c = fx.data.shape[1]
        s = fx.data.shape[2] * fx.data.shape[3]
        if s < 1:
            raise ValueError("zecon_loss: empty feature layer")
        sel = rng.choice(s, size=min(locations, s), replace=False)
        cand = td.permute(fx.reshape(c, s), (1, 0))
        cand = td.l2_normalize_rows(td.take_rows(cand, sel))
        ref = np.ascontiguousarray(fref.reshape(c, s).T)
        ref_t = td.l2_normalize_rows(g.tensor(ref.astype(fx.data.dtype.type)))
        logits = td.matmul(cand, td.permute(ref_t, (1, 0))) * (1.0 / temperature)
        ce = td.softmax_cross_entropy(logits, sel).mean()
        total = ce if total is None else total + ce
    return total


def content_feature_loss(feats_x: list[Tensor], feats_ref: list[np.ndarray]) -> Tensor:
    """MSE between feature maps, averaged over layers (single image or batch sum)."""
    g = feats_x[0].graph
    acc: Tensor | None = None
    for fx, fref in zip(feats_x, feats_ref):
        diff = fx - g.tensor(fref.astype(fx.data.dtype.type))
        per_image_mean = (diff * diff).sum() * (1.0 / float(np.prod(fref.shape[1:])))
        acc = per_image_mean if acc is None else acc + per_image_mean
    return acc * (1.0 / len(feats_x))


def style_token_loss(token_x: Tensor, token_ref: np.ndarray) -> Tensor:
    """Euclidean distance between global tokens (single image row)."""
    diff = token_x - token_x.graph.tensor(token_ref.astype(token_x.data.dtype.type))
    return td.vec_norm(diff)


def semantic_accel_loss(token_now: Tensor, token_prev: np.ndarray | None) -> Tensor:
    """Negated token distance between consecutive predictions; 0 with no cache."""
    g = token_now.graph
    if token_prev is None:
        return g.tensor(np.zeros((), dtype=token_now.data.dtype))
    diff = g.tensor(token_prev.astype(token_now.data.dtype.type)) - token_now
    return -td.vec_norm(diff)


def pixel_l2_loss(x: Tensor, ref: np.ndarray) -> Tensor:
    """Mean squared pixel difference (summed per image when batched)."""
    diff = x - x.graph.tensor(ref.astype(x.data.dtype.type))
    return (diff * diff).sum() * (1.0 / float(np.prod(ref.shape[1:])))


def range_loss(x: Tensor) -> Tensor:
    """Soft box penalty: mean of max(|x|-1, 0)^2; flat inside [-1, 1]."""
    over = td.relu(x - 1.0) + td.relu(-x - 1.0)
    return (over * over).sum() * (1.0 / float(np.prod(x.data.shape[1:])))


def total_loss(
    x0hat: Tensor,
    targets: StyleTargets,
    weights: StyleWeights,
    extractor: FeatureExtractor,
    rngs: list[np.random.Generator],
) -> tuple[Tensor, dict[str, float], np.ndarray]:
    """Weighted styling loss summed over the batch.

    Returns (scalar tensor, per-term raw values, current tokens) so the
    caller can log contributions and update the semantic cache. Raises on
    a non-finite term, naming it.
    """
    g = x0hat.graph
    n, _, hh, ww = x0hat.data.shape
    if len(rngs) != n:
        raise ValueError("need one rng per image for location sampling")
    colors = x0hat.slice([None, (0, 3), None, None])
    feats_x, tokens_x = extractor.features(g, colors)

    terms: dict[str, Tensor] = {}
    if weights.contrastive > 0:
        acc = None
        for i in range(n):
            per_layer = [
                f.slice([(i, i + 1)] + [None] * 3) for f in feats_x
            ]
            refs = [fr[i : i + 1] for fr in targets.content_feats]
            z = zecon_loss(per_layer, refs, rngs[i], weights.temperature, weights.locations)
            acc = z if acc is None else acc + z
        terms["contrastive"] = acc
    if weights.feature_mse > 0:
        terms["feature_mse"] = content_feature_loss(feats_x, targets.content_feats)
    if weights.global_token > 0:
        acc = None
        for i in range(n):
            row = tokens_x.slice([(i, i + 1), None]).reshape(-1)
            t = style_token_loss(row, targets.style_tokens[i])
            acc = t if acc is None else acc + t
        terms["global_token"] = acc
    if weights.effective_pixel_mse > 0:
        terms["pixel_mse"] = pixel_l2_loss(colors, targets.style[:, :3])
    if weights.semantic_step > 0:
        acc = None
        for i in range(n):
            row = tokens_x.slice([(i, i + 1), None]).reshape(-1)
            prev = None if targets.prev_tokens is None else targets.prev_tokens[i]
            t = semantic_accel_loss(row, prev)
            acc = t if acc is None else acc + t
        terms["semantic_step"] = acc
    if weights.out_of_range > 0:
        terms["out_of_range"] = range_loss(colors)

    weight_of = {
        "contrastive": weights.contrastive,
        "feature_mse": weights.feature_mse,
        "global_token": weights.global_token,
        "pixel_mse": weights.effective_pixel_mse,
        "semantic_step": weights.semantic_step,
        "out_of_range": weights.out_of_range,
    }
    total: Tensor | None = None
    logged: dict[str, float] = {}
    for name, term in terms.items():
        value = float(term.data)
        if not np.isfinite(value):
            raise ArithmeticError(f"styling loss term {name!r} is non-finite")
        logged[name] = value
        weighted = term * weight_of[name]
        total = weighted if total is None else total + weighted
    if total is None:
        total = g.tensor(np.zeros((), dtype=x0hat.data.dtype))
    return total, logged, tokens_x.data.copy()


def _clip_rows(grad: np.ndarray, limit: float) -> np.ndarray:
    """Per-image L2 norm clip."""
    flat = grad.reshape(grad.shape[0], -1)
    norms = np.sqrt(np.sum(flat.astype(np.float64) ** 2, axis=1))
    scale = np.minimum(1.0, limit / np.maximum(norms, 1e-12)).astype(np.float32)
    return grad * scale[:, None, None, None]


def guided_reverse_step(
    net: DenoiserNet,
    x_t: np.ndarray,
    pos: int,
    targets: StyleTargets,
    weights: StyleWeights,
    extractor: FeatureExtractor,
    respaced: RespacedSchedule,
    rng: np.random.Generator,
    loc_rngs: list[np.random.Generator] | None = None,
    variance_mode: str = "fixed-small",
) -> tuple[np.ndarray, dict]:
    """One reverse step minus the loss gradient on the color channels.

    The gradient is taken with respect to the noisy sample through the
    Tweedie prediction (and hence through the net). The mask channel is
    pinned to the content target's mask. A non-finite gradient skips the
    guidance for this step and reports it.
    """
    n = x_t.shape[0]
    base_ts = np.full(n, respaced.net_t(pos), dtype=np.int64)
    loc_rngs = loc_rngs or [rng] * n
    info: dict = {"terms": {}, "skipped": False}

    g = Graph()
    xt = g.tensor(x_t, requires_grad=True)
    eps_hat, _, _ = net.forward(g, xt, base_ts)
    abar = respaced.alpha_bar(pos)
    x0h = (xt * (1.0 / math.sqrt(abar)) - eps_hat * (math.sqrt(1.0 - abar) / math.sqrt(abar))).clamp(-1.5, 1.5)

    grad = None
    if weights.any_active():
        loss, terms, tokens = total_loss(x0h, targets, weights, extractor, loc_rngs)
        info["terms"] = terms
        g.backward(loss)
        grad = xt.grad
        targets.prev_tokens = tokens
        if grad is not None and not np.all(np.isfinite(grad)):
            info["skipped"] = True
            grad = None

    x_prev = predict_mean(x_t, pos, eps_hat.data, respaced)
    sig = respaced.sigma(pos, variance_mode)
    if sig > 0.0:
        x_prev = x_prev + sig * rng.standard_normal(x_prev.shape, dtype=np.float32)
    if grad is not None:
        step = _clip_rows(grad.astype(np.float32), weights.grad_clip) * np.float32(weights.step_scale)
        x_prev[:, :3] -= step[:, :3]
    x_prev[:, 3] = targets.content[:, 3]
    return x_prev.astype(np.float32), info


def stylize(
    net: DenoiserNet,
    inpainted: np.ndarray,
    source: np.ndarray,
    respaced: RespacedSchedule,
    weights: StyleWeights,
    extractor: FeatureExtractor,
    rng: np.random.Generator,
    loc_rngs: list[np.random.Generator] | None = None,
    variance_mode: str = "fixed-small",
) -> tuple[np.ndarray, dict]:
    """Restyle inpainted images toward their sources.

    Starts the reverse chain at the post-skip position by forward-noising
    the inpainted batch, runs guided steps to 0, and reattaches the
    inpainted mask channel bit-exactly. Accepts [4,H,W] or [N,4,H,W].
    """
    single = inpainted.ndim == 3
    batch = inpainted[None] if single else inpainted
    src = source[None] if single else source
    if batch.shape != src.shape:
        raise ValueError(f"inpainted {batch.shape} and source {src.shape} must share dims")
    targets = StyleTargets(batch, src, extractor)
    t_start = respaced.start
    eps = rng.standard_normal(batch.shape, dtype=np.float32)
    abar = respaced.alpha_bar(t_start)
    x = (math.sqrt(abar) * batch + math.sqrt(1.0 - abar) * eps).astype(np.float32)
    x[:, 3] = batch[:, 3]
    info: dict = {"skipped_steps": 0, "terms_first": None, "terms_last": None}
    for pos in range(t_start, 0, -1):
        x, step_info = guided_reverse_step(
            net, x, pos, targets, weights, extractor, respaced, rng, loc_rngs, variance_mode
        )
        if step_info["skipped"]:
            info["skipped_steps"] += 1
        if info["terms_first"] is None and step_info["terms"]:
            info["terms_first"] = step_info["terms"]
        if step_info["terms"]:
            info["terms_last"] = step_info["terms"]
    x[:, :3] = np.clip(x[:, :3], -1.0, 1.0)
    x[:, 3] = batch[:, 3]
    out = x[0] if single else x
    return out.astype(np.float32), info
