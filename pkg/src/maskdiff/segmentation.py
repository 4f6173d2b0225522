"""Toy segmentation network, augmentation protocols, and train/test loops."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as td
from .data import Sample
from .dtf import load_checkpoint, save_checkpoint
from .metrics import seg_metrics
from .optim import ParamSet, adamw_step
from .rng import spawn, stream
from .tensor import Graph, NonFiniteError

_GN_EPS = 1e-5


def _he_conv(rng, co, ci, k):
    std = math.sqrt(2.0 / (ci * k * k))
    return (rng.standard_normal((co, ci, k, k)) * std).astype(np.float32)


class SegNet:
    """3-channel in, 1-logit out encoder/decoder with two resolution levels."""

    def __init__(self, params: ParamSet, base: int = 16):
        self.params = params
        self.base = base

    @classmethod
    def create(cls, rng: np.random.Generator, base: int = 16) -> "SegNet":
        c1, c2 = base, base * 2
        p = ParamSet()
        p.add("stem.w", _he_conv(rng, c1, 3, 3))
        p.add("stem.b", np.zeros(c1, dtype=np.float32))
        for name, ci, co in (("down1", c1, c2), ("mid", c2, c2), ("up1", c2 + c1, c1), ("head", c1, 1)):
            p.add(f"{name}.gn.g", np.ones(ci, dtype=np.float32))
            p.add(f"{name}.gn.b", np.zeros(ci, dtype=np.float32))
            p.add(f"{name}.conv.w", _he_conv(rng, co, ci, 3))
            p.add(f"{name}.conv.b", np.zeros(co, dtype=np.float32))
        return cls(p, base=base)

    def forward(self, g: Graph, x, train: bool = False):
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ValueError(f"segnet expects [N,3,H,W], got {x.data.shape}")
        w = {name: g.tensor(arr, requires_grad=train) for name, arr in self.params.params.items()}

        def block(name, h):
            ch = h.data.shape[1]
            h = td.group_norm(h, w[f"{name}.gn.g"], w[f"{name}.gn.b"], groups=min(8, ch), eps=_GN_EPS)
            h = td.silu(h)
            return td.bias_add(td.conv2d(h, w[f"{name}.conv.w"], pad=1), w[f"{name}.conv.b"])

        h0 = td.bias_add(td.conv2d(x, w["stem.w"], pad=1), w["stem.b"])
        h1 = block("down1", td.avgpool2x2(h0))
        mid = block("mid", h1)
        u1 = block("up1", td.concat([td.upsample2x(mid), h0], axis=1))
        logits = block("head", u1)
        return logits, w

    def predict(self, x: np.ndarray) -> np.ndarray:
        g = Graph()
        logits, _ = self.forward(g, g.tensor(x))
        return logits.data

    def save(self, path: str | Path, config: dict[str, object] | None = None) -> None:
        meta = {"segnet.base": self.base}
        if config:
            meta.update(config)
        save_checkpoint(path, self.params.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> "SegNet":
        tensors, config = load_checkpoint(path)
        return cls(ParamSet(tensors), base=int(config.get("segnet.base", 16)))


@dataclass
class AugPlan:
    """Replacement-style augmentation of a small real set with synthetics."""

    alpha: float
    r: int = 3
    m: int = 3
    seed: int = 0
    mode: str = "replace"  # or "add": keep the real image alongside

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 1 <= self.r <= self.m:
            raise ValueError(f"r={self.r} must be in 1..m={self.m}")
        if self.mode not in ("replace", "add"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")


def augment_dataset(
    real: list[Sample],
    synth: dict[str, list[Sample]],
    plan: AugPlan,
) -> list[Sample]:
    """Per real image: with probability alpha emit r of its synthetics
    (drawn without replacement); otherwise the real image. Order is then
    globally shuffled under the plan seed."""
    rng = stream(plan.seed, "augment")
    out: list[Sample] = []
    for s in real:
        variants = synth.get(s.name, [])
        if len(variants) < plan.r:
            raise ValueError(f"sample {s.name!r} has {len(variants)} synthetics, need r={plan.r}")
        if rng.random() < plan.alpha:
            picks = rng.choice(len(variants), size=plan.r, replace=False)
            if plan.mode == "add":
                out.append(s)
            out.extend(variants[int(i)] for i in picks)
        else:
            out.append(s)
    rng.shuffle(out)
    return out


def geo_augment(sample: Sample, rng) -> Sample:
    """Horizontal flip (p=0.5), shift up to 3 px with reflect padding, and a
    color-only brightness scale; the mask gets the identical spatial map."""
    x = sample.x
    if x.ndim != 3 or x.shape[0] != 4:
        raise ValueError(f"geo_augment expects [4,H,W], got {x.shape}")
    flip = rng.random() < 0.5
    dy = int(rng.integers(-3, 4))
    dx = int(rng.integers(-3, 4))
    bright = float(rng.uniform(0.9, 1.1))
    out = x[:, :, ::-1] if flip else x
    if dy or dx:
        pad = 3
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        h, w = x.shape[1:]
        out = padded[:, pad + dy : pad + dy + h, pad + dx : pad + dx + w]
    out = out.copy()
    if bright != 1.0:
        out[:3] = np.clip(out[:3] * np.float32(bright), -1.0, 1.0)
    out[3] = np.where(out[3] > 0, 1.0, -1.0)
    return Sample(sample.name, out.astype(np.float32))


@dataclass
class SegTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    lr_drop_epoch: int = 10
    lr_drop_factor: float = 10.0
    weight_decay: float = 0.0
    val_frac: float = 0.2
    augment: bool = True
    base_width: int = 16
    seed: int = 0


def _dice_loss(g: Graph, logits, masks01: np.ndarray, smooth: float = 1.0):
    p = td.sigmoid(logits)
    t = g.tensor(masks01)
    inter = (p * t).sum()
    denom = p.sum() + t.sum()
    return 1.0 - (inter * 2.0 + smooth) / (denom + smooth)


def train_seg(
    data: list[Sample],
    config: SegTrainConfig,
    rng: np.random.Generator | int | None = None,
) -> tuple[SegNet, list[dict]]:
    """Minimize soft Dice on an 80/20 split; keep the best-validation-IoU
    checkpoint. Returns (net with best params, per-epoch history)."""
    if not data:
        raise ValueError("train_seg needs a non-empty dataset")
    for s in data:
        vals = np.unique(s.x[3])
        if not np.all(np.isin(vals, (-1.0, 1.0))):
            raise ValueError(f"sample {s.name!r} mask is not binary")
    rng = spawn(config.seed if rng is None else rng, "seg-train")
    net = SegNet.create(rng, base=config.base_width)

    order = rng.permutation(len(data))
    n_val = max(1, int(round(len(data) * config.val_frac))) if len(data) > 1 else 0
    val = [data[i] for i in order[:n_val]]
    train = [data[i] for i in order[n_val:]] or list(data)

    best_iou = -1.0
    best_params = net.params.copy()
    history: list[dict] = []
    for epoch in range(config.epochs):
        lr = config.lr / (config.lr_drop_factor if epoch >= config.lr_drop_epoch else 1.0)
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            batch = [train[i] for i in perm[start : start + config.batch_size]]
            if config.augment:
                batch = [geo_augment(s, rng) for s in batch]
            xs = np.stack([s.x[:3] for s in batch])
            masks01 = np.stack([(s.x[3] > 0).astype(np.float32)[None] for s in batch])
            g = Graph()
            logits, leaves = net.forward(g, g.tensor(xs), train=True)
            loss = _dice_loss(g, logits, masks01)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite segmentation loss at epoch {epoch}")
            g.backward(loss)
            grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
            adamw_step(net.params, grads, lr=lr, weight_decay=config.weight_decay)
            losses.append(value)
        val_iou = test_seg(net, val)[1] if val else float("nan")
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_iou": val_iou})
        if val and val_iou > best_iou:
            best_iou = val_iou
            best_params = net.params.copy()
    if val:
        net.params = best_params
    return net, history


def test_seg(net: SegNet, test: list[Sample], threshold: float = 0.5) -> tuple[float, float]:
    """Mean (Dice, IoU) of thresholded predictions over a test set."""
    if not test:
        raise ValueError("test set is empty")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    dices, ious = [], []
    chunk = 32
    for i in range(0, len(test), chunk):
        xs = np.stack([s.x[:3] for s in test[i : i + chunk]])
        logits = net.predict(xs)
        probs = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        for j, s in enumerate(test[i : i + chunk]):
            pred = (probs[j] > threshold).astype(np.uint8)
            gt = (s.x[3] > 0).astype(np.uint8)
            d, iou = seg_metrics(pred, gt)
            dices.append(d)
            ious.append(iou)
    return float(np.mean(dices)), float(np.mean(ious))
