"""Small 4-channel noise-prediction UNet with timestep embedding and feature taps."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import tensor as td
from .dtf import load_checkpoint, save_checkpoint
from .optim import ParamSet
from .tensor import Graph, Tensor

_GN_EPS = 1e-5


def _groups(channels: int) -> int:
    return min(8, channels)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style sin/cos position features for integer timesteps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb.astype(np.float32)


def _he_conv(rng: np.random.Generator, co: int, ci: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (ci * k * k))
    return (rng.standard_normal((co, ci, k, k)) * std).astype(np.float32)


def _he_linear(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / n_in)
    return (rng.standard_normal((n_in, n_out)) * std).astype(np.float32)


class DenoiserNet:
    """Two-level encoder/decoder over NCHW inputs, output shape == input shape.

    Feature taps: ``enc0`` (full res), ``enc1`` (1/2), ``enc2`` (1/4), and
    ``token`` (global average of the bottleneck map). The head conv is
    zero-initialized so a fresh net predicts zero noise.
    """

    def __init__(self, params: ParamSet, in_channels: int = 4, base: int = 16, emb_dim: int = 64):
        self.params = params
        self.in_channels = in_channels
        self.base = base
        self.emb_dim = emb_dim

    @classmethod
    def create(
        cls, rng: np.random.Generator, in_channels: int = 4, base: int = 16, emb_dim: int = 64
    ) -> "DenoiserNet":
        c1, c2 = base, base * 2
        p = ParamSet()
        p.add("temb.fc.w", _he_linear(rng, emb_dim, emb_dim))
        p.add("temb.fc.b", np.zeros(emb_dim, dtype=np.float32))
        for i, ch in enumerate((c1, c2, c2)):
            p.add(f"temb.inj{i}.w", _he_linear(rng, emb_dim, ch))
            p.add(f"temb.inj{i}.b", np.zeros(ch, dtype=np.float32))
        p.add("stem.w", _he_conv(rng, c1, in_channels, 3))
        p.add("stem.b", np.zeros(c1, dtype=np.float32))
        for name, ci, co in (
            ("down1", c1, c2),
            ("down2", c2, c2),
            ("mid", c2, c2),
            ("up1", c2 + c2, c1),
            ("up2", c1 + c1, c1),
        ):
            p.add(f"{name}.gn.g", np.ones(ci, dtype=np.float32))
            p.add(f"{name}.gn.b", np.zeros(ci, dtype=np.float32))
            p.add(f"{name}.conv.w", _he_conv(rng, co, ci, 3))
            p.add(f"{name}.conv.b", np.zeros(co, dtype=np.float32))
        p.add("head.gn.g", np.ones(c1, dtype=np.float32))
        p.add("head.gn.b", np.zeros(c1, dtype=np.float32))
        p.add("head.conv.w", np.zeros((in_channels, c1, 3, 3), dtype=np.float32))
        p.add("head.conv.b", np.zeros(in_channels, dtype=np.float32))
        return cls(p, in_channels=in_channels, base=base, emb_dim=emb_dim)

    def _leaves(self, g: Graph, train: bool) -> dict[str, Tensor]:
        return {name: g.tensor(arr, requires_grad=train) for name, arr in self.params.params.items()}

    def forward(
        self, g: Graph, x: Tensor, t: np.ndarray, train: bool = False
    ) -> tuple[Tensor, dict[str, Tensor], dict[str, Tensor]]:
        """Predict the noise in `x` at timesteps `t` (one int per sample).

        Returns (prediction, taps, parameter leaf tensors).
        """
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise ValueError(f"denoiser expects [N,{self.in_channels},H,W], got {x.data.shape}")
        w = self._leaves(g, train)

        def block(name: str, h: Tensor) -> Tensor:
            ch = h.data.shape[1]
            h = td.group_norm(h, w[f"{name}.gn.g"], w[f"{name}.gn.b"], groups=_groups(ch), eps=_GN_EPS)
            h = td.silu(h)
            return td.bias_add(td.conv2d(h, w[f"{name}.conv.w"], pad=1), w[f"{name}.conv.b"])

        emb0 = g.tensor(sinusoidal_embedding(t, self.emb_dim).astype(x.data.dtype.type))
        emb = td.silu(td.bias_add(td.matmul(emb0, w["temb.fc.w"]), w["temb.fc.b"]))

        def inject(i: int, h: Tensor) -> Tensor:
            v = td.bias_add(td.matmul(emb, w[f"temb.inj{i}.w"]), w[f"temb.inj{i}.b"])
            return td.channel_add(h, v)

        h0 = td.bias_add(td.conv2d(x, w["stem.w"], pad=1), w["stem.b"])
        h0 = inject(0, h0)
        h1 = inject(1, block("down1", td.avgpool2x2(h0)))
        h2 = inject(2, block("down2", td.avgpool2x2(h1)))
        mid = block("mid", h2)
        token = mid.mean(axes=(2, 3))
        u1 = block("up1", td.concat([td.upsample2x(mid), h1], axis=1))
        u2 = block("up2", td.concat([td.upsample2x(u1), h0], axis=1))
        out = block("head", u2)
        taps = {"enc0": h0, "enc1": h1, "enc2": h2, "token": token}
        return out, taps, w

    def predict(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Plain-array convenience wrapper around `forward`."""
        g = Graph()
        out, _, _ = self.forward(g, g.tensor(x), np.asarray(t))
        return out.data

    def save(self, path: str | Path, config: dict[str, object] | None = None) -> None:
        meta = {
            "net.in_channels": self.in_channels,
            "net.base": self.base,
            "net.emb_dim": self.emb_dim,
        }
        if config:
            meta.update(config)
        save_checkpoint(path, self.params.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["DenoiserNet", dict[str, str]]:
        tensors, config = load_checkpoint(path)
        net = cls(
            ParamSet(tensors),
            in_channels=int(config.get("net.in_channels", 4)),
            base=int(config.get("net.base", 16)),
            emb_dim=int(config.get("net.emb_dim", 64)),
        )
        return net, config
