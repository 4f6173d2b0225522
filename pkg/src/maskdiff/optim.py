"""Named parameter sets and the AdamW update."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import NonFiniteError


class ParamSet:
    """Named float32 parameters with paired Adam moment buffers.

    The step counter is shared across the set and incremented once per
    `adamw_step` call.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        if params:
            for name, value in params.items():
                self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} contains NaN/Inf")
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())


def adamw_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """One decoupled-weight-decay Adam update, in place.

    Parameters without a gradient entry are left untouched (no decay
    either); a non-finite gradient aborts before any mutation.
    """
    for name, g in grads.items():
        if name not in params.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params.params[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {params.params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")

    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params.params[name]
        g = g.astype(np.float32, copy=False)
        if weight_decay:
            p -= np.float32(lr * weight_decay) * p
        m = params.m[name]
        v = params.v[name]
        m *= np.float32(beta1)
        m += np.float32(1.0 - beta1) * g
        v *= np.float32(beta2)
        v += np.float32(1.0 - beta2) * (g * g)
        mhat = m / np.float32(bc1)
        vhat = v / np.float32(bc2)
        p -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))
    return params
