"""AdamW with decoupled weight decay and per-tensor learning rates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass
class OptimizerState:
    """First/second moment accumulators shaped like every parameter."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, tensors: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(
            step=0,
            m={k: np.zeros_like(t) for k, t in tensors.items()},
            v={k: np.zeros_like(t) for k, t in tensors.items()},
        )


def adamw_update(
    tensors: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: AdamWConfig,
    lr_for: Callable[[str], float],
) -> OptimizerState:
    """One in-place AdamW step over named tensors.

    Decoupled decay: p <- p - lr*wd*p - lr*mhat/(sqrt(vhat)+eps), with both
    terms computed from the pre-update value.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * np.square(g)
        mhat = m / bc1
        vhat = v / bc2
        lr = lr_for(name)
        p -= (lr * config.weight_decay) * p + lr * (mhat / (np.sqrt(vhat) + config.eps))
    return state
