"""Optimizers and the parameter EMA.

Three update rules cover every training loop in the toolkit: plain SGD with
momentum, Adam, and AdamW (decoupled weight decay).  The EMA keeps a shadow
copy of the parameters under an inverse decay schedule
d(t) = min(max_decay, (1+t)/(10+t)); the shadow is what gets published for
inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NumericalError
from .nn import ParamStore


@dataclass
class OptimizerState:
    kind: str  # sgd_momentum | adam | adamw
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: ParamStore, lr: float | None = None) -> None:
    """Apply one update in place.  Gradients are left untouched (the caller
    clears them); `lr` overrides the stored rate for warm-up schedules."""
    rate = state.lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    for name in params.names():
        g = params.grad(name)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        theta = params.value(name)
        buf = state.moments.setdefault(name, {})
        if state.kind == "sgd_momentum":
            if state.weight_decay:
                g = g + state.weight_decay * theta
            v = buf.setdefault("v", np.zeros_like(theta))
            v *= state.momentum
            v += g
            theta -= rate * v
        else:
            m = buf.setdefault("m", np.zeros_like(theta))
            v = buf.setdefault("v", np.zeros_like(theta))
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            update = m_hat / (np.sqrt(v_hat) + state.eps)
            if state.kind == "adamw":
                update = update + state.weight_decay * theta
            theta -= rate * update


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    t: int = 0
    max_decay: float = 0.9999


def ema_decay(t: int, max_decay: float) -> float:
    return min(max_decay, (1 + t) / (10 + t))


def ema_init(params: ParamStore, max_decay: float = 0.9999) -> EmaState:
    """Shadow starts as a copy of the parameters, so constant parameters are
    a fixed point of the update from the very first step."""
    return EmaState(shadow={n: params.value(n).copy() for n in params.names()}, max_decay=max_decay)


def ema_update(state: EmaState, params: ParamStore) -> None:
    d = ema_decay(state.t, state.max_decay)
    for name in params.names():
        shadow = state.shadow.get(name)
        current = params.value(name)
        if shadow is None or shadow.shape != current.shape:
            raise DimensionMismatch(f"EMA shadow missing or mis-shaped for {name!r}")
        shadow *= d
        shadow += (1 - d) * current
    state.t += 1


def ema_apply(state: EmaState, params: ParamStore) -> None:
    """Copy the shadow into the live parameters (publishing step)."""
    for name in params.names():
        params.set_value(name, state.shadow[name])
