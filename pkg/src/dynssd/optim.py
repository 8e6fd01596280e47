"""Parameter initialisation and the Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_param(rng, cin: int, cout: int, k: int, zero: bool = False) -> tuple[Tensor, Tensor]:
    shape = (cout, cin, k, k)
    w = np.zeros(shape) if zero else glorot_uniform(rng, shape, cin * k * k, cout * k * k)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)


def dense_param(rng, din: int, dout: int) -> tuple[Tensor, Tensor]:
    w = glorot_uniform(rng, (din, dout), din, dout)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(dout), requires_grad=True)


def _as_list(params) -> list[Tensor]:
    if isinstance(params, Mapping):
        return list(params.values())
    return list(params)


def zero_grad(params) -> None:
    for p in _as_list(params):
        p.grad = None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"Adam {name} must be positive")


def adam_step(params: Iterable[Tensor] | Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    plist = _as_list(params)
    missing = [p.name or f"#{i}" for i, p in enumerate(plist) if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: parameters without gradient: {', '.join(missing)}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in plist]
        state.v = [np.zeros_like(p.data) for p in plist]
    if len(state.m) != len(plist):
        raise ValueError("adam_step: parameter set changed since the state was created")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(plist, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError(f"adam_step: moment shape {m.shape} != parameter shape {p.data.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
