"""Adam with bias correction over a :class:`ParamTree`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .params import ParamTree


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: ParamTree, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.reset(params)
        return state

    def reset(self, params: ParamTree) -> None:
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].data) for n in params}
        self.v = {n: np.zeros_like(params[n].data) for n in params}

    def check_congruent(self, params: ParamTree) -> None:
        if sorted(self.m) != list(params) or any(self.m[n].shape != params[n].shape for n in params):
            raise ShapeError("optimizer state is not congruent with the parameter tree")


def adam_step(params: ParamTree, state: AdamState) -> None:
    """One in-place Adam update; gradients are cleared afterwards."""
    state.check_congruent(params)
    missing = [n for n in params if params[n].grad is None]
    if missing:
        raise ContractError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step_count += 1
    t = state.step_count
    for name in params:
        p = params[name]
        dt = p.data.dtype.type
        b1, b2 = dt(state.beta1), dt(state.beta2)
        g = p.grad.astype(p.data.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / dt(1 - state.beta1 ** t)
        v_hat = v / dt(1 - state.beta2 ** t)
        p.data -= dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
        p.grad = None
