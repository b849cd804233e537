"""Adam and plain gradient descent, plus the piecewise-constant learning-rate schedule."""

from __future__ import annotations

from bisect import bisect_right
from typing import Iterable, Mapping, Optional

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param_name = name


def _named(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "names"):
        return [(name, params[name]) for name in params.names]
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((p.name or f"param{i}", p))
    return out


class Adam:
    """Adam with bias correction. ``lr`` is a plain attribute so schedules can mutate it."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = _named(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for name, _ in self.params:
            state[f"adam.m:{name}"] = self.m[name]
            state[f"adam.v:{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], t: int):
        for name, _ in self.params:
            self.m[name][...] = state[f"adam.m:{name}"]
            self.v[name][...] = state[f"adam.v:{name}"]
        self.t = t


class GradientDescent:
    def __init__(self, params, lr: float = 1e-2):
        self.params = _named(params)
        self.lr = lr
        self.t = 0

    def step(self):
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
        self.t += 1
        for _, p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class StepSchedule:
    """``lr(t) = base * prod(multipliers of milestones <= t)``."""

    def __init__(self, base_lr: float, milestones: Optional[Mapping[int, float]] = None):
        items = sorted((int(k), float(v)) for k, v in (milestones or {}).items())
        for _, mult in items:
            if not 0.0 < mult <= 1.0:
                raise ValueError(f"schedule multipliers must lie in (0, 1], got {mult}")
        self.base_lr = float(base_lr)
        self.steps = [k for k, _ in items]
        self.factors = [1.0]
        for _, mult in items:
            self.factors.append(self.factors[-1] * mult)

    def __call__(self, iteration: int) -> float:
        return self.base_lr * self.factors[bisect_right(self.steps, iteration)]


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        if p.grad is not None:
            p.grad.fill(0)
