"""Adam with the inverse-square-root warmup schedule.

The step size is lr_factor * d_model^-0.5 * min(step^-0.5,
step * warmup^-1.5): linear growth over the warmup, then decay. The update
itself runs through the kernel backend so the whole-parameter sweep is a
single fused loop per tensor when compiled.
"""

from __future__ import annotations

import numpy as np

from semcap import _kernels as K
from semcap.tensor import NumericsError


class WarmupAdam:
    def __init__(self, params: dict, d_model: int, lr_factor: float = 1.0,
                 warmup_steps: int = 1000, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = dict(params)
        self.d_model = d_model
        self.lr_factor = lr_factor
        self.warmup_steps = warmup_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def rate(self, step: int) -> float:
        if step < 1:
            raise NumericsError("schedule is defined for steps >= 1")
        return (self.lr_factor * self.d_model ** -0.5
                * min(step ** -0.5, step * self.warmup_steps ** -1.5))

    def step(self, grads: dict):
        """One update from {param name: gradient array}; missing or None
        entries leave the parameter untouched."""
        self.step_count += 1
        lr = self.rate(self.step_count)
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for {name}")
            K.active.adam_step(
                p.data.reshape(-1), np.ascontiguousarray(
                    g.reshape(-1), dtype=p.data.dtype),
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                lr, self.beta1, self.beta2, self.eps, bias1, bias2)

    # ------------------------------------------------- checkpoint support

    def state_arrays(self):
        return self.m, self.v, self.step_count

    def load_state(self, m: dict, v: dict, step_count: int):
        for k in self.params:
            self.m[k][...] = m[k]
            self.v[k][...] = v[k]
        self.step_count = step_count
