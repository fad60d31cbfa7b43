"""Adam with bias correction."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import GradMap, Tensor


class Adam:
    """Adam over a fixed, ordered list of parameter tensors.

    Parameters are updated in place.  ``m`` and ``v`` mirror the parameter
    shapes; ``t`` counts completed steps.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: GradMap | Sequence[np.ndarray]):
        if isinstance(grads, dict):
            missing = [p for p in self.params if p not in grads]
            if missing:
                raise KeyError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")
            grads = [grads[p] for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter is required")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} for {p!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=p.dtype)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}m/{i}"] = m
            out[f"{prefix}v/{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str, t: int):
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"{prefix}m/{i}"]
            self.v[i][...] = arrays[f"{prefix}v/{i}"]
        self.t = t
