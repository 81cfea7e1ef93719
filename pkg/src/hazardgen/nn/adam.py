"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)
    v: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta_1 < 1 and 0 <= self.beta_2 < 1):
            raise ValueError("beta_1 and beta_2 must lie in [0, 1)")

    def step(self, params: list[dict[str, np.ndarray]], grads: list[dict[str, np.ndarray]]) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise ValueError(f"{len(params)} parameter groups but {len(grads)} gradient groups")
        if not self.m:
            self.m = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
            self.v = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        self.t += 1
        c1 = 1.0 - self.beta_1**self.t
        c2 = 1.0 - self.beta_2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.keys() != g.keys():
                raise ValueError(f"gradient keys {sorted(g)} do not match parameters {sorted(p)}")
            for k, a in p.items():
                if g[k].shape != a.shape or m[k].shape != a.shape:
                    raise ValueError(f"shape mismatch for {k!r}: param {a.shape}, grad {g[k].shape}")
                m[k] *= self.beta_1
                m[k] += (1.0 - self.beta_1) * g[k]
                v[k] *= self.beta_2
                v[k] += (1.0 - self.beta_2) * np.square(g[k])
                # in place, same operation order as lr * (m / c1) / (sqrt(v / c2) + eps)
                den = np.divide(v[k], c2)
                np.sqrt(den, out=den)
                den += self.epsilon
                step = np.divide(m[k], c1)
                step *= self.learning_rate
                step /= den
                a -= step


def adam_step(state: Adam, params, grads):
    """Functional form: applies one update in place and returns ``(params, state)``."""
    state.step(params, grads)
    return params, state
