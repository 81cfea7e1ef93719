"""Sequential networks: parameter ownership, forward/backward over a layer stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ShapeError


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a seed and a stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


@dataclass
class Network:
    """A fixed layer sequence with its trainable parameters and running state."""

    layers: list[Layer]
    params: list[dict[str, np.ndarray]]
    state: list[dict[str, np.ndarray]]
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, layers: list[Layer], rng: np.random.Generator, meta: dict | None = None) -> "Network":
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_shape != nxt.in_shape:
                raise ShapeError(
                    f"layer {prev.name!r} outputs {prev.out_shape} but {nxt.name!r} expects {nxt.in_shape}"
                )
        return cls(layers, [l.init_params(rng) for l in layers], [l.init_state() for l in layers], meta or {})

    @property
    def in_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    def trainable_count(self) -> int:
        return sum(a.size for p in self.params for a in p.values())

    def non_trainable_count(self) -> int:
        return sum(a.size for s in self.state for a in s.values())

    def layer_table(self) -> list[dict]:
        rows = []
        for layer, p, s in zip(self.layers, self.params, self.state):
            rows.append(
                {
                    "name": layer.name,
                    "kind": layer.kind,
                    "in_shape": layer.in_shape,
                    "out_shape": layer.out_shape,
                    "trainable": sum(a.size for a in p.values()),
                    "non_trainable": sum(a.size for a in s.values()),
                }
            )
        return rows

    def forward(self, x, train: bool, rng=None, update_state: bool = True):
        caches = []
        for layer, p, s in zip(self.layers, self.params, self.state):
            x, cache = layer.forward(p, s, x, train, rng, update_state)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activations after layer {layer.name!r}")
            caches.append(cache)
        return x, caches

    def backward(self, caches, dy):
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            dy, grads[k] = self.layers[k].backward(self.params[k], caches[k], dy)
        return dy, grads

    def predict(self, x) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def copy(self) -> "Network":
        return Network(
            self.layers,
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            [{k: v.copy() for k, v in s.items()} for s in self.state],
            dict(self.meta),
        )
