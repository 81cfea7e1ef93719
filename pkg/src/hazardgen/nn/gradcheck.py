"""Central finite-difference checks of the analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Layer
from .network import Network, make_rng

TOLERANCE = 1e-4
MAX_PARAMS = 10_000
# absolute floor on the error denominator
_DENOM_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, resolution: float = 0.0) -> float:
    """``||a - n|| / max(||a|| + ||n||, 1e-6, resolution / TOLERANCE)``.

    ``resolution`` is the round-off level of the numeric gradient; a
    disagreement below it cannot be resolved and so does not count as one.
    """
    diff = np.linalg.norm(analytic - numeric)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), _DENOM_FLOOR, resolution / TOLERANCE)
    return float(diff / denom)


def _resolution(value: float, size: int, step: float) -> float:
    # central differences of f carry ~eps*|f|/step round-off per entry
    return 10.0 * np.sqrt(size) * np.finfo(np.float64).eps * max(abs(value), 1.0) / step


def _numeric_grad(f, arr: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return grad


@dataclass
class GradCheckReport:
    per_layer: dict[str, float]
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.per_layer.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        return [f"{name:<24s} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}" for name, err in self.per_layer.items()]


def gradient_check(
    network: Network | list[Layer],
    seed: int = 0,
    batch: int = 4,
    step: float = 1e-5,
    train: bool = True,
    inputs: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``sum(R * net(x))``.

    ``R`` is a fixed random projection. Dropout masks are held fixed by
    re-seeding the layer rng for every evaluation, and running statistics
    are left untouched. The report holds, per layer, the worst relative
    error over its parameter arrays; the entry ``"input"`` covers the
    gradient with respect to the network input.
    """
    if not isinstance(network, Network):
        network = Network.build(list(network), make_rng(seed, 0))
    n_params = network.trainable_count()
    if n_params > MAX_PARAMS:
        raise ValueError(f"network has {n_params} parameters; finite differences are capped at {MAX_PARAMS}")
    data_rng = make_rng(seed, 1)
    x = data_rng.standard_normal((batch, *network.in_shape)) if inputs is None else np.array(inputs, dtype=np.float64)
    proj = data_rng.standard_normal((x.shape[0], *network.out_shape))

    def run(inp):
        return network.forward(inp, train, make_rng(seed, 2), update_state=False)

    def f():
        return float(np.sum(run(x)[0] * proj))

    out, caches = run(x)
    dx, grads = network.backward(caches, proj)
    f0 = float(np.sum(out * proj))
    report = {}
    for k, layer in enumerate(network.layers):
        errs = [
            relative_error(grads[k][name], _numeric_grad(f, arr, step), _resolution(f0, arr.size, step))
            for name, arr in network.params[k].items()
        ]
        if errs:
            report[f"{k}:{layer.name}"] = max(errs)
    report["input"] = relative_error(dx, _numeric_grad(f, x, step), _resolution(f0, x.size, step))
    return GradCheckReport(report)


def check_layer(layer: Layer, seed: int = 0, batch: int = 3, step: float = 1e-5, train: bool = True) -> GradCheckReport:
    """Gradient check of a single layer (input and parameter gradients)."""
    return gradient_check([layer], seed=seed, batch=batch, step=step, train=train)
