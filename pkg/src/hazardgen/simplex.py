"""Nelder-Mead downhill simplex minimisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool


def minimize(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    step: Sequence[float] | None = None,
    xtol: float = 1e-8,
    ftol: float = 1e-8,
    max_iter: int = 500,
    reflect: float = 1.0,
    expand: float = 2.0,
    contract: float = 0.5,
    shrink: float = 0.5,
) -> SimplexResult:
    """Minimise ``f`` starting from ``x0``.

    The initial simplex is ``x0`` plus one vertex per coordinate displaced by
    ``step[i]``. Iteration stops once every vertex lies within ``xtol`` of the
    best one (max-norm) and the spread of function values is at most
    ``ftol * max(1, |f_best|)``. Non-finite objective values are treated as
    +inf, so infeasible regions simply repel the simplex.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    if step is None:
        step = np.where(x0 != 0, 0.05 * np.abs(x0), 2.5e-4)
    step = np.asarray(step, dtype=np.float64)

    def g(x):
        v = f(x)
        return v if np.isfinite(v) else np.inf

    sim = np.vstack([x0] + [x0 + np.eye(n)[i] * step[i] for i in range(n)])
    fs = np.array([g(v) for v in sim])
    evals = n + 1
    it = 0
    converged = False
    while it < max_iter:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if np.isfinite(fs[0]):
            x_spread = np.max(np.abs(sim[1:] - sim[0]))
            f_spread = np.max(np.abs(fs[1:] - fs[0]))
            if x_spread <= xtol and f_spread <= ftol * max(1.0, abs(fs[0])):
                converged = True
                break
        it += 1
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + reflect * (centroid - sim[-1])
        fr = g(xr)
        evals += 1
        if fs[0] <= fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[0]:
            xe = centroid + expand * (xr - centroid)
            fe = g(xe)
            evals += 1
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + contract * (xr - centroid)
        else:
            xc = centroid + contract * (sim[-1] - centroid)
        fc = g(xc)
        evals += 1
        if fc < min(fr, fs[-1]):
            sim[-1], fs[-1] = xc, fc
            continue
        sim[1:] = sim[0] + shrink * (sim[1:] - sim[0])
        fs[1:] = [g(v) for v in sim[1:]]
        evals += n
    best = int(np.argmin(fs))
    return SimplexResult(sim[best].copy(), float(fs[best]), it, evals, converged)
