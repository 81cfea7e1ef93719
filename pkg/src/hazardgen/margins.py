"""Per-pixel marginal models: GEV distribution functions, maximum-likelihood
fitting, the empirical probability integral transform and its GEV-based
inverse, and the unit-Frechet transform used by the dependence estimators.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gamma as gamma_fn

from . import simplex
from .grid import Dataset

GUMBEL_EPS = 1e-9
MIN_SAMPLES = 30
EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class GevParams:
    shape: float
    loc: float
    scale: float

    def __post_init__(self):
        if not (math.isfinite(self.shape) and math.isfinite(self.loc)):
            raise ValueError(f"GEV shape and location must be finite, got {self.shape}, {self.loc}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"GEV scale must be positive, got {self.scale}")

    @property
    def upper_endpoint(self) -> float:
        return self.loc - self.scale / self.shape if self.shape < -GUMBEL_EPS else math.inf

    @property
    def lower_endpoint(self) -> float:
        return self.loc - self.scale / self.shape if self.shape > GUMBEL_EPS else -math.inf


def _reduced(p: GevParams, x):
    """Return ``log t(x)`` and the support indicator for the GEV at ``x``."""
    z = (np.asarray(x, dtype=np.float64) - p.loc) / p.scale
    if abs(p.shape) < GUMBEL_EPS:
        return -z, np.ones_like(z, dtype=bool)
    arg = p.shape * z
    inside = arg > -1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        log_t = np.where(inside, -np.log1p(np.where(inside, arg, 0.0)) / p.shape, np.nan)
    return log_t, inside


def gev_cdf(p: GevParams, x):
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("gev_cdf is undefined at NaN")
    log_t, inside = _reduced(p, x)
    with np.errstate(over="ignore"):
        cdf = np.exp(-np.exp(np.where(inside, log_t, 0.0)))
    # outside the support: below the lower endpoint (shape > 0) or above the upper one (shape < 0)
    cdf = np.where(inside, cdf, 0.0 if p.shape > 0 else 1.0)
    return cdf if cdf.ndim else float(cdf)


def gev_logpdf(p: GevParams, x):
    x = np.asarray(x, dtype=np.float64)
    log_t, inside = _reduced(p, x)
    with np.errstate(over="ignore", invalid="ignore"):
        out = -math.log(p.scale) + (p.shape + 1.0) * log_t - np.exp(log_t)
    out = np.where(inside, out, -np.inf)
    return out if out.ndim else float(out)


def gev_quantile(p: GevParams, u):
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u > 0) & (u < 1)):
        raise ValueError("gev_quantile needs probabilities strictly inside (0, 1)")
    y = -np.log(-np.log(u))
    if abs(p.shape) < GUMBEL_EPS:
        q = p.loc + p.scale * y
    else:
        q = p.loc + p.scale * np.expm1(p.shape * y) / p.shape
    return q if q.ndim else float(q)


def gev_nll(shape: float, loc: float, scale: float, x: np.ndarray) -> float:
    """Negative log-likelihood; +inf when any sample violates 1 + shape*z > 0."""
    if not scale > 0:
        return math.inf
    z = (x - loc) / scale
    if abs(shape) < GUMBEL_EPS:
        return x.size * math.log(scale) + float(np.sum(z)) + float(np.sum(np.exp(-z)))
    arg = shape * z
    if np.min(arg) <= -1.0:
        return math.inf
    log_t = -np.log1p(arg) / shape
    with np.errstate(over="ignore"):
        val = x.size * math.log(scale) - (shape + 1.0) * float(np.sum(log_t)) + float(np.sum(np.exp(log_t)))
    return val if math.isfinite(val) else math.inf


def pwm_initial(x: np.ndarray) -> GevParams:
    """Probability-weighted-moment estimate (Hosking's L-moment approximation)."""
    xs = np.sort(x)
    n = xs.size
    j = np.arange(n, dtype=np.float64)
    b0 = xs.mean()
    b1 = np.sum(j / (n - 1) * xs) / n
    b2 = np.sum(j * (j - 1) / ((n - 1) * (n - 2)) * xs) / n
    l1, l2, l3 = b0, 2 * b1 - b0, 6 * b2 - 6 * b1 + b0
    if l2 <= 0:
        raise ValueError("degenerate sample")
    c = 2.0 / (3.0 + l3 / l2) - math.log(2) / math.log(3)
    k = 7.8590 * c + 2.9554 * c * c
    k = min(max(k, -0.9), 0.9)
    if abs(k) < 1e-6:
        scale = l2 / math.log(2)
        return GevParams(0.0, l1 - EULER_GAMMA * scale, scale)
    g = gamma_fn(1 + k)
    scale = l2 * k / ((1 - 2.0**-k) * g)
    return GevParams(-k, l1 - scale * (1 - g) / k, scale)


@dataclass(frozen=True)
class GevFit:
    params: GevParams
    loglik: float
    converged: bool
    iterations: int


def fit_gev(samples, max_iter: int = 500, tol: float = 1e-8) -> GevFit:
    """Maximum-likelihood GEV fit by Nelder-Mead on (shape, loc, log scale)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if np.ptp(x) == 0:
        raise ValueError("degenerate sample: all values equal")
    init = pwm_initial(x)
    start = np.array([init.shape, init.loc, math.log(init.scale)])
    if not math.isfinite(gev_nll(init.shape, init.loc, init.scale, x)):
        # Gumbel support is the whole line, so this start is always feasible
        scale = math.sqrt(6 * x.var()) / math.pi
        start = np.array([0.0, x.mean() - EULER_GAMMA * scale, math.log(scale)])

    def objective(theta):
        return gev_nll(theta[0], theta[1], math.exp(theta[2]), x)

    step = [0.05, 0.1 * math.exp(start[2]), 0.1]
    res = simplex.minimize(objective, start, step=step, xtol=tol, ftol=tol, max_iter=max_iter)
    params = GevParams(float(res.x[0]), float(res.x[1]), math.exp(res.x[2]))
    return GevFit(params, -res.fun, res.converged, res.iterations)


# ---------------------------------------------------------------------------
# Marginal model over a gridded dataset


def _perturb_ties(sorted_x: np.ndarray) -> np.ndarray:
    """Make a sorted array strictly increasing by nudging the k-th repeat of a value up k ulps."""
    t = sorted_x + 0.0  # folds -0.0 into 0.0
    if t.size < 2 or np.all(t[1:] > t[:-1]):
        return t
    new_run = np.r_[True, t[1:] != t[:-1]]
    start = np.maximum.accumulate(np.where(new_run, np.arange(t.size), 0))
    k = np.arange(t.size) - start
    bits = t.view(np.int64)
    bits = np.where(t >= 0, bits + k, bits - k)
    out = bits.view(np.float64)
    if np.all(out[1:] > out[:-1]):
        return out
    for i in range(1, t.size):  # nudged run ran into the next value; resolve sequentially
        if t[i] <= t[i - 1]:
            t[i] = np.nextafter(t[i - 1], np.inf)
    return t


def _run_end(t: np.ndarray) -> np.ndarray:
    """Index of the last element of the tie run containing each table entry."""
    same_as_next = np.append(t[1:] == np.nextafter(t[:-1], np.inf), False)
    ends = np.flatnonzero(~same_as_next)
    return ends[np.searchsorted(ends, np.arange(t.size))]


def _ecdf_ranks(t: np.ndarray, run_end: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = t.size
    pos = np.searchsorted(t, x, side="left")
    exact = (pos < n) & (t[np.minimum(pos, n - 1)] == x)
    ranks = np.interp(x, t, np.arange(1, n + 1, dtype=np.float64))
    if exact.any():
        # duplicates of a tabled value take consecutive ranks in order of occurrence
        idx = np.flatnonzero(exact)
        order = idx[np.argsort(x[idx], kind="stable")]
        xs = x[order]
        first = np.r_[True, xs[1:] != xs[:-1]]
        group_start = np.maximum.accumulate(np.where(first, np.arange(xs.size), 0))
        k = np.arange(xs.size) - group_start
        p = pos[order]
        ranks[order] = p + 1 + np.minimum(k, run_end[p] - p)
    return ranks


@dataclass(frozen=True)
class MarginalModel:
    """Empirical CDF tables plus fitted GEV parameters for every valid pixel-channel.

    ``tables`` is ``(C, P, n)`` for the ``P`` valid pixels in row-major order;
    parameter maps are ``(C, H, W)`` with NaN on masked pixels.
    """

    valid_mask: np.ndarray
    channel_names: tuple[str, ...]
    tables: np.ndarray
    shape: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    loglik: np.ndarray
    converged: np.ndarray
    block_size: int = 1

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (len(self.channel_names), *self.valid_mask.shape)

    @property
    def table_size(self) -> int:
        return self.tables.shape[2]

    def params(self, c: int, i: int, j: int) -> GevParams:
        if not self.valid_mask[i, j]:
            raise KeyError(f"pixel ({i}, {j}) is masked")
        return GevParams(float(self.shape[c, i, j]), float(self.loc[c, i, j]), float(self.scale[c, i, j]))

    def unconverged(self) -> list[tuple[int, int, int]]:
        bad = ~self.converged & self.valid_mask
        return [tuple(int(v) for v in idx) for idx in np.argwhere(bad)]

    def check_compatible(self, ds: Dataset) -> None:
        if ds.grid_shape != self.grid_shape:
            raise ValueError(f"dataset grid {ds.grid_shape} does not match model grid {self.grid_shape}")
        if not np.array_equal(ds.valid_mask, self.valid_mask):
            raise ValueError("dataset mask differs from model mask")


def _fit_one(series: np.ndarray, block_size: int):
    x = series
    if block_size > 1:
        m = x.size // block_size
        x = x[: m * block_size].reshape(m, block_size).max(axis=1)
    try:
        fit = fit_gev(x)
        return fit.params, fit.loglik, fit.converged
    except ValueError:
        return GevParams(0.0, float(series.mean()), max(float(series.std()), 1e-9)), math.nan, False


def fit_margins(ds: Dataset, block_size: int = 1, threads: int | None = None) -> MarginalModel:
    """Build the ECDF tables and fit a GEV to every valid pixel-channel series.

    With ``block_size > 1`` the GEV is fitted to block maxima of each series;
    the ECDF table always holds the full series.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    n, c, h, w = ds.values.shape
    mask = ds.valid_mask
    cols = ds.values[:, :, mask]  # (n, C, P)
    p = cols.shape[2]
    tables = np.empty((c, p, n))
    jobs = []
    for ch in range(c):
        for k in range(p):
            tables[ch, k] = _perturb_ties(np.sort(cols[:, ch, k], kind="stable"))
            jobs.append(cols[:, ch, k])
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(lambda s: _fit_one(s, block_size), jobs))
    else:
        fits = [_fit_one(s, block_size) for s in jobs]
    maps = {name: np.full((c, h, w), np.nan) for name in ("shape", "loc", "scale", "loglik")}
    conv = np.zeros((c, h, w), bool)
    ii, jj = np.nonzero(mask)
    for idx, (params, ll, ok) in enumerate(fits):
        ch, k = divmod(idx, p)
        maps["shape"][ch, ii[k], jj[k]] = params.shape
        maps["loc"][ch, ii[k], jj[k]] = params.loc
        maps["scale"][ch, ii[k], jj[k]] = params.scale
        maps["loglik"][ch, ii[k], jj[k]] = ll
        conv[ch, ii[k], jj[k]] = ok
    return MarginalModel(
        valid_mask=mask.copy(),
        channel_names=ds.channel_names,
        tables=tables,
        shape=maps["shape"],
        loc=maps["loc"],
        scale=maps["scale"],
        loglik=maps["loglik"],
        converged=conv,
        block_size=block_size,
    )


def pit(model: MarginalModel, data: Dataset) -> Dataset:
    """Empirical probability integral transform, rank / (n + 1), masked pixels -> 0."""
    model.check_compatible(data)
    n_tab = model.table_size
    cols = data.values[:, :, model.valid_mask]
    out = np.zeros_like(cols)
    for ch in range(cols.shape[1]):
        for k in range(cols.shape[2]):
            t = model.tables[ch, k]
            out[:, ch, k] = _ecdf_ranks(t, _run_end(t), cols[:, ch, k]) / (n_tab + 1)
    values = np.zeros(data.values.shape)
    values[:, :, model.valid_mask] = out
    return data.replace(values)


def inverse_pit(model: MarginalModel, uniforms: Dataset) -> Dataset:
    """Map uniform-scale fields back to data units through each pixel's GEV quantile."""
    model.check_compatible(uniforms)
    mask = model.valid_mask
    u = uniforms.values[:, :, mask]
    if not np.all((u > 0) & (u < 1)):
        raise ValueError("uniform values on valid pixels must lie strictly inside (0, 1)")
    xi, mu, sigma = (a[:, mask] for a in (model.shape, model.loc, model.scale))
    y = -np.log(-np.log(u))
    gumbel = np.abs(xi) < GUMBEL_EPS
    safe_xi = np.where(gumbel, 1.0, xi)
    q = np.where(gumbel, mu + sigma * y, mu + sigma * np.expm1(safe_xi * y) / safe_xi)
    values = np.zeros(uniforms.values.shape)
    values[:, :, mask] = q
    return uniforms.replace(values)


def to_frechet(u):
    """Unit-Frechet transform ``-1 / log(u)`` for ``u`` strictly inside (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u > 0) & (u < 1)):
        raise ValueError("to_frechet needs values strictly inside (0, 1)")
    y = -1.0 / np.log(u)
    return y if y.ndim else float(y)


def dataset_to_frechet(uniforms: Dataset) -> Dataset:
    mask = uniforms.valid_mask
    values = np.zeros(uniforms.values.shape)
    values[:, :, mask] = to_frechet(uniforms.values[:, :, mask])
    return uniforms.replace(values)


# ---------------------------------------------------------------------------
# Persistence

MODEL_MAGIC = b"HZGM"
_MODEL_HEADER = struct.Struct("<4sIIIIQI")


def save_model(model: MarginalModel, path: str | Path) -> None:
    """Binary layout: header, JSON channel names, mask, then per valid
    pixel-channel (shape, loc, scale, loglik as f64, converged as u8) records,
    then the sorted sample tables as float64."""
    c, h, w = model.grid_shape
    p, n = model.tables.shape[1:]
    names = json.dumps(list(model.channel_names)).encode()
    mask = model.valid_mask
    rec = np.zeros(c * p, dtype=[("shape", "<f8"), ("loc", "<f8"), ("scale", "<f8"), ("loglik", "<f8"), ("converged", "u1")])
    for name in ("shape", "loc", "scale", "loglik"):
        rec[name] = getattr(model, name)[:, mask].ravel()
    rec["converged"] = model.converged[:, mask].ravel()
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, c, h, w, model.block_size, n, len(names)))
        fh.write(names)
        fh.write(mask.astype(np.uint8).tobytes())
        fh.write(rec.tobytes())
        fh.write(np.ascontiguousarray(model.tables, dtype="<f8").tobytes())


def load_model(path: str | Path) -> MarginalModel:
    raw = Path(path).read_bytes()
    if len(raw) < _MODEL_HEADER.size:
        raise ValueError(f"{path}: truncated marginal-model header")
    magic, c, h, w, block, n, name_len = _MODEL_HEADER.unpack_from(raw, 0)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    off = _MODEL_HEADER.size
    names = tuple(json.loads(raw[off : off + name_len].decode()))
    off += name_len
    mask = np.frombuffer(raw, np.uint8, h * w, off).reshape(h, w).astype(bool)
    off += h * w
    p = int(mask.sum())
    dt = np.dtype([("shape", "<f8"), ("loc", "<f8"), ("scale", "<f8"), ("loglik", "<f8"), ("converged", "u1")])
    if len(raw) != off + c * p * dt.itemsize + c * p * n * 8:
        raise ValueError(f"{path}: size does not match header")
    rec = np.frombuffer(raw, dt, c * p, off)
    off += c * p * dt.itemsize
    tables = np.frombuffer(raw, "<f8", c * p * n, off).reshape(c, p, n).copy()
    maps = {}
    for name in ("shape", "loc", "scale", "loglik"):
        m = np.full((c, h, w), np.nan)
        m[:, mask] = rec[name].reshape(c, p)
        maps[name] = m
    conv = np.zeros((c, h, w), bool)
    conv[:, mask] = rec["converged"].reshape(c, p).astype(bool)
    return MarginalModel(mask, names, tables, converged=conv, block_size=block, **maps)


NO_DATA = -999.0


def export_param_maps(model: MarginalModel, out_dir: str | Path) -> list[Path]:
    """Write ``gev_<param>_<channel>.csv`` grids (no-data as -999) and a long ``gev_fit.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("shape", "loc", "scale"):
        grid = getattr(model, name)
        for ch, label in enumerate(model.channel_names):
            path = out_dir / f"gev_{name}_{label}.csv"
            np.savetxt(path, np.where(model.valid_mask, grid[ch], NO_DATA), delimiter=",", fmt="%.10g")
            written.append(path)
    path = out_dir / "gev_fit.csv"
    with open(path, "w") as fh:
        fh.write("channel,row,col,shape,loc,scale,loglik,converged\n")
        for ch, label in enumerate(model.channel_names):
            for i, j in zip(*np.nonzero(model.valid_mask)):
                fh.write(
                    f"{label},{i},{j},{model.shape[ch, i, j]:.10g},{model.loc[ch, i, j]:.10g},"
                    f"{model.scale[ch, i, j]:.10g},{model.loglik[ch, i, j]:.10g},{int(model.converged[ch, i, j])}\n"
                )
    written.append(path)
    return written
