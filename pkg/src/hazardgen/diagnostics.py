"""Dependence diagnostics for train/test/generated sets: extremal coefficients,
extremal correlations, Pearson matrices and Q-Q vectors."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Dataset
from .margins import MarginalModel, pit, to_frechet

SETS = ("train", "test", "generated")
CHI_NOTE = "chi = 2 - theta (pairwise); published text prints chi = 1 - theta"


@dataclass(frozen=True)
class ExtremalCoefficient:
    raw: float
    dim: int
    index: tuple = ()

    @property
    def value(self) -> float:
        """Estimate clamped to the attainable range [1, D]."""
        return min(max(self.raw, 1.0), float(self.dim))

    def __float__(self):
        return self.value


def extremal_coefficient(frechet, index: tuple = ()) -> ExtremalCoefficient:
    """``N / sum_n min_i(1 / Y[n, i])`` for unit-Frechet samples ``Y`` shaped (N, D)."""
    y = np.asarray(frechet, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not np.all(y > 0):
        raise ValueError("unit-Frechet values must be positive")
    return ExtremalCoefficient(y.shape[0] / float(np.sum(np.min(1.0 / y, axis=1))), y.shape[1], index)


def extremal_correlation(theta):
    """Pairwise extremal correlation ``2 - theta`` with theta clamped to [1, 2]."""
    t = np.asarray(theta, dtype=np.float64)
    if np.isnan(t).any():
        raise ValueError("extremal coefficient is NaN")
    chi = 2.0 - np.clip(t, 1.0, 2.0)
    return chi if chi.ndim else float(chi)


def _channel_index(ds: Dataset, channel) -> int:
    if isinstance(channel, str):
        return ds.channel_names.index(channel)
    return int(channel)


def _frechet_columns(uniform: Dataset, ch: int) -> np.ndarray:
    return to_frechet(uniform.values[:, ch][:, uniform.valid_mask])


@dataclass(frozen=True)
class PairMatrix:
    """Symmetric matrix over the valid pixels (row-major order) of one channel."""

    matrix: np.ndarray
    pixels: np.ndarray  # (P, 2) row/col of each valid pixel

    def pairs(self) -> np.ndarray:
        """Strict lower triangle, row-major: (1,0), (2,0), (2,1), ..."""
        i, j = np.tril_indices(self.matrix.shape[0], -1)
        return self.matrix[i, j]

    @property
    def n_pairs(self) -> int:
        p = self.matrix.shape[0]
        return p * (p - 1) // 2


def pairwise_theta_map(uniform: Dataset, channel=0) -> PairMatrix:
    """Raw bivariate extremal coefficients between every pair of valid pixels."""
    ch = _channel_index(uniform, channel)
    inv = 1.0 / _frechet_columns(uniform, ch)  # (N, P), standard exponential
    n, p = inv.shape
    theta = np.empty((p, p))
    for i in range(p):
        s = np.minimum(inv[:, i : i + 1], inv[:, i:]).sum(axis=0)
        theta[i, i:] = n / s
        theta[i:, i] = theta[i, i:]
    np.fill_diagonal(theta, 1.0)
    return PairMatrix(theta, np.argwhere(uniform.valid_mask))


def chi_map(theta: PairMatrix) -> PairMatrix:
    return PairMatrix(extremal_correlation(theta.matrix), theta.pixels)


def theta_3d_map(uniform: Dataset) -> np.ndarray:
    """Per-pixel extremal coefficient across all channels (D = C); NaN on masked pixels."""
    inv = 1.0 / to_frechet(uniform.values[:, :, uniform.valid_mask])  # (N, C, P)
    out = np.full(uniform.valid_mask.shape, np.nan)
    out[uniform.valid_mask] = inv.shape[0] / np.min(inv, axis=1).sum(axis=0)
    return out


def pearson_matrix(data: Dataset, channel=0) -> PairMatrix:
    """Pearson correlations between valid pixels; rows of zero-variance pixels are NaN."""
    ch = _channel_index(data, channel)
    x = data.values[:, ch][:, data.valid_mask]
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    xc = x - x.mean(axis=0)
    ss = np.sqrt(np.sum(xc * xc, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        z = xc / ss
    z[:, ss == 0] = np.nan
    r = np.clip(z.T @ z, -1.0, 1.0)
    ok = ss > 0
    r[np.diag_indices_from(r)] = np.where(ok, 1.0, np.nan)
    return PairMatrix(r, np.argwhere(data.valid_mask))


def qq_vectors(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Sorted quantile vectors; the longer sample is interpolated to the shorter's length."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("Q-Q vectors need non-empty inputs")
    m = min(a.size, b.size)
    probs = np.linspace(0.0, 1.0, m)
    if a.size > m:
        a = np.quantile(a, probs)
    if b.size > m:
        b = np.quantile(b, probs)
    return a, b


def rmse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    return float(np.sqrt(np.mean((a[ok] - b[ok]) ** 2))) if ok.any() else math.nan


@dataclass
class DependenceReport:
    channel_names: tuple[str, ...]
    theta: dict[str, list[PairMatrix]]
    chi: dict[str, list[PairMatrix]]
    pearson: dict[str, list[PairMatrix]]
    theta_3d: dict[str, np.ndarray]
    qq: dict[tuple[str, str], dict[str, tuple[np.ndarray, np.ndarray]]]
    summary: dict[str, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)


def compare_sets(
    train: Dataset,
    test: Dataset,
    generated: Dataset,
    model: MarginalModel | None = None,
    uniform: tuple[str, ...] = ("generated",),
) -> DependenceReport:
    """Compare dependence across the three sets.

    Sets named in ``uniform`` are taken as already on the uniform scale; the
    others are mapped through ``pit(model, .)``. Summary scalars are RMSEs of
    generated and train against test over all pixel pairs (raw theta, chi,
    Pearson) and over the 3-channel theta map, plus mean-theta biases.
    """
    sets = {"train": train, "test": test, "generated": generated}
    shapes = {k: v.grid_shape for k, v in sets.items()}
    if len(set(shapes.values())) != 1:
        raise ValueError(f"grid shapes differ: {shapes}")
    masks = [v.valid_mask for v in sets.values()]
    if not all(np.array_equal(masks[0], m) for m in masks[1:]):
        raise ValueError("validity masks differ between sets")
    u = {}
    for name, ds in sets.items():
        if name in uniform:
            u[name] = ds
        else:
            if model is None:
                raise ValueError(f"set {name!r} is on the original scale but no marginal model was given")
            u[name] = pit(model, ds)
    names = train.channel_names
    c = len(names)
    theta = {k: [pairwise_theta_map(u[k], ch) for ch in range(c)] for k in SETS}
    chi = {k: [chi_map(t) for t in theta[k]] for k in SETS}
    pear = {k: [pearson_matrix(u[k], ch) for ch in range(c)] for k in SETS}
    t3 = {k: theta_3d_map(u[k]) for k in SETS}

    qq = {}
    for a in ("train", "generated"):
        qq[(a, "test")] = {names[ch]: qq_vectors(theta[a][ch].pairs(), theta["test"][ch].pairs()) for ch in range(c)}
        valid = train.valid_mask
        qq[(a, "test")]["3d"] = qq_vectors(t3[a][valid], t3["test"][valid])

    s = {
        "n_channels": c,
        "n_valid_pixels": int(train.valid_mask.sum()),
        "n_pairs": theta["test"][0].n_pairs,
        **{f"n_{k}": len(sets[k]) for k in SETS},
    }
    valid = train.valid_mask
    for a in ("generated", "train"):
        parts = {"theta": [], "chi": [], "pearson": []}
        for ch, label in enumerate(names):
            for kind, store in (("theta", theta), ("chi", chi), ("pearson", pear)):
                v = rmse(store[a][ch].pairs(), store["test"][ch].pairs())
                s[f"rmse_{kind}_{a}_vs_test_{label}"] = v
                parts[kind].append(v)
        for kind, vals in parts.items():
            s[f"rmse_{kind}_{a}_vs_test"] = float(np.sqrt(np.mean(np.square(vals))))
        s[f"rmse_theta3d_{a}_vs_test"] = rmse(t3[a][valid], t3["test"][valid])
        for ch, label in enumerate(names):
            s[f"mean_theta_bias_{a}_minus_test_{label}"] = float(
                np.mean(theta[a][ch].pairs()) - np.mean(theta["test"][ch].pairs())
            )
        s[f"mean_theta3d_bias_{a}_minus_test"] = float(np.mean(t3[a][valid]) - np.mean(t3["test"][valid]))
    return DependenceReport(names, theta, chi, pear, t3, qq, s, {"chi_formula": CHI_NOTE})


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def report_filenames(channel_names) -> list[str]:
    names = []
    for label in channel_names:
        label = _safe(label)
        names += [f"theta_pairs_{label}.csv", f"chi_pairs_{label}.csv", f"pearson_{label}.csv"]
    names += ["theta_3d_map.csv", "qq_train_vs_test.csv", "qq_generated_vs_test.csv", "summary.txt"]
    return names


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def write_report(report: DependenceReport, out_dir: str | Path) -> list[Path]:
    """Write the fixed set of plot-ready CSV tables and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ch, label in enumerate(report.channel_names):
        for prefix, store in (("theta_pairs", report.theta), ("chi_pairs", report.chi), ("pearson", report.pearson)):
            path = out / f"{prefix}_{_safe(label)}.csv"
            i, j = np.tril_indices(store["test"][ch].matrix.shape[0], -1)
            cols = [store[k][ch].matrix[i, j] for k in SETS]
            with open(path, "w") as fh:
                fh.write("i,j,train,test,generated\n")
                for row in zip(i, j, *cols):
                    fh.write(f"{row[0]},{row[1]},{','.join(_fmt(v) for v in row[2:])}\n")
            written.append(path)
    path = out / "theta_3d_map.csv"
    with open(path, "w") as fh:
        fh.write("row,col,train,test,generated\n")
        for r, c in np.argwhere(np.isfinite(report.theta_3d["test"])):
            fh.write(f"{r},{c},{','.join(_fmt(report.theta_3d[k][r, c]) for k in SETS)}\n")
    written.append(path)
    for (a, b), per_channel in report.qq.items():
        path = out / f"qq_{a}_vs_{b}.csv"
        with open(path, "w") as fh:
            fh.write(f"channel,{a},{b}\n")
            for label, (qa, qb) in per_channel.items():
                for x, y in zip(qa, qb):
                    fh.write(f"{_safe(label)},{_fmt(x)},{_fmt(y)}\n")
        written.append(path)
    path = out / "summary.txt"
    with open(path, "w") as fh:
        for k in sorted(report.summary):
            v = report.summary[k]
            fh.write(f"{k} = {v if isinstance(v, int) else _fmt(v)}\n")
        for k, v in report.notes.items():
            fh.write(f"# {k}: {v}\n")
    written.append(path)
    return written
