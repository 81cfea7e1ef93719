"""Gridded multichannel hazard fields: containers, HZG binary I/O, temporal
maxima, bilinear resampling, padding and synthetic test datasets.

A :class:`Dataset` stores its fields as one ``(N, C, H, W)`` float64 array
together with a shared ``(H, W)`` validity mask. Individual days are exposed
as :class:`GridField` views.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

CADENCES = ("hourly", "daily-max")
SPLITS = ("train", "test", "generated", "unknown")

MAGIC = b"HZG1"
_HEADER = struct.Struct("<4sIIIQB")


class HZGFormatError(ValueError):
    """Raised for malformed HZG files; ``offset`` is the byte position at fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _default_names(c: int) -> tuple[str, ...]:
    return tuple(f"ch{i}" for i in range(c))


@dataclass(frozen=True)
class GridField:
    """One day's multichannel image, ``values`` shaped ``(C, H, W)``."""

    values: np.ndarray
    channel_names: tuple[str, ...] = ()
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"GridField values must be (C, H, W) with positive dims, got {values.shape}")
        c, h, w = values.shape
        mask = np.ones((h, w), bool) if self.valid_mask is None else np.asarray(self.valid_mask, bool)
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} does not match grid {(h, w)}")
        names = tuple(self.channel_names) or _default_names(c)
        if len(names) != c:
            raise ValueError(f"{len(names)} channel names for {c} channels")
        if not np.all(np.isfinite(values[:, mask])):
            raise ValueError("non-finite values on valid pixels")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid_mask", _frozen(mask))
        object.__setattr__(self, "channel_names", names)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Dataset:
    """An ordered stack of fields sharing shape, channel names and mask."""

    values: np.ndarray
    valid_mask: np.ndarray | None = None
    channel_names: tuple[str, ...] = ()
    cadence: str = "daily-max"
    split: str = "unknown"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4:
            raise ValueError(f"Dataset values must be (N, C, H, W), got shape {values.shape}")
        n, c, h, w = values.shape
        if n < 1:
            raise ValueError("empty dataset")
        if min(c, h, w) < 1:
            raise ValueError(f"grid dimensions must be positive, got {(c, h, w)}")
        mask = np.ones((h, w), bool) if self.valid_mask is None else np.asarray(self.valid_mask, bool)
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} does not match grid {(h, w)}")
        names = tuple(self.channel_names) or _default_names(c)
        if len(names) != c:
            raise ValueError(f"{len(names)} channel names for {c} channels")
        if self.cadence not in CADENCES:
            raise ValueError(f"unknown cadence {self.cadence!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split tag {self.split!r}")
        if not np.all(np.isfinite(values[:, :, mask])):
            raise ValueError("non-finite values on valid pixels")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid_mask", _frozen(mask))
        object.__setattr__(self, "channel_names", names)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> GridField:
        return GridField(self.values[i], self.channel_names, self.valid_mask)

    @property
    def fields(self) -> list[GridField]:
        return [self[i] for i in range(len(self))]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.values.shape[1:]

    def replace(self, values: np.ndarray | None = None, **changes) -> "Dataset":
        kw = dict(
            values=self.values if values is None else values,
            valid_mask=self.valid_mask,
            channel_names=self.channel_names,
            cadence=self.cadence,
            split=self.split,
        )
        kw.update(changes)
        return Dataset(**kw)

    def subset(self, index) -> "Dataset":
        return self.replace(self.values[index])

    @classmethod
    def from_fields(cls, fields: Sequence[GridField], cadence="daily-max", split="unknown") -> "Dataset":
        if not fields:
            raise ValueError("empty dataset")
        first = fields[0]
        for f in fields[1:]:
            if f.shape != first.shape or not np.array_equal(f.valid_mask, first.valid_mask):
                raise ValueError("fields differ in shape or mask")
        return cls(
            np.stack([f.values for f in fields]),
            first.valid_mask,
            first.channel_names,
            cadence,
            split,
        )


# ---------------------------------------------------------------------------
# HZG binary format


def save_dataset(ds: Dataset, path: str | Path) -> None:
    n, c, h, w = ds.values.shape
    header = _HEADER.pack(MAGIC, c, h, w, n, CADENCES.index(ds.cadence))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.valid_mask.astype(np.uint8).tobytes(order="C"))
        fh.write(np.ascontiguousarray(ds.values, dtype="<f8").tobytes(order="C"))


def load_dataset(path: str | Path, split: str = "unknown", channel_names: Sequence[str] = ()) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise HZGFormatError("truncated header", len(raw))
    magic, c, h, w, n, code = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise HZGFormatError(f"bad magic {magic!r}", 0)
    if min(c, h, w) == 0:
        raise HZGFormatError(f"zero grid dimension in header (C={c}, H={h}, W={w})", 4)
    if n == 0:
        raise HZGFormatError("empty dataset", 16)
    if code >= len(CADENCES):
        raise HZGFormatError(f"unknown cadence code {code}", 24)
    off = _HEADER.size
    if len(raw) < off + h * w:
        raise HZGFormatError("truncated mask block", len(raw))
    mask_bytes = np.frombuffer(raw, np.uint8, h * w, off)
    if np.any(mask_bytes > 1):
        bad = int(np.argmax(mask_bytes > 1))
        raise HZGFormatError(f"mask byte {mask_bytes[bad]} is not 0/1", off + bad)
    off += h * w
    expected = n * c * h * w * 8
    if len(raw) - off != expected:
        kind = "truncated" if len(raw) - off < expected else "trailing bytes after"
        raise HZGFormatError(
            f"{kind} value block: expected {expected} bytes for N={n}, C={c}, H={h}, W={w}, found {len(raw) - off}",
            len(raw) if len(raw) - off < expected else off + expected,
        )
    values = np.frombuffer(raw, "<f8", n * c * h * w, off).reshape(n, c, h, w)
    return Dataset(values, mask_bytes.reshape(h, w).astype(bool), tuple(channel_names), CADENCES[code], split)


# ---------------------------------------------------------------------------
# Temporal aggregation


def daily_maxima(hourly: Dataset, hours_per_block: int = 24) -> Dataset:
    """Block maxima over consecutive groups of ``hours_per_block`` fields."""
    if hourly.cadence != "hourly":
        raise ValueError(f"expected an hourly dataset, got cadence {hourly.cadence!r}")
    if hours_per_block < 1:
        raise ValueError("hours_per_block must be >= 1")
    n = len(hourly)
    if n % hours_per_block:
        raise ValueError(f"N={n} is not divisible by hours_per_block={hours_per_block}")
    blocks = hourly.values.reshape(n // hours_per_block, hours_per_block, *hourly.grid_shape)
    valid = blocks[:, :, :, hourly.valid_mask]
    if np.isnan(valid).any():
        raise ValueError("NaN inside the block of a valid pixel")
    out = blocks.max(axis=1)
    out[:, :, ~hourly.valid_mask] = blocks[:, 0][:, :, ~hourly.valid_mask]
    return hourly.replace(out, cadence="daily-max")


# ---------------------------------------------------------------------------
# Spatial resampling


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres (align_corners=False), source coordinate clamped at the edges
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def _resize_arrays(values: np.ndarray, mask: np.ndarray, out_h: int, out_w: int):
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    h, w = mask.shape
    rows = _bilinear_matrix(h, out_h)
    cols = _bilinear_matrix(w, out_w)
    m = mask.astype(np.float64)
    filled = np.where(mask, values, 0.0)
    # renormalise over valid neighbours so no-data never leaks into valid cells
    num = np.einsum("ih,...hw,jw->...ij", rows, filled, cols)
    den = rows @ m @ cols.T
    new_mask = mask[np.ix_(_nearest_index(h, out_h), _nearest_index(w, out_w))]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    out = np.where(new_mask, out, 0.0)
    return out, new_mask


def resize_bilinear(field: GridField, out_h: int, out_w: int) -> GridField:
    """Bilinear resize with half-pixel centres; the mask follows nearest neighbour."""
    out, mask = _resize_arrays(field.values, field.valid_mask, out_h, out_w)
    return GridField(out, field.channel_names, mask)


def resize_dataset(ds: Dataset, out_h: int, out_w: int) -> Dataset:
    out, mask = _resize_arrays(ds.values, ds.valid_mask, out_h, out_w)
    return ds.replace(out, valid_mask=mask)


def _pad_offsets(n_in: int, n_out: int) -> int:
    if n_out < n_in:
        raise ValueError(f"cannot pad {n_in} cells down to {n_out}")
    return (n_out - n_in) // 2


def zero_pad(field: GridField, out_h: int, out_w: int) -> GridField:
    """Centre ``field`` in an ``out_h`` x ``out_w`` grid of zeros (floor/ceil split)."""
    c, h, w = field.shape
    top, left = _pad_offsets(h, out_h), _pad_offsets(w, out_w)
    out = np.zeros((c, out_h, out_w))
    out[:, top : top + h, left : left + w] = np.where(field.valid_mask, field.values, 0.0)
    mask = np.zeros((out_h, out_w), bool)
    mask[top : top + h, left : left + w] = field.valid_mask
    return GridField(out, field.channel_names, mask)


def pad_dataset(ds: Dataset, out_h: int, out_w: int) -> Dataset:
    n, c, h, w = ds.values.shape
    top, left = _pad_offsets(h, out_h), _pad_offsets(w, out_w)
    out = np.zeros((n, c, out_h, out_w))
    out[:, :, top : top + h, left : left + w] = np.where(ds.valid_mask, ds.values, 0.0)
    mask = np.zeros((out_h, out_w), bool)
    mask[top : top + h, left : left + w] = ds.valid_mask
    return ds.replace(out, valid_mask=mask)


def crop(field: GridField, in_h: int, in_w: int) -> GridField:
    """Inverse of :func:`zero_pad` for an original grid of ``in_h`` x ``in_w``."""
    _, h, w = field.shape
    top, left = _pad_offsets(in_h, h), _pad_offsets(in_w, w)
    return GridField(
        field.values[:, top : top + in_h, left : left + in_w],
        field.channel_names,
        field.valid_mask[top : top + in_h, left : left + in_w],
    )


def preprocess(ds: Dataset, size=(18, 22), padded=(20, 24)) -> Dataset:
    """Resize to ``size`` then zero-pad to ``padded`` (the network grid)."""
    return pad_dataset(resize_dataset(ds, *size), *padded)


# ---------------------------------------------------------------------------
# Synthetic datasets with known marginals and dependence


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian-copula fields with GEV margins.

    ``gev`` holds one ``(shape, loc, scale)`` triple per channel, or a single
    triple shared by all channels. The latent Gaussian field has exponential
    spatial correlation ``exp(-d / corr_length)`` (d in pixels) and
    equicorrelation ``cross_corr`` between channels.
    """

    channels: int = 3
    height: int = 8
    width: int = 8
    n: int = 1000
    corr_length: float = 3.0
    cross_corr: float = 0.5
    gev: tuple = ((0.1, 10.0, 2.0),)
    valid_mask: np.ndarray | None = field(default=None, compare=False)
    channel_names: tuple[str, ...] = ()

    def gev_params(self):
        from .margins import GevParams

        triples = list(self.gev)
        if len(triples) == 1:
            triples = triples * self.channels
        if len(triples) != self.channels:
            raise ValueError(f"{len(triples)} GEV triples for {self.channels} channels")
        return [GevParams(*t) for t in triples]


def latent_gaussian(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal latent field ``(N, C, H, W)`` with the spec's correlation."""
    if spec.corr_length <= 0:
        raise ValueError("corr_length must be positive")
    if not 0.0 <= spec.cross_corr <= 1.0:
        raise ValueError("cross_corr must lie in [0, 1]")
    h, w, c, n = spec.height, spec.width, spec.channels, spec.n
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.column_stack([yy.ravel(), xx.ravel()]).astype(float)
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    cov = np.exp(-dist / spec.corr_length) + 1e-10 * np.eye(h * w)
    chol = np.linalg.cholesky(cov)
    common = rng.standard_normal((n, 1, h * w)) @ chol.T
    own = rng.standard_normal((n, c, h * w)) @ chol.T
    z = np.sqrt(spec.cross_corr) * common + np.sqrt(1.0 - spec.cross_corr) * own
    return z.reshape(n, c, h, w)


def synth_dataset(spec: SynthSpec, seed: int, split: str = "unknown") -> Dataset:
    from .margins import gev_quantile

    params = spec.gev_params()
    rng = np.random.default_rng(seed)
    u = ndtr(latent_gaussian(spec, rng))
    # keep strictly inside (0, 1) so the quantile function stays finite
    u = np.clip(u, 1e-300, 1.0 - np.finfo(float).epsneg)
    values = np.stack([gev_quantile(p, u[:, i]) for i, p in enumerate(params)], axis=1)
    mask = np.ones((spec.height, spec.width), bool) if spec.valid_mask is None else np.asarray(spec.valid_mask, bool)
    values[:, :, ~mask] = 0.0
    return Dataset(values, mask, spec.channel_names, "daily-max", split)
