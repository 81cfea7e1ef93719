"""Layer definitions with explicit forward and backward passes.

Arrays are float64 and laid out as ``(batch, channels, height, width)`` for
images or ``(batch, features)`` for flat activations. Each layer knows the
per-sample shape it accepts (``in_shape``) and produces (``out_shape``).
``forward`` returns the output and a cache; ``backward`` consumes that cache
and returns the input gradient plus a dict of parameter gradients.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

INIT_STD = 0.02
BN_MOMENTUM = 0.99
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class MissingCacheError(RuntimeError):
    pass


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal draws re-sampled until they fall inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


class Layer:
    kind = "layer"
    trainable = False

    def __init__(self, in_shape, name: str | None = None):
        self.in_shape = tuple(int(d) for d in in_shape)
        if not self.in_shape or min(self.in_shape) < 1:
            raise ShapeError(f"{self.kind}: input dimensions must be positive, got {self.in_shape}")
        self.name = name or self.kind
        self.out_shape = self.compute_out_shape()

    def compute_out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def config(self) -> dict:
        return {"kind": self.kind, "name": self.name, "in_shape": list(self.in_shape)}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def init_state(self) -> dict[str, np.ndarray]:
        return {}

    def check_input(self, x: np.ndarray) -> None:
        if x.shape[1:] != self.in_shape:
            raise ShapeError(
                f"layer {self.name!r} ({self.kind}) expects per-sample shape {self.in_shape}, got {x.shape[1:]}"
            )

    def forward(self, params, state, x, train, rng, update_state=True):
        raise NotImplementedError

    def backward(self, params, cache, dy):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, {self.in_shape} -> {self.out_shape})"


def _need(cache):
    if cache is None:
        raise MissingCacheError("backward called without a cache from a matching forward pass")
    return cache


class Dense(Layer):
    kind = "dense"
    trainable = True

    def __init__(self, in_shape, units: int, name=None):
        self.units = int(units)
        super().__init__(in_shape, name)
        if len(self.in_shape) != 1:
            raise ShapeError(f"dense layer {self.name!r} needs flat input, got {self.in_shape}")

    def compute_out_shape(self):
        return (self.units,)

    def config(self):
        return {**super().config(), "units": self.units}

    def init_params(self, rng):
        return {"kernel": truncated_normal(rng, (self.in_shape[0], self.units)), "bias": np.zeros(self.units)}

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        return x @ params["kernel"] + params["bias"], x

    def backward(self, params, cache, dy):
        x = _need(cache)
        return dy @ params["kernel"].T, {"kernel": x.T @ dy, "bias": dy.sum(axis=0)}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, in_shape, target, name=None):
        self.target = tuple(int(d) for d in target)
        super().__init__(in_shape, name)
        if math.prod(self.target) != math.prod(self.in_shape):
            raise ShapeError(f"reshape {self.name!r}: cannot map {self.in_shape} to {self.target}")

    def compute_out_shape(self):
        return self.target

    def config(self):
        return {**super().config(), "target": list(self.target)}

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        return x.reshape(x.shape[0], *self.target), True

    def backward(self, params, cache, dy):
        _need(cache)
        return dy.reshape(dy.shape[0], *self.in_shape), {}


def _im2col(xp: np.ndarray, kernel, stride, out_hw) -> np.ndarray:
    """Patches of a padded batch as ``(C * kh * kw, N * oh * ow)``, one column per output pixel."""
    n, c = xp.shape[:2]
    (kh, kw), (sh, sw), (oh, ow) = kernel, stride, out_hw
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)


class Conv2D(Layer):
    """Cross-correlation with per-side zero padding ``(top, bottom, left, right)``."""

    kind = "conv"
    trainable = True

    def __init__(self, in_shape, filters: int, kernel, stride=1, padding=(0, 0, 0, 0), name=None):
        self.filters = int(filters)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = tuple(int(p) for p in padding)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"conv {name!r}: invalid kernel/stride/padding")
        super().__init__(in_shape, name)
        if len(self.in_shape) != 3:
            raise ShapeError(f"conv layer {self.name!r} needs (C, H, W) input, got {self.in_shape}")

    def compute_out_shape(self):
        _, h, w = self.in_shape
        t, b, l, r = self.padding
        oh = (h + t + b - self.kernel[0]) // self.stride[0] + 1
        ow = (w + l + r - self.kernel[1]) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv {self.name!r}: kernel {self.kernel} larger than padded input {self.in_shape}")
        return (self.filters, oh, ow)

    def config(self):
        return {
            **super().config(),
            "filters": self.filters,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }

    def init_params(self, rng):
        c = self.in_shape[0]
        return {"kernel": truncated_normal(rng, (self.filters, c, *self.kernel)), "bias": np.zeros(self.filters)}

    def _live_taps(self):
        """Kernel rows and columns that reach at least one unpadded input pixel."""
        _, h, w = self.in_shape
        _, oh, ow = self.out_shape
        t, _, l, _ = self.padding
        spans = []
        for k, s, pad, n_in, n_out in ((self.kernel[0], self.stride[0], t, h, oh), (self.kernel[1], self.stride[1], l, w, ow)):
            lo = max(0, pad - (n_out - 1) * s)
            hi = min(k, pad + n_in)
            spans.append((lo, hi) if lo < hi else (0, k))
        return spans

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        n = x.shape[0]
        _, oh, ow = self.out_shape
        t, b, l, r = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))
        # taps that only ever see padding contribute exact zeros, so they are skipped
        (i0, i1), (j0, j1) = self._live_taps()
        cols = _im2col(xp[:, :, i0:, j0:], (i1 - i0, j1 - j0), self.stride, (oh, ow))
        w2 = params["kernel"][:, :, i0:i1, j0:j1].reshape(self.filters, -1)
        y = (w2 @ cols).reshape(self.filters, n, oh, ow).transpose(1, 0, 2, 3)
        return y + params["bias"][None, :, None, None], (cols, xp.shape)

    def backward(self, params, cache, dy):
        cols, xp_shape = _need(cache)
        n = dy.shape[0]
        c, h, w = self.in_shape
        _, oh, ow = self.out_shape
        (sh, sw) = self.stride
        t, _, l, _ = self.padding
        (i0, i1), (j0, j1) = self._live_taps()
        dy2 = dy.transpose(1, 0, 2, 3).reshape(self.filters, n * oh * ow)
        w2 = params["kernel"][:, :, i0:i1, j0:j1].reshape(self.filters, -1)
        dk = np.zeros_like(params["kernel"])
        dk[:, :, i0:i1, j0:j1] = (dy2 @ cols.T).reshape(self.filters, c, i1 - i0, j1 - j0)
        grads = {"kernel": dk, "bias": dy2.sum(axis=1)}
        dcols = (w2.T @ dy2).reshape(c, i1 - i0, j1 - j0, n, oh, ow)
        dxp = np.zeros((xp_shape[1], xp_shape[0], *xp_shape[2:]))
        for i in range(i1 - i0):
            for j in range(j1 - j0):
                r0, c0 = i0 + i, j0 + j
                dxp[:, :, r0 : r0 + sh * oh : sh, c0 : c0 + sw * ow : sw] += dcols[:, i, j]
        dxp = dxp.transpose(1, 0, 2, 3)
        return dxp[:, :, t : t + h, l : l + w], grads


class Deconv2D(Layer):
    """Transposed convolution.

    Output size per axis is ``(in - 1) * stride + kernel - 2 * padding + output_padding``;
    ``padding`` is cropped from both ends of the full scatter and ``output_padding``
    extends the far (bottom/right) end.
    """

    kind = "deconv"
    trainable = True

    def __init__(self, in_shape, filters: int, kernel, stride=1, padding=0, output_padding=0, name=None):
        self.filters = int(filters)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.output_padding = _pair(output_padding)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0 or min(self.output_padding) < 0:
            raise ShapeError(f"deconv {name!r}: invalid kernel/stride/padding")
        super().__init__(in_shape, name)
        if len(self.in_shape) != 3:
            raise ShapeError(f"deconv layer {self.name!r} needs (C, H, W) input, got {self.in_shape}")

    def compute_out_shape(self):
        _, h, w = self.in_shape
        oh = (h - 1) * self.stride[0] + self.kernel[0] - 2 * self.padding[0] + self.output_padding[0]
        ow = (w - 1) * self.stride[1] + self.kernel[1] - 2 * self.padding[1] + self.output_padding[1]
        if oh < 1 or ow < 1:
            raise ShapeError(f"deconv {self.name!r}: non-positive output size ({oh}, {ow})")
        return (self.filters, oh, ow)

    def config(self):
        return {
            **super().config(),
            "filters": self.filters,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "output_padding": list(self.output_padding),
        }

    def init_params(self, rng):
        c = self.in_shape[0]
        return {"kernel": truncated_normal(rng, (c, self.filters, *self.kernel)), "bias": np.zeros(self.filters)}

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        n = x.shape[0]
        c, h, w = self.in_shape
        _, oh, ow = self.out_shape
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        cols = np.matmul(params["kernel"].reshape(c, -1).T, x.reshape(n, c, h * w)).reshape(n, self.filters, kh, kw, h, w)
        fh = max((h - 1) * sh + kh, ph + oh)
        fw = max((w - 1) * sw + kw, pw + ow)
        full = np.zeros((n, self.filters, fh, fw))
        for i in range(kh):
            for j in range(kw):
                full[:, :, i : i + sh * h : sh, j : j + sw * w : sw] += cols[:, :, i, j]
        return full[:, :, ph : ph + oh, pw : pw + ow] + params["bias"][None, :, None, None], x

    def backward(self, params, cache, dy):
        x = _need(cache)
        n = dy.shape[0]
        c, h, w = self.in_shape
        _, oh, ow = self.out_shape
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        # the input gradient is an ordinary strided correlation of dy placed back in the uncropped frame
        fh = max((h - 1) * sh + kh, ph + oh)
        fw = max((w - 1) * sw + kw, pw + ow)
        dfull = np.zeros((n, self.filters, fh, fw))
        dfull[:, :, ph : ph + oh, pw : pw + ow] = dy
        cols = _im2col(dfull, self.kernel, self.stride, (h, w))
        xm = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        grads = {
            "kernel": (xm @ cols.T).reshape(params["kernel"].shape),
            "bias": dy.sum(axis=(0, 2, 3)),
        }
        dx = (params["kernel"].reshape(c, -1) @ cols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return dx, grads


class BatchNorm(Layer):
    """Per-channel (images) or per-feature (flat) batch normalisation."""

    kind = "batchnorm"
    trainable = True

    def __init__(self, in_shape, momentum: float = BN_MOMENTUM, eps: float = BN_EPS, name=None):
        self.momentum = float(momentum)
        self.eps = float(eps)
        super().__init__(in_shape, name)

    def config(self):
        return {**super().config(), "momentum": self.momentum, "eps": self.eps}

    @property
    def features(self) -> int:
        return self.in_shape[0]

    def _axes(self, x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _bcast(self, v, ndim):
        return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)

    def init_params(self, rng):
        return {"gamma": np.ones(self.features), "beta": np.zeros(self.features)}

    def init_state(self):
        return {"moving_mean": np.zeros(self.features), "moving_var": np.ones(self.features)}

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_state:
                state["moving_mean"] = self.momentum * state["moving_mean"] + (1 - self.momentum) * mean
                state["moving_var"] = self.momentum * state["moving_var"] + (1 - self.momentum) * var
        else:
            mean, var = state["moving_mean"], state["moving_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x.ndim)) * self._bcast(inv_std, x.ndim)
        y = xhat * self._bcast(params["gamma"], x.ndim) + self._bcast(params["beta"], x.ndim)
        return y, (xhat, inv_std, train)

    def backward(self, params, cache, dy):
        xhat, inv_std, train = _need(cache)
        axes = self._axes(dy)
        nd = dy.ndim
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        g = self._bcast(params["gamma"] * inv_std, nd)
        if not train:
            return dy * g, grads
        m = dy.size // self.features
        dx = g / m * (m * dy - self._bcast(grads["beta"], nd) - xhat * self._bcast(grads["gamma"], nd))
        return dx, grads


class Dropout(Layer):
    """Inverted dropout: surviving units are scaled by ``1 / (1 - rate)`` in training."""

    kind = "dropout"

    def __init__(self, in_shape, rate: float, name=None):
        self.rate = float(rate)
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        super().__init__(in_shape, name)

    def config(self):
        return {**super().config(), "rate": self.rate}

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        if not train or self.rate == 0.0:
            return x, 1.0
        if rng is None:
            raise ValueError(f"dropout layer {self.name!r} needs an rng in training mode")
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, params, cache, dy):
        return dy * _need(cache), {}


class LeakyReLU(Layer):
    kind = "lrelu"

    def __init__(self, in_shape, slope: float, name=None):
        self.slope = float(slope)
        if not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky ReLU slope must lie in (0, 1), got {slope}")
        super().__init__(in_shape, name)

    def config(self):
        return {**super().config(), "slope": self.slope}

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, params, cache, dy):
        pos = _need(cache)
        return np.where(pos, dy, self.slope * dy), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, params, state, x, train, rng, update_state=True):
        self.check_input(x)
        y = expit(x)
        return y, y

    def backward(self, params, cache, dy):
        y = _need(cache)
        return dy * y * (1.0 - y), {}


LAYER_TYPES = {
    cls.kind: cls for cls in (Dense, Reshape, Conv2D, Deconv2D, BatchNorm, Dropout, LeakyReLU, Sigmoid)
}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    cls = LAYER_TYPES[cfg.pop("kind")]
    in_shape = cfg.pop("in_shape")
    return cls(in_shape, **cfg)


def forward(layer: Layer, params, x, mode: str = "train", rng=None, state=None, update_state=True):
    """Functional entry point: ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if state is None:
        state = layer.init_state()
    return layer.forward(params, state, x, mode == "train", rng, update_state)


def backward(layer: Layer, params, cache, upstream):
    return layer.backward(params, cache, upstream)
