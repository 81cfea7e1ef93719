"""Generator/discriminator architectures, adversarial losses and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .grid import Dataset
from .nn import Adam, BatchNorm, Conv2D, Deconv2D, Dense, Dropout, LeakyReLU, Network, Reshape, Sigmoid, make_rng
from .nn.checkpoint import save_network
from .nn.layers import ShapeError

log = logging.getLogger(__name__)

# selected hyperparameters
SELECTED_LEARNING_RATE = 0.00013367626823798716
SELECTED_BETA_1 = 0.22693882275467836
SELECTED_LRELU = 0.2991161912395133
SELECTED_DROPOUT = 0.44053850596844424
SELECTED_TRAINING_BALANCE = 2
SELECTED_SEED = 7

PUBLISHED_GENERATOR_PARAMS = 10_490_883
PUBLISHED_DISCRIMINATOR_PARAMS = 405_057
PUBLISHED_DISCRIMINATOR_TRAINABLE = 404_289

PROB_EPS = 1e-7
CHECKPOINT_EVERY = 100

# stream ids for make_rng(seed, stream)
_GEN_INIT, _DISC_INIT, _SHUFFLE, _LATENT, _DROPOUT, _SAMPLE, _EVAL = 10, 11, 20, 21, 22, 30, 31


def _deconv_padding(n_in: int, n_out: int, kernel: int, stride: int) -> tuple[int, int]:
    total = (n_in - 1) * stride + kernel - n_out
    if total >= 0:
        pad = (total + 1) // 2
        extra = 2 * pad - total
    else:
        pad, extra = 0, -total
    if extra >= stride:
        raise ShapeError(f"deconv cannot map {n_in} -> {n_out} with kernel {kernel}, stride {stride}")
    return pad, extra


def _conv_padding(n_in: int, n_out: int, kernel: int, stride: int) -> tuple[int, int]:
    total = max(0, (n_out - 1) * stride + kernel - n_in)
    if (n_in + total - kernel) // stride + 1 != n_out:
        raise ShapeError(f"conv cannot map {n_in} -> {n_out} with kernel {kernel}, stride {stride}")
    return total // 2, total - total // 2


def _default_base(height: int, width: int) -> tuple[int, int]:
    side = math.ceil(min(height, width) / 4)
    return side, side


@dataclass(frozen=True)
class GeneratorSpec:
    """Dense -> reshape -> [BN, LReLU, dropout] -> deconv blocks -> sigmoid.

    The last deconvolution has stride 1 and ``channels`` filters; the strided
    ones upsample ``base`` to the target grid. Paddings are solved per layer
    so the chain lands exactly on ``(channels, height, width)``.
    """

    channels: int = 3
    height: int = 20
    width: int = 24
    latent_dim: int = 100
    base: tuple[int, int] | None = None
    base_filters: int = 1024
    filters: tuple[int, ...] = (512, 512)
    kernel: int = 5
    lrelu: float = SELECTED_LRELU
    dropout: float = SELECTED_DROPOUT

    def layer_sizes(self) -> list[tuple[int, int]]:
        """Spatial size after the base reshape and after every deconvolution."""
        base = self.base or _default_base(self.height, self.width)
        n_up = len(self.filters)
        sizes = [(math.ceil(self.height / 2**k), math.ceil(self.width / 2**k)) for k in range(n_up, -1, -1)]
        sizes[0] = tuple(base)
        return sizes + [(self.height, self.width)]

    def layers(self) -> list:
        sizes = self.layer_sizes()
        bh, bw = sizes[0]
        seq = [Dense((self.latent_dim,), self.base_filters * bh * bw, name="g_dense")]
        seq.append(Reshape(seq[-1].out_shape, (self.base_filters, bh, bw), name="g_reshape"))
        seq += self._block(seq[-1].out_shape, 0)
        all_filters = list(self.filters) + [self.channels]
        for k, f in enumerate(all_filters):
            last = k == len(all_filters) - 1
            stride = 1 if last else 2
            (ih, iw), (oh, ow) = sizes[k], sizes[k + 1]
            try:
                ph, eh = _deconv_padding(ih, oh, self.kernel, stride)
                pw, ew = _deconv_padding(iw, ow, self.kernel, stride)
            except ShapeError as exc:
                raise ShapeError(f"{exc}; planned sizes {' -> '.join(map(str, sizes))}") from None
            seq.append(Deconv2D(seq[-1].out_shape, f, self.kernel, stride, (ph, pw), (eh, ew), name=f"g_deconv{k + 1}"))
            if not last:
                seq += self._block(seq[-1].out_shape, k + 1)
        seq.append(Sigmoid(seq[-1].out_shape, name="g_sigmoid"))
        if seq[-1].out_shape != (self.channels, self.height, self.width):
            chain = " -> ".join(str(l.out_shape) for l in seq)
            raise ShapeError(f"generator chain ends at {seq[-1].out_shape}, not {(self.channels, self.height, self.width)}: {chain}")
        return seq

    def _block(self, shape, k):
        return [
            BatchNorm(shape, name=f"g_bn{k}"),
            LeakyReLU(shape, self.lrelu, name=f"g_lrelu{k}"),
            Dropout(shape, self.dropout, name=f"g_dropout{k}"),
        ]


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Conv blocks (BN from the second on) -> flatten -> dense(1) -> sigmoid.

    The first convolutions halve the grid; the last one has stride 1 and maps
    onto ``final`` (default: a square of side ceil(min(H, W) / 4), i.e. 5x5 for
    the 20x24 grid, giving the 6400-feature flatten).
    """

    channels: int = 3
    height: int = 20
    width: int = 24
    filters: tuple[int, ...] = (64, 128, 256)
    kernel: int = 5
    final: tuple[int, int] | None = None
    lrelu: float = SELECTED_LRELU
    dropout: float = SELECTED_DROPOUT

    def layers(self) -> list:
        seq = []
        shape = (self.channels, self.height, self.width)
        n = len(self.filters)
        final = self.final or _default_base(self.height, self.width)
        for k, f in enumerate(self.filters):
            last = k == n - 1
            stride = 1 if last and n > 1 else 2
            _, ih, iw = shape
            oh, ow = final if last else (math.ceil(ih / 2), math.ceil(iw / 2))
            pt, pb = _conv_padding(ih, oh, self.kernel, stride)
            pl, pr = _conv_padding(iw, ow, self.kernel, stride)
            seq.append(Conv2D(shape, f, self.kernel, stride, (pt, pb, pl, pr), name=f"d_conv{k + 1}"))
            shape = seq[-1].out_shape
            if k > 0:
                seq.append(BatchNorm(shape, name=f"d_bn{k + 1}"))
            seq.append(LeakyReLU(shape, self.lrelu, name=f"d_lrelu{k + 1}"))
            seq.append(Dropout(shape, self.dropout, name=f"d_dropout{k + 1}"))
        seq.append(Reshape(shape, (math.prod(shape),), name="d_flatten"))
        seq.append(Dense(seq[-1].out_shape, 1, name="d_dense"))
        seq.append(Sigmoid((1,), name="d_sigmoid"))
        return seq


def _spec_meta(spec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def build_generator(spec: GeneratorSpec, seed: int) -> Network:
    net = Network.build(spec.layers(), make_rng(seed, _GEN_INIT), {"role": "generator", "spec": _spec_meta(spec)})
    log.info("generator: %d trainable, %d non-trainable", net.trainable_count(), net.non_trainable_count())
    return net


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> Network:
    net = Network.build(spec.layers(), make_rng(seed, _DISC_INIT), {"role": "discriminator", "spec": _spec_meta(spec)})
    log.info("discriminator: %d trainable, %d non-trainable", net.trainable_count(), net.non_trainable_count())
    return net


def architecture_audit(gen: Network, disc: Network) -> str:
    """Per-layer parameter table with totals set beside the published counts."""
    lines = []
    for title, net in (("generator", gen), ("discriminator", disc)):
        lines.append(f"{title}")
        lines.append(f"  {'layer':<14s} {'output shape':<18s} {'trainable':>12s} {'non-train':>10s}")
        for row in net.layer_table():
            lines.append(
                f"  {row['name']:<14s} {str(row['out_shape']):<18s} {row['trainable']:>12,d} {row['non_trainable']:>10,d}"
            )
    gt, dt, dn = gen.trainable_count(), disc.trainable_count(), disc.non_trainable_count()
    lines.append(f"generator trainable:         {gt:>12,d}  published {PUBLISHED_GENERATOR_PARAMS:>12,d}  diff {gt - PUBLISHED_GENERATOR_PARAMS:+,d}")
    lines.append(f"discriminator total:         {dt + dn:>12,d}  published {PUBLISHED_DISCRIMINATOR_PARAMS:>12,d}  diff {dt + dn - PUBLISHED_DISCRIMINATOR_PARAMS:+,d}")
    lines.append(f"discriminator trainable:     {dt:>12,d}  published {PUBLISHED_DISCRIMINATOR_TRAINABLE:>12,d}  diff {dt - PUBLISHED_DISCRIMINATOR_TRAINABLE:+,d}")
    lines.append(f"discriminator non-trainable: {dn:>12,d}  published {PUBLISHED_DISCRIMINATOR_PARAMS - PUBLISHED_DISCRIMINATOR_TRAINABLE:>12,d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Losses


def _clamp(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty batch")
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def gan_losses(d_real, d_fake, smoothing: float = 0.9) -> tuple[float, float]:
    """Discriminator and generator cross-entropy losses.

    ``d_loss`` is binary cross-entropy of real outputs against the smoothed
    label plus that of fake outputs against label 0; ``g_loss`` is the
    non-saturating ``-mean(log d_fake)``.
    """
    r, f = _clamp(d_real), _clamp(d_fake)
    d_loss = -np.mean(smoothing * np.log(r) + (1 - smoothing) * np.log1p(-r)) - np.mean(np.log1p(-f))
    g_loss = -np.mean(np.log(f))
    return float(d_loss), float(g_loss)


def _grad_real(d, s):
    c = _clamp(d)
    return -(s / c - (1 - s) / (1 - c)) / d.shape[0]


def _grad_fake(d):
    return 1.0 / (1.0 - _clamp(d)) / d.shape[0]


def _grad_gen(d):
    return -1.0 / _clamp(d) / d.shape[0]


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 50
    learning_rate: float = SELECTED_LEARNING_RATE
    beta_1: float = SELECTED_BETA_1
    lrelu: float = SELECTED_LRELU
    dropout: float = SELECTED_DROPOUT
    training_balance: int = SELECTED_TRAINING_BALANCE
    label_smoothing: float = 0.9
    seed: int = SELECTED_SEED
    train_size: int = 0  # 0 = use every field
    gen_filters: tuple[int, ...] = (1024, 512, 512)
    disc_filters: tuple[int, ...] = (64, 128, 256)
    kernel: int = 5
    latent_dim: int = 100

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.training_balance < 1:
            raise ValueError("training_balance must be >= 1")
        if not 0.5 < self.label_smoothing <= 1.0:
            raise ValueError("label_smoothing must lie in (0.5, 1]")
        if self.train_size < 0:
            raise ValueError("train_size must be >= 0")
        if len(self.gen_filters) < 2:
            raise ValueError("gen_filters needs the base width plus at least one deconvolution width")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            kw[key] = _parse_value(types[key], value)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else repr(v)}")
        return "\n".join(out) + "\n"

    def generator_spec(self, c: int, h: int, w: int) -> GeneratorSpec:
        return GeneratorSpec(
            c, h, w, self.latent_dim, None, self.gen_filters[0], tuple(self.gen_filters[1:]), self.kernel, self.lrelu, self.dropout
        )

    def discriminator_spec(self, c: int, h: int, w: int) -> DiscriminatorSpec:
        return DiscriminatorSpec(c, h, w, tuple(self.disc_filters), self.kernel, None, self.lrelu, self.dropout)


def _parse_value(typ, value: str):
    if typ in ("int", int):
        return int(value)
    if typ in ("float", float):
        return float(value)
    return tuple(int(v) for v in value.split(","))


@dataclass
class TrainResult:
    generator: Network
    discriminator: Network
    history: list[tuple[int, float, float]] = field(default_factory=list)
    d_updates: int = 0
    g_updates: int = 0


def train(
    data: Dataset,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = CHECKPOINT_EVERY,
    generator: Network | None = None,
    discriminator: Network | None = None,
) -> TrainResult:
    """Adversarial training on uniform-scale fields.

    Each batch runs ``training_balance`` discriminator updates, each on a
    fresh latent draw, followed by one generator update. Masked pixels are
    zeroed in generated fields so real and fake agree there.
    """
    x_all = data.values
    if np.any(x_all < 0) or np.any(x_all > 1):
        raise ValueError("training data must be on the uniform [0, 1] scale")
    if cfg.train_size:
        x_all = x_all[: cfg.train_size]
    n = x_all.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"N={n} is smaller than batch_size={cfg.batch_size}")
    c, h, w = data.grid_shape
    gen = generator or build_generator(cfg.generator_spec(c, h, w), cfg.seed)
    disc = discriminator or build_discriminator(cfg.discriminator_spec(c, h, w), cfg.seed)
    mask = data.valid_mask.astype(np.float64)[None, None]
    result = TrainResult(gen, disc)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    if cfg.epochs == 0:
        if checkpoint_dir is not None:
            _save_pair(result, checkpoint_dir, 0)
        return result

    opt_g = Adam(cfg.learning_rate, cfg.beta_1)
    opt_d = Adam(cfg.learning_rate, cfg.beta_1)
    shuffle_rng = make_rng(cfg.seed, _SHUFFLE)
    latent_rng = make_rng(cfg.seed, _LATENT)
    drop_rng = make_rng(cfg.seed, _DROPOUT)
    n_batches = n // cfg.batch_size
    bs = cfg.batch_size
    latent = gen.in_shape[0]

    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        d_sum = g_sum = 0.0
        for b in range(n_batches):
            real = x_all[perm[b * bs : (b + 1) * bs]]
            try:
                for _ in range(cfg.training_balance):
                    z = latent_rng.standard_normal((bs, latent))
                    fake = gen.forward(z, True, drop_rng, update_state=False)[0] * mask
                    out_r, cache_r = disc.forward(real, True, drop_rng)
                    out_f, cache_f = disc.forward(fake, True, drop_rng)
                    d_loss, _ = gan_losses(out_r, out_f, cfg.label_smoothing)
                    _check(d_loss, epoch, b, "discriminator")
                    _, grads_r = disc.backward(cache_r, _grad_real(out_r, cfg.label_smoothing))
                    _, grads_f = disc.backward(cache_f, _grad_fake(out_f))
                    grads = [{k: gr[k] + gf[k] for k in gr} for gr, gf in zip(grads_r, grads_f)]
                    opt_d.step(disc.params, grads)
                    result.d_updates += 1
                    d_sum += d_loss
                z = latent_rng.standard_normal((bs, latent))
                raw, cache_g = gen.forward(z, True, drop_rng)
                out_f, cache_d = disc.forward(raw * mask, True, drop_rng, update_state=False)
                _, g_loss = gan_losses(out_f, out_f, cfg.label_smoothing)
                _check(g_loss, epoch, b, "generator")
                d_fake, _ = disc.backward(cache_d, _grad_gen(out_f))
                _, grads_g = gen.backward(cache_g, d_fake * mask)
                opt_g.step(gen.params, grads_g)
                result.g_updates += 1
                g_sum += g_loss
            except FloatingPointError as exc:
                if "epoch" in str(exc):
                    raise
                # non-finite activations inside a network, rather than in a loss
                raise FloatingPointError(f"{exc} at epoch {epoch}, batch {b}") from exc
        result.history.append((epoch, d_sum / (n_batches * cfg.training_balance), g_sum / n_batches))
        if epoch % 10 == 0 or epoch == cfg.epochs:
            log.info("epoch %d  d_loss %.4f  g_loss %.4f", *result.history[-1])
        if checkpoint_dir is not None and (epoch % checkpoint_every == 0 or epoch == cfg.epochs):
            _save_pair(result, checkpoint_dir, epoch)
    return result


def _check(loss: float, epoch: int, batch: int, who: str) -> None:
    if not math.isfinite(loss):
        raise FloatingPointError(f"{who} loss is {loss} at epoch {epoch}, batch {batch}")


def _save_pair(result: TrainResult, directory: Path, epoch: int) -> None:
    save_network(result.generator, directory / f"generator_e{epoch:04d}.hzgw")
    save_network(result.discriminator, directory / f"discriminator_e{epoch:04d}.hzgw")


# ---------------------------------------------------------------------------
# Sampling and evaluation

_U_MIN = np.finfo(np.float64).tiny
_U_MAX = 1.0 - np.finfo(np.float64).epsneg


def sample_events(
    gen: Network,
    count: int,
    seed: int,
    valid_mask: np.ndarray | None = None,
    channel_names: tuple[str, ...] = (),
    chunk: int = 100,
) -> Dataset:
    """Draw ``count`` uniform-scale fields from the generator in eval mode.

    Outputs are clipped into the open interval (0, 1) so saturated sigmoids
    stay valid for the Frechet and quantile transforms; masked pixels are 0.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    z = make_rng(seed, _SAMPLE).standard_normal((count, gen.in_shape[0]))
    out = np.concatenate([gen.predict(z[i : i + chunk]) for i in range(0, count, chunk)])
    out = np.clip(out, _U_MIN, _U_MAX)
    if valid_mask is not None:
        out = np.where(valid_mask, out, 0.0)
    return Dataset(out, valid_mask, channel_names, "daily-max", "generated")


def discriminator_accuracy(disc: Network, gen: Network, real: Dataset, seed: int) -> float:
    """Eval-mode accuracy on held-out real fields and an equal number of fakes."""
    fake = sample_events(gen, len(real), seed + 1_000_003, real.valid_mask)
    p_real = disc.predict(real.values).ravel()
    p_fake = disc.predict(fake.values).ravel()
    return float((np.sum(p_real > 0.5) + np.sum(p_fake <= 0.5)) / (p_real.size + p_fake.size))
