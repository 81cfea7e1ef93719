"""Command-line pipeline: ``hazardgen fit|train|generate|diagnose|sweep``.

Every command writes its outputs under ``--out`` together with one
``manifest.json`` recording the command, configuration, seed, SHA-256 digests
of inputs and outputs, upstream manifests, wall-clock time and version.

Exit codes: 0 success, 1 runtime failure, 2 missing input or bad usage,
3 marginal fit with more than 5% unconverged pixels.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
import traceback
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import compare_sets, write_report
from .gan import (
    SELECTED_SEED,
    TrainConfig,
    architecture_audit,
    sample_events,
    train,
)
from .grid import Dataset, daily_maxima, load_dataset, save_dataset
from .margins import MarginalModel, export_param_maps, fit_margins, inverse_pit, load_model, pit, save_model
from .nn import load_network, make_rng

log = logging.getLogger("hazardgen")

MANIFEST = "manifest.json"
UNCONVERGED_LIMIT = 0.05
EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_UNCONVERGED = 0, 1, 2, 3
_SWEEP_STREAM = 40


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# Manifests


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


_VOLATILE = ("wall_clock_seconds", "threads")


def stable_digest(manifest_path: str | Path) -> str:
    """SHA-256 of a manifest with its run-dependent fields (wall clock, threads) removed."""
    m = json.loads(Path(manifest_path).read_text())
    for key in _VOLATILE:
        m.pop(key, None)
    return hashlib.sha256(json.dumps(m, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    upstream: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    version: str = __version__
    threads: str = ""

    def add_input(self, name: str, path: str | Path) -> None:
        path = Path(path)
        self.inputs[name] = {"path": str(path), "sha256": sha256(path)}
        up = path.parent / MANIFEST
        if up.is_file():
            self.upstream[name] = {"path": str(up), "stable_sha256": stable_digest(up)}

    def add_outputs(self, out_dir: Path, paths) -> None:
        for p in sorted(Path(p) for p in paths):
            self.outputs[str(p.relative_to(out_dir))] = sha256(p)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _require(path) -> Path:
    if path is None:
        raise MissingInput("a required input path was not given")
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"input file not found: {p}")
    return p


def _threads():
    """Cap BLAS threads at ``HAZARDGEN_THREADS`` when set."""
    value = os.environ.get("HAZARDGEN_THREADS", "").strip()
    if not value:
        return nullcontext(), ""
    n = int(value)
    if n < 1:
        raise ValueError("HAZARDGEN_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n), value


def _load(path: Path, split: str, channel_names=()) -> Dataset:
    ds = load_dataset(path, split, channel_names)
    if ds.cadence == "hourly":
        log.info("%s: hourly cadence, aggregating to daily maxima", path)
        ds = daily_maxima(ds)
    return ds


def _names(model: MarginalModel, ds: Dataset) -> Dataset:
    model.check_compatible(ds)
    return ds.replace(channel_names=model.channel_names)


# ---------------------------------------------------------------------------
# Commands


def run_fit(data, out, block_size: int = 1, channel_names=(), threads: int | None = None) -> tuple[RunManifest, MarginalModel]:
    data = _require(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds = _load(data, "train", channel_names)
    model = fit_margins(ds, block_size=block_size, threads=threads)
    model_path = out / "model.hzgm"
    save_model(model, model_path)
    written = [model_path, *export_param_maps(model, out / "maps")]
    bad = model.unconverged()
    bad_path = out / "unconverged.csv"
    with open(bad_path, "w") as fh:
        fh.write("channel,row,col\n")
        fh.writelines(f"{c},{i},{j}\n" for c, i, j in bad)
    written.append(bad_path)
    man = RunManifest("fit", {"block_size": block_size, "channel_names": list(model.channel_names)}, None)
    man.add_input("data", data)
    man.add_outputs(out, written)
    man.wall_clock_seconds = time.perf_counter() - t0
    return man, model


def run_train(data, model, cfg: TrainConfig, out, checkpoint_every: int = 100) -> tuple[RunManifest, object]:
    data, model_path = _require(data), _require(model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    m = load_model(model_path)
    ds = _names(m, _load(data, "train"))
    res = train(pit(m, ds), cfg, checkpoint_dir=out / "checkpoints", checkpoint_every=checkpoint_every)
    loss_path = out / "losses.csv"
    with open(loss_path, "w") as fh:
        fh.write("epoch,d_loss,g_loss\n")
        fh.writelines(f"{e},{d!r},{g!r}\n" for e, d, g in res.history)
    cfg_path = out / "config.txt"
    cfg_path.write_text(cfg.to_text())
    audit_path = out / "architecture.txt"
    audit_path.write_text(architecture_audit(res.generator, res.discriminator) + "\n")
    written = [loss_path, cfg_path, audit_path, *sorted((out / "checkpoints").glob("*.hzgw"))]
    man = RunManifest("train", _config_dict(cfg), cfg.seed)
    man.add_input("data", data)
    man.add_input("model", model_path)
    man.add_outputs(out, written)
    man.wall_clock_seconds = time.perf_counter() - t0
    return man, res


def run_generate(checkpoint, model, count: int, seed: int, out) -> tuple[RunManifest, Dataset]:
    ckpt, model_path = _require(checkpoint), _require(model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    gen = load_network(ckpt)
    m = load_model(model_path)
    if tuple(gen.out_shape) != m.grid_shape:
        raise ValueError(f"generator output {tuple(gen.out_shape)} does not match marginal model grid {m.grid_shape}")
    u = sample_events(gen, count, seed, m.valid_mask, m.channel_names)
    events = inverse_pit(m, u)
    path = out / "generated.hzg"
    save_dataset(events, path)
    man = RunManifest("generate", {"count": count}, seed)
    man.add_input("checkpoint", ckpt)
    man.add_input("model", model_path)
    man.add_outputs(out, [path])
    man.wall_clock_seconds = time.perf_counter() - t0
    return man, events


def run_diagnose(train_path, test_path, generated_path, model, out):
    paths = {k: _require(p) for k, p in (("train", train_path), ("test", test_path), ("generated", generated_path))}
    model_path = _require(model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    m = load_model(model_path)
    sets = {k: _names(m, _load(p, k)) for k, p in paths.items()}
    report = compare_sets(sets["train"], sets["test"], sets["generated"], model=m, uniform=())
    written = write_report(report, out)
    man = RunManifest("diagnose", {"uniform_via": "training ECDF"}, None)
    for k, p in paths.items():
        man.add_input(k, p)
    man.add_input("model", model_path)
    man.add_outputs(out, written)
    man.wall_clock_seconds = time.perf_counter() - t0
    return man, report


# ---------------------------------------------------------------------------
# Sweep

# hyperparameter search space; ranges are inclusive
SEARCH_SEEDS = (0, 1, 2, 6, 7, 42)
SEARCH_RANGES = {
    "learning_rate": (0.0001, 0.0003),
    "beta_1": (0.1, 0.5),
    "lrelu": (0.1, 0.4),
    "dropout": (0.3, 0.6),
}
SEARCH_BALANCE = (1, 2)


@dataclass(frozen=True)
class SweepSpec:
    seeds: tuple[int, ...] = SEARCH_SEEDS
    learning_rate: tuple[float, float] = SEARCH_RANGES["learning_rate"]
    beta_1: tuple[float, float] = SEARCH_RANGES["beta_1"]
    lrelu: tuple[float, float] = SEARCH_RANGES["lrelu"]
    dropout: tuple[float, float] = SEARCH_RANGES["dropout"]
    training_balance: tuple[int, ...] = SEARCH_BALANCE
    budget: int = 10

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("sweep budget must be >= 1")
        if not self.seeds or not set(self.seeds) <= set(SEARCH_SEEDS):
            raise ValueError(f"seeds must be a non-empty subset of {SEARCH_SEEDS}")
        if not self.training_balance or not set(self.training_balance) <= set(SEARCH_BALANCE):
            raise ValueError(f"training_balance must be a non-empty subset of {SEARCH_BALANCE}")
        for name, (lo, hi) in SEARCH_RANGES.items():
            a, b = getattr(self, name)
            if not lo <= a <= b <= hi:
                raise ValueError(f"{name} range [{a}, {b}] is outside [{lo}, {hi}]")

    @classmethod
    def from_text(cls, text: str) -> "SweepSpec":
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            if key == "budget":
                kw[key] = int(value)
            elif key in ("seeds", "training_balance"):
                kw[key] = tuple(int(v) for v in value.split(","))
            elif key in SEARCH_RANGES:
                parts = [float(v) for v in value.split(",")]
                if len(parts) not in (1, 2):
                    raise ValueError(f"line {lineno}: {key} needs 'low, high' or a single value")
                kw[key] = (parts[0], parts[-1])
            else:
                raise ValueError(f"line {lineno}: unknown sweep key {key!r}")
        return cls(**kw)

    def sample(self, rng: np.random.Generator) -> dict:
        trial = {
            "seed": int(self.seeds[rng.integers(len(self.seeds))]),
            "training_balance": int(self.training_balance[rng.integers(len(self.training_balance))]),
        }
        for name in SEARCH_RANGES:
            lo, hi = getattr(self, name)
            trial[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        return trial


SWEEP_OBJECTIVE = "rmse_theta_generated_vs_test"


def run_sweep(spec: SweepSpec, data, test, model, base: TrainConfig, seed: int, out, count: int | None = None):
    """Random search; each trial trains on ``data`` and scores generated vs ``test``."""
    data, test, model_path = _require(data), _require(test), _require(model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    m = load_model(model_path)
    tr = _names(m, _load(data, "train"))
    te = _names(m, _load(test, "test"))
    u_train = pit(m, tr)
    rng = make_rng(seed, _SWEEP_STREAM)
    n_gen = count or len(te)
    rows = []
    for k in range(spec.budget):
        params = spec.sample(rng)
        cfg = replace(base, **params)
        row = {"trial": k, **params, "objective": math.nan, "status": "ok", "error": ""}
        try:
            res = train(u_train, cfg)
            gen = sample_events(res.generator, n_gen, cfg.seed, m.valid_mask, m.channel_names)
            rep = compare_sets(tr, te, gen, model=m, uniform=("generated",))
            row["objective"] = rep.summary[SWEEP_OBJECTIVE]
            if not math.isfinite(row["objective"]):
                raise FloatingPointError("objective is not finite")
        except Exception as exc:  # a failed trial is recorded, the sweep goes on
            row["status"] = "crashed"
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.warning("trial %d crashed: %s", k, row["error"])
            log.debug("%s", traceback.format_exc())
        log.info("trial %d objective %.5f", k, row["objective"])
        rows.append(row)
    ranked = sorted(rows, key=lambda r: (not math.isfinite(r["objective"]), r["objective"], r["trial"]))
    table = out / "trials.csv"
    cols = ["rank", "trial", "objective", "status", "seed", *SEARCH_RANGES, "training_balance", "error"]
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, extrasaction="ignore")
        w.writeheader()
        for rank, r in enumerate(ranked, 1):
            w.writerow({**r, "rank": rank, "objective": repr(r["objective"])})
    written = [table]
    best = ranked[0]
    if best["status"] == "ok":
        best_path = out / "best_config.txt"
        best_path.write_text(replace(base, **{k: best[k] for k in ("seed", "training_balance", *SEARCH_RANGES)}).to_text())
        written.append(best_path)
    man = RunManifest("sweep", {**asdict(spec), "base": _config_dict(base), "objective": SWEEP_OBJECTIVE}, seed)
    man.add_input("data", data)
    man.add_input("test", test)
    man.add_input("model", model_path)
    man.add_outputs(out, written)
    man.wall_clock_seconds = time.perf_counter() - t0
    return man, ranked


def _config_dict(cfg: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


# ---------------------------------------------------------------------------
# Argument handling


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(_require(args.config)) if args.config else TrainConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    return replace(cfg, **over) if over else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hazardgen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, model=True, seed=True, config=False):
        if data:
            sp.add_argument("--data", help="input HZG dataset")
        if model:
            sp.add_argument("--model", help="marginal model file (.hzgm)")
        if config:
            sp.add_argument("--config", help="key=value configuration file")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("fit", help="fit per-pixel GEV margins and empirical CDFs")
    common(sp, model=False)
    sp.add_argument("--block-size", type=int, default=1, help="GEV block length in samples")
    sp.add_argument("--channels", default="", help="comma-separated channel names")
    sp.add_argument("--threads", type=int, default=None, help="worker threads for per-pixel fits")

    sp = sub.add_parser("train", help="train the GAN on PIT-transformed data")
    common(sp, config=True)
    sp.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    sp.add_argument("--checkpoint-every", type=int, default=100)

    sp = sub.add_parser("generate", help="sample events and map them to the original scale")
    common(sp, data=False)
    sp.add_argument("--checkpoint", help="generator checkpoint (.hzgw)")
    sp.add_argument("--count", type=int, default=1000)

    sp = sub.add_parser("diagnose", help="compare dependence of train/test/generated sets")
    common(sp, data=False, seed=False)
    sp.add_argument("--train")
    sp.add_argument("--test")
    sp.add_argument("--generated")

    sp = sub.add_parser("sweep", help="random hyperparameter search within the search bounds")
    common(sp, config=True)
    sp.add_argument("--test", help="held-out HZG dataset for the objective")
    sp.add_argument("--sweep", dest="sweep_spec", help="sweep range file (key=value)")
    sp.add_argument("--budget", type=int, default=None, help="override the trial budget")
    sp.add_argument("--epochs", type=int, default=None, help="epochs per trial")
    sp.add_argument("--count", type=int, default=None, help="generated samples per trial (default: test size)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        limiter, threads = _threads()
        with limiter:
            return _dispatch(args, threads)
    except MissingInput as exc:
        print(f"hazardgen: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:
        print(f"hazardgen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("%s", traceback.format_exc())
        return EXIT_FAIL


def _dispatch(args, threads: str) -> int:
    out = Path(args.out)
    code = EXIT_OK
    if args.command == "fit":
        names = tuple(s.strip() for s in args.channels.split(",") if s.strip())
        man, model = run_fit(args.data, out, args.block_size, names, args.threads)
        bad = model.unconverged()
        n_fit = int(model.valid_mask.sum()) * model.grid_shape[0]
        if bad:
            log.warning("%d of %d pixel-channel fits did not converge: %s", len(bad), n_fit, bad[:20])
        if n_fit and len(bad) / n_fit > UNCONVERGED_LIMIT:
            print(f"hazardgen fit: {len(bad)}/{n_fit} fits unconverged (> 5%); see {out / 'unconverged.csv'}", file=sys.stderr)
            code = EXIT_UNCONVERGED
    elif args.command == "train":
        man, _ = run_train(args.data, args.model, _train_config(args), out, args.checkpoint_every)
    elif args.command == "generate":
        seed = SELECTED_SEED if args.seed is None else args.seed
        man, _ = run_generate(args.checkpoint, args.model, args.count, seed, out)
    elif args.command == "diagnose":
        man, report = run_diagnose(args.train, args.test, args.generated, args.model, out)
        for key in ("rmse_theta_generated_vs_test", "rmse_theta_train_vs_test", "rmse_pearson_generated_vs_test"):
            log.info("%s = %.5f", key, report.summary[key])
    elif args.command == "sweep":
        spec = SweepSpec.from_text(_require(args.sweep_spec).read_text()) if args.sweep_spec else SweepSpec()
        if args.budget is not None:
            spec = replace(spec, budget=args.budget)
        seed = SELECTED_SEED if args.seed is None else args.seed
        base = _train_config(argparse.Namespace(config=args.config, seed=None, epochs=args.epochs))
        man, ranked = run_sweep(spec, args.data, args.test, args.model, base, seed, out, args.count)
        log.info("best trial %d objective %.5f", ranked[0]["trial"], ranked[0]["objective"])
    else:  # pragma: no cover - argparse restricts the choices
        raise ValueError(args.command)
    man.threads = threads
    man.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
