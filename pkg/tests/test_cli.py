import csv
import json
import math

import numpy as np
import pytest

from hazardgen import cli
from hazardgen.cli import RunManifest, SweepSpec, main, sha256, stable_digest
from hazardgen.diagnostics import report_filenames
from hazardgen.grid import SynthSpec, load_dataset, save_dataset, synth_dataset
from hazardgen.margins import MarginalModel, load_model

TINY = """\
epochs = 2
batch_size = 10
gen_filters = 8,4,4
disc_filters = 4,4,8
latent_dim = 6
kernel = 3
"""


def _files(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def _manifest(d):
    m = json.loads((d / "manifest.json").read_text())
    m.pop("wall_clock_seconds")
    m.pop("threads")
    return m


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    mask = np.ones((6, 6), bool)
    mask[0, 0] = False
    spec = SynthSpec(3, 6, 6, 40, 2.0, 0.5, ((0.1, 10, 2), (0.2, 3, 1), (-0.1, 0.05, 0.02)), valid_mask=mask)
    save_dataset(synth_dataset(spec, 1, "train"), root / "train.hzg")
    save_dataset(synth_dataset(spec, 2, "test"), root / "test.hzg")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["fit", "--data", str(root / "train.hzg"), "--out", str(root / "fit"), "--channels", "wind,wave,precip"]) == 0
    assert main(["train", "--data", str(root / "train.hzg"), "--model", str(root / "fit/model.hzgm"),
                 "--config", str(root / "tiny.cfg"), "--out", str(root / "train"), "--checkpoint-every", "1"]) == 0
    assert main(["generate", "--checkpoint", str(root / "train/checkpoints/generator_e0002.hzgw"),
                 "--model", str(root / "fit/model.hzgm"), "--count", "25", "--seed", "3", "--out", str(root / "gen")]) == 0
    return root


def test_missing_input_exit_code(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "nope.hzg"), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "nope.hzg"), "--out", str(tmp_path / "o")]) == 2


def test_runtime_failure_exit_code(work, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    rc = main(["train", "--data", str(work / "train.hzg"), "--model", str(work / "fit/model.hzgm"),
               "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 1


def test_fit_outputs(work):
    out = work / "fit"
    names = {p.name for p in (out / "maps").iterdir()}
    for ch in ("wind", "wave", "precip"):
        for par in ("shape", "loc", "scale"):
            assert f"gev_{par}_{ch}.csv" in names
    m = load_model(out / "model.hzgm")
    assert m.channel_names == ("wind", "wave", "precip")
    man = RunManifest.read(out / "manifest.json")
    assert man.command == "fit"
    assert man.inputs["data"]["sha256"] == sha256(work / "train.hzg")
    for rel, digest in man.outputs.items():
        assert sha256(out / rel) == digest


def test_fit_deterministic_across_thread_counts(work, tmp_path, monkeypatch):
    runs = []
    for n in ("1", "2"):
        monkeypatch.setenv("HAZARDGEN_THREADS", n)
        out = tmp_path / f"t{n}"
        assert main(["fit", "--data", str(work / "train.hzg"), "--out", str(out), "--threads", n, "--channels", "a,b,c"]) == 0
        runs.append(out)
    assert _files(runs[0]) == _files(runs[1])
    assert _manifest(runs[0])["outputs"] == _manifest(runs[1])["outputs"]
    assert RunManifest.read(runs[0] / "manifest.json").threads == "1"


def test_fit_unconverged_exit_code(work, tmp_path, monkeypatch):
    # every pixel failing to converge trips the 5% rule
    monkeypatch.setattr(MarginalModel, "unconverged", lambda self: [(0, 0, 1)] * 100)
    assert main(["fit", "--data", str(work / "train.hzg"), "--out", str(tmp_path / "u")]) == 3
    assert (tmp_path / "u" / "manifest.json").exists()


def test_train_outputs_and_chain(work):
    out = work / "train"
    ckpts = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert ckpts == ["discriminator_e0001.hzgw", "discriminator_e0002.hzgw", "generator_e0001.hzgw", "generator_e0002.hzgw"]
    lines = (out / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,d_loss,g_loss" and len(lines) == 3
    assert "published" in (out / "architecture.txt").read_text()
    man = RunManifest.read(out / "manifest.json")
    assert man.upstream["model"]["stable_sha256"] == stable_digest(work / "fit/manifest.json")
    assert man.config["epochs"] == 2


def test_train_zero_epochs_writes_initial_checkpoint(work, tmp_path):
    out = tmp_path / "z"
    assert main(["train", "--data", str(work / "train.hzg"), "--model", str(work / "fit/model.hzgm"),
                 "--config", str(work / "tiny.cfg"), "--epochs", "0", "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["discriminator_e0000.hzgw", "generator_e0000.hzgw"]
    assert (out / "losses.csv").read_text() == "epoch,d_loss,g_loss\n"


def test_train_repeatable(work, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--data", str(work / "train.hzg"), "--model", str(work / "fit/model.hzgm"),
                 "--config", str(work / "tiny.cfg"), "--out", str(out), "--checkpoint-every", "1"]) == 0
    assert _files(out) == _files(work / "train")


def test_generate_count_and_support(work):
    ds = load_dataset(work / "gen/generated.hzg")
    assert ds.values.shape == (25, 3, 6, 6)
    m = load_model(work / "fit/model.hzgm")
    assert np.all(ds.values[:, :, ~m.valid_mask] == 0)
    assert np.all(np.isfinite(ds.values))
    # where a fitted GEV is upper-bounded the samples stay inside its support
    v = m.valid_mask
    shape, loc, scale = m.shape[:, v], m.loc[:, v], m.scale[:, v]
    with np.errstate(divide="ignore"):
        upper = np.where(shape < 0, loc - scale / shape, np.inf)
    assert np.all(ds.values[:, :, v] <= upper + 1e-9)


def test_generate_same_seed_bit_identical(work, tmp_path):
    args = ["generate", "--checkpoint", str(work / "train/checkpoints/generator_e0002.hzgw"),
            "--model", str(work / "fit/model.hzgm"), "--count", "25", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a/generated.hzg").read_bytes() == (work / "gen/generated.hzg").read_bytes()
    assert main(args[:-1] + ["4", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b/generated.hzg").read_bytes() != (work / "gen/generated.hzg").read_bytes()


def test_generate_grid_mismatch(work, tmp_path):
    other = SynthSpec(3, 5, 5, 40, 2.0, 0.5)
    save_dataset(synth_dataset(other, 0), tmp_path / "o.hzg")
    assert main(["fit", "--data", str(tmp_path / "o.hzg"), "--out", str(tmp_path / "f")]) == 0
    rc = main(["generate", "--checkpoint", str(work / "train/checkpoints/generator_e0002.hzgw"),
               "--model", str(tmp_path / "f/model.hzgm"), "--out", str(tmp_path / "g")])
    assert rc == 1


def test_diagnose_identical_sets(work, tmp_path):
    out = tmp_path / "d"
    assert main(["diagnose", "--train", str(work / "train.hzg"), "--test", str(work / "test.hzg"),
                 "--generated", str(work / "test.hzg"), "--model", str(work / "fit/model.hzgm"), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(report_filenames(("wind", "wave", "precip")) + ["manifest.json"])
    summary = dict(line.split(" = ") for line in (out / "summary.txt").read_text().splitlines() if not line.startswith("#"))
    assert float(summary["rmse_theta_generated_vs_test"]) == 0.0
    assert float(summary["rmse_pearson_generated_vs_test"]) == 0.0
    assert int(summary["n_pairs"]) == 35 * 34 // 2


def test_diagnose_on_generated_output(work, tmp_path):
    out = tmp_path / "d2"
    assert main(["diagnose", "--train", str(work / "train.hzg"), "--test", str(work / "test.hzg"),
                 "--generated", str(work / "gen/generated.hzg"), "--model", str(work / "fit/model.hzgm"), "--out", str(out)]) == 0
    man = RunManifest.read(out / "manifest.json")
    assert man.upstream["generated"]["stable_sha256"] == stable_digest(work / "gen/manifest.json")
    again = tmp_path / "d3"
    main(["diagnose", "--train", str(work / "train.hzg"), "--test", str(work / "test.hzg"),
          "--generated", str(work / "gen/generated.hzg"), "--model", str(work / "fit/model.hzgm"), "--out", str(again)])
    assert _files(out) == _files(again)


# --- sweep ---------------------------------------------------------------------------


def _sweep(work, out, text, budget=None):
    spec = out.parent / f"{out.name}.sweep"
    spec.write_text(text)
    args = ["sweep", "--data", str(work / "train.hzg"), "--test", str(work / "test.hzg"), "--model", str(work / "fit/model.hzgm"),
            "--config", str(work / "tiny.cfg"), "--sweep", str(spec), "--epochs", "1", "--out", str(out)]
    if budget is not None:
        args += ["--budget", str(budget)]
    return main(args)


def _trials(out):
    with open(out / "trials.csv") as fh:
        return list(csv.DictReader(fh))


def test_sweep_single_trial(work, tmp_path):
    assert _sweep(work, tmp_path / "s1", "budget = 1\n") == 0
    rows = _trials(tmp_path / "s1")
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert (tmp_path / "s1/best_config.txt").exists()


def test_sweep_collapsed_ranges(work, tmp_path):
    text = "seeds = 42\nlearning_rate = 0.0002\nbeta_1 = 0.3\nlrelu = 0.2\ndropout = 0.4\ntraining_balance = 1\n"
    assert _sweep(work, tmp_path / "s2", text, budget=2) == 0
    rows = _trials(tmp_path / "s2")
    assert {r["seed"] for r in rows} == {"42"}
    assert {float(r["learning_rate"]) for r in rows} == {0.0002}
    # identical configurations give identical objectives
    assert rows[0]["objective"] == rows[1]["objective"]


def test_sweep_ranking(work, tmp_path):
    assert _sweep(work, tmp_path / "s3", "budget = 5\n") == 0
    rows = _trials(tmp_path / "s3")
    obj = [float(r["objective"]) for r in rows]
    assert obj == sorted(obj)
    assert obj[0] <= float(np.median(obj))
    best = (tmp_path / "s3/best_config.txt").read_text()
    assert f"seed = {rows[0]['seed']}" in best


def test_sweep_records_crashed_trial(work, tmp_path, monkeypatch):
    real = cli.train
    calls = []

    def flaky(data, cfg, *a, **k):
        calls.append(cfg)
        if len(calls) == 1:
            raise FloatingPointError("discriminator loss is nan at epoch 1, batch 0")
        return real(data, cfg, *a, **k)

    monkeypatch.setattr(cli, "train", flaky)
    assert _sweep(work, tmp_path / "s4", "budget = 2\n") == 0
    rows = _trials(tmp_path / "s4")
    assert [r["status"] for r in rows] == ["ok", "crashed"]
    assert math.isnan(float(rows[1]["objective"]))
    assert "epoch 1, batch 0" in rows[1]["error"]


@pytest.mark.parametrize(
    "text",
    ["learning_rate = 0.00005, 0.0002", "seeds = 3", "training_balance = 3", "budget = 0", "momentum = 1", "dropout = 0.1,0.2,0.3"],
)
def test_sweep_spec_rejects_out_of_table(text):
    with pytest.raises(ValueError):
        SweepSpec.from_text(text)


def test_sweep_spec_sampling_within_bounds():
    spec = SweepSpec()
    rng = np.random.default_rng(0)
    for _ in range(200):
        t = spec.sample(rng)
        assert t["seed"] in (0, 1, 2, 6, 7, 42)
        assert t["training_balance"] in (1, 2)
        assert 1e-4 <= t["learning_rate"] <= 3e-4
        assert 0.1 <= t["beta_1"] <= 0.5
        assert 0.1 <= t["lrelu"] <= 0.4
        assert 0.3 <= t["dropout"] <= 0.6
