import csv
import json
from pathlib import Path

import numpy as np
import pytest

from udimlab import cli
from udimlab import experiment as ex
from udimlab.analysis import load_grid
from udimlab.domains import load_dataset
from udimlab.optim import OptState, base_step
from udimlab.nn_core import loss_and_grad

TINY = """
benchmark.generator = moons
benchmark.n = 80
benchmark.angles = 0,30,60
model.hidden = 8
run.methods = sam,erm,udim_sam
run.iters = 24
run.eval_every = 8
run.batch_size = 16
run.seeds = 0
udim.rho_x = 0.3
analysis.samples = 4
analysis.grid_resolution = 3
"""


def tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = ex.parse_config(TINY)
    manifest = ex.run_experiment(cfg, out)
    return cfg, out, manifest


def test_config_round_trip():
    cfg = ex.parse_config(TINY)
    assert ex.parse_config(ex.dump_config(cfg)) == cfg
    assert cfg.run.methods == ["sam", "erm", "udim_sam"]
    assert cfg.udim.rho_x == 0.3 and cfg.model.hidden == [8]


@pytest.mark.parametrize("bad", [
    "run.methods = sam,adamw",
    "run.seeds = ",
    "run.eval_every = 100",
    "bogus.key = 1",
    "udim.warmup_fraction = 1.0",
    "benchmark.angles = 0,0",
    "benchmark.scenario = LOODG",
    "benchmark.sources = 0,1",
    "run.iters = many",
])
def test_invalid_configs_raise_config_error(bad):
    with pytest.raises(ex.ConfigError):
        ex.parse_config(TINY + bad + "\n")


def test_default_config_follows_method_defaults():
    cfg = ex.ExperimentConfig()
    assert (cfg.udim.rho, cfg.udim.rho_prime, cfg.udim.lambda1, cfg.udim.rho_x) == (0.05, 0.05, 1.0, 1.0)
    assert cfg.udim.warmup_fraction == 0.5


def test_manifest_references_existing_files(tiny_run):
    _, out, manifest = tiny_run
    assert manifest["complete"]
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk["complete"] and len(on_disk["runs"]) == 3
    for run in on_disk["runs"]:
        for f in run["files"]:
            assert (out / f).is_file(), f
        assert ex.parse_config((out / "runs" / run["run_dir"] / "config.txt").read_text()).run.seeds == [0]
    assert (out / on_disk["config"]).is_file()


def test_identical_configs_identical_bytes(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    ex.run_experiment(cfg, tmp_path)
    assert tree_bytes(tmp_path) == {k: v for k, v in tree_bytes(out).items() if not k.startswith("analysis")}


def test_threads_do_not_change_outputs(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    ex.run_experiment(cfg, tmp_path, threads=2)
    assert (tmp_path / "comparison.csv").read_bytes() == (out / "comparison.csv").read_bytes()
    assert (tmp_path / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()


def test_erm_matches_direct_base_optimizer(tiny_run):
    cfg, out, _ = tiny_run
    bench = ex.prepare_benchmark(cfg.benchmark)
    src = bench.source_train
    m = cfg.model_spec(src.dim, src.n_classes).build(0)
    opt = cfg.udim.optimizer(cfg.optim)
    rng = np.random.default_rng([0, 1])
    state = OptState()
    losses = []
    for _ in range(cfg.run.iters):
        batch = src.subset(np.sort(rng.choice(len(src), size=cfg.run.batch_size, replace=False)))
        value, g = loss_and_grad(m, batch)
        losses.append(value)
        base_step(m, g, opt, state)
    saved = ex.model_from_json((out / "runs/erm_seed0/model.json").read_text())
    assert saved.theta.tobytes() == m.theta.tobytes()
    with open(out / "runs/erm_seed0/metrics.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["phase"] == "base"]
    assert [float(r["sam_loss"]) for r in rows] == losses


def test_comparison_table_shape(tiny_run):
    cfg, out, manifest = tiny_run
    with open(out / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == cfg.run.methods
    targets = manifest["targets"]
    assert targets == ["rot30", "rot60"]
    for r in rows:
        assert all(float(r[f"{t}_std"]) == 0.0 for t in targets)
        assert float(r["avg_std"]) == 0.0 and r["n_seeds"] == "1"
        means = [float(r[f"{t}_mean"]) for t in targets]
        assert abs(float(r["avg_mean"]) - np.mean(means)) <= 1e-12
        assert float(r["worst_mean"]) == min(means)


def test_comparison_over_seeds_uses_population_std(tmp_path):
    cfg = ex.parse_config(TINY + "run.seeds = 0,1\nrun.methods = erm\n")
    man = ex.run_experiment(cfg, tmp_path)
    acc = np.array([r["selected_accuracy"]["rot30"] for r in man["runs"]])
    with open(tmp_path / "comparison.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["rot30_std"]) == pytest.approx(acc.std(ddof=0), abs=1e-15)


def test_comparison_rejects_mixed_benchmarks(tiny_run, tmp_path):
    _, out, _ = tiny_run
    other = ex.parse_config(TINY.replace("benchmark.n = 80", "benchmark.n = 60") + "run.methods = erm\n")
    ex.run_experiment(other, tmp_path)
    with pytest.raises(ValueError):
        ex.emit_comparison([out / "manifest.json", tmp_path / "manifest.json"])


def test_selected_checkpoint_is_best_validation(tiny_run):
    _, out, _ = tiny_run
    result = json.loads((out / "runs/udim_sam_seed0/result.json").read_text())
    with open(out / "runs/udim_sam_seed0/metrics.csv") as fh:
        val = {int(r["iter"]): float(r["accuracy"]) for r in csv.DictReader(fh) if r["domain"] == "source-val"}
    best = max(val.values())
    assert val[result["selected_iter"]] == best
    assert result["selected_iter"] == max(it for it, a in val.items() if a == best)


def test_analysis_outputs(tiny_run):
    cfg, out, manifest = tiny_run
    written = ex.emit_analysis(out / "manifest.json")
    assert len(written) == 3 * len(manifest["runs"])
    for run in manifest["runs"]:
        with open(out / "analysis" / f"{run['run_dir']}_inconsistency.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == cfg.run.iters // cfg.run.eval_every
        assert all(float(r["self"]) == 0.0 for r in rows)
        assert all(float(r["max"]) == max(float(r[t]) for t in manifest["targets"]) for r in rows)
        for kind in ("param", "data"):
            g = load_grid(out / "analysis" / f"{run['run_dir']}_{kind}_grid.csv")
            assert g.values.shape == (cfg.analysis.grid_resolution,) * 2
            assert np.all(np.isfinite(g.values))


def test_analysis_names_missing_checkpoints(tiny_run, tmp_path):
    cfg, _, _ = tiny_run
    ex.run_experiment(cfg, tmp_path)
    ck = tmp_path / "runs/sam_seed0/checkpoints.json"
    cks = json.loads(ck.read_text())
    ck.write_text(json.dumps([c for c in cks if c["iter"] != 16]))
    with pytest.raises(FileNotFoundError, match=r"sam_seed0.*\[16\]"):
        ex.emit_analysis(tmp_path / "manifest.json", ("inconsistency_curve",))


def test_mid_run_failure_leaves_incomplete_manifest(tmp_path, monkeypatch):
    real = ex._run_one
    calls = []

    def flaky(cfg, method, seed, root):
        calls.append(method)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return real(cfg, method, seed, root)

    monkeypatch.setattr(ex, "_run_one", flaky)
    with pytest.raises(RuntimeError):
        ex.run_experiment(ex.parse_config(TINY), tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["complete"] is False and len(man["runs"]) == 1


def test_sign_test():
    assert ex.sign_test_pvalue(5, 5) == 1 / 32
    assert ex.sign_test_pvalue(4, 5) == 6 / 32
    assert ex.sign_test_pvalue(0, 5) == 1.0


# -- CLI -----------------------------------------------------------------------

@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_cli_gen_writes_readable_datasets(cfg_file, tmp_path, capsys):
    out = tmp_path / "data"
    assert cli.main(["gen", "--config", str(cfg_file), "--out", str(out)]) == 0
    files = sorted(out.glob("*.udimds"))
    assert [f.stem for f in files] == ["rot0", "rot30", "rot60"]
    assert len(load_dataset(files[0])) == 80


def test_cli_train_compare_analyze(cfg_file, tmp_path, capsys):
    out = tmp_path / "exp"
    assert cli.main(["train", "--config", str(cfg_file), "--out", str(out), "--seed", "3"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["seeds"] == [3]
    before = (out / "comparison.csv").read_bytes()
    assert cli.main(["compare", "--out", str(out)]) == 0
    assert (out / "comparison.csv").read_bytes() == before
    assert cli.main(["analyze", "--out", str(out), "--which", "data_grid"]) == 0
    assert len(list((out / "analysis").glob("*_data_grid.csv"))) == 3


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("run.methods = nope\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert cli.main(["analyze", "--out", str(tmp_path / "no_such_run")]) == 2


def test_cli_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 4
