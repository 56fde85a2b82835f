"""Config-driven experiment runner: training sweeps, comparison tables, analysis artifacts.

Config files are flat ``section.key = value`` text. Sections: ``benchmark``,
``model``, ``udim``, ``optim``, ``run``, ``analysis``. Lists are comma
separated; blob shift vectors are ``;``-separated lists of comma-separated
numbers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import domains as dom
from .analysis import data_sharpness_grid, estimate_inconsistency, param_sharpness_grid, save_grid
from .nn_core import Mlp
from .optim import OptimizerConfig
from .udim import METHODS, ModelSpec, UdimConfig, train

log = logging.getLogger(__name__)

SCENARIOS = ("SDG", "LOODG")
GENERATORS = ("moons", "blobs", "glyphs")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


@dataclass
class BenchmarkSpec:
    generator: str = "moons"
    n: int = 500
    noise: float = 0.1
    seed: int = 0
    scenario: str = "SDG"
    sources: list = field(default_factory=lambda: [0])
    angles: list = field(default_factory=lambda: [0.0, 15.0, 30.0, 45.0, 60.0])
    n_classes: int = 3
    shifts: str = "0,0;1.5,0;3,0"
    scales: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    corruption: str = "gauss_noise"
    severities: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    train_frac: float = 0.6
    val_frac: float = 0.2

    def validate(self, n_domains: int):
        if self.generator not in GENERATORS:
            raise ConfigError(f"benchmark.generator must be one of {GENERATORS}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"benchmark.scenario must be one of {SCENARIOS}")
        if n_domains < 2:
            raise ConfigError("a benchmark needs at least 2 domains")
        if any(not 0 <= s < n_domains for s in self.sources) or len(set(self.sources)) != len(self.sources):
            raise ConfigError(f"benchmark.sources must be distinct indices below {n_domains}")
        if self.scenario == "SDG" and len(self.sources) != 1:
            raise ConfigError("SDG uses exactly one source domain")
        if self.scenario == "LOODG" and (len(self.sources) < 2 or len(self.sources) != n_domains - 1):
            raise ConfigError("LOODG uses every domain but one as a source (>= 2 sources)")


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [32, 32])
    loss_kind: str = "ce"
    activation: str = "tanh"


@dataclass
class RunConfig:
    methods: list = field(default_factory=lambda: ["sam", "udim_sam"])
    iters: int = 2000
    eval_every: int = 100
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class AnalysisConfig:
    gamma: float = 0.1
    rho: float = 0.05
    samples: int = 64
    grid_radius_param: float = 0.5
    grid_radius_data: float = 0.5
    grid_resolution: int = 11
    # index of the domain scanned by the grids; -1 = last domain
    grid_domain: int = -1


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    udim: UdimConfig = field(default_factory=lambda: UdimConfig(rho_x=1.0, warmup_fraction=0.5))
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    run: RunConfig = field(default_factory=RunConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self) -> None:
        try:
            domains = build_domains(self.benchmark)
        except ValueError as exc:
            raise ConfigError(f"benchmark: {exc}") from None
        self.benchmark.validate(len(domains))
        if not self.run.methods:
            raise ConfigError("run.methods must name at least one method")
        for mth in self.run.methods:
            if mth not in METHODS:
                raise ConfigError(f"unknown method {mth!r}; expected one of {METHODS}")
        if not self.run.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if self.run.iters < 1:
            raise ConfigError("run.iters must be >= 1")
        if not 1 <= self.run.eval_every <= self.run.iters:
            raise ConfigError("run.eval_every must lie in 1..run.iters")
        if self.run.batch_size < 2:
            raise ConfigError("run.batch_size must be >= 2")

    def model_spec(self, n_inputs: int, n_classes: int) -> ModelSpec:
        return ModelSpec([n_inputs, *self.model.hidden, n_classes], self.model.loss_kind,
                         self.model.activation)


SECTIONS = ("benchmark", "model", "udim", "optim", "run", "analysis")


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return [kind(s) for s in items]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``section.key = value`` lines into an :class:`ExperimentConfig`."""
    base = ExperimentConfig()
    values = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        section, dot, name = key.strip().partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section in {key.strip()!r}")
        obj = getattr(base, section)
        known = {f.name for f in fields(obj)}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key.strip()!r}")
        values[section][name] = _coerce(raw, getattr(obj, name), key.strip())
    try:
        cfg = ExperimentConfig(**{s: replace(getattr(base, s), **values[s]) for s in SECTIONS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical resolved config; parse_config(dump_config(c)) == c."""
    lines = []
    for s in SECTIONS:
        obj = getattr(cfg, s)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, list):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{s}.{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig, section: str | None = None) -> str:
    text = dump_config(cfg)
    if section:
        text = "\n".join(l for l in text.splitlines() if l.startswith(section + "."))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_domains(b: BenchmarkSpec) -> list:
    if b.generator == "moons":
        return dom.make_moons_domains(b.n, b.angles, b.noise, b.seed)
    if b.generator == "blobs":
        shifts = [[float(x) for x in vec.split(",")] for vec in b.shifts.split(";")]
        return dom.make_blobs_domains(b.n, b.n_classes, shifts, b.scales, b.seed)
    if b.generator == "glyphs":
        return dom.make_glyphs_corrupted(b.n, b.corruption, b.severities, b.seed)
    raise ConfigError(f"unknown generator {b.generator!r}")


@dataclass
class Benchmark:
    domains: list
    source_train: dom.DomainDataset
    source_val: dom.DomainDataset
    source_test: dom.DomainDataset
    targets: list


def prepare_benchmark(b: BenchmarkSpec) -> Benchmark:
    domains = build_domains(b)
    b.validate(len(domains))
    trains, vals, tests = [], [], []
    for i in b.sources:
        tr, va, te = dom.split(domains[i], b.train_frac, b.val_frac, seed=b.seed)
        trains.append(tr)
        vals.append(va)
        tests.append(te)
    targets = [d for i, d in enumerate(domains) if i not in b.sources]
    return Benchmark(domains, dom.merge(trains, "source-train"), dom.merge(vals, "source-val"),
                     dom.merge(tests, "source-test"), targets)


# -- model files -------------------------------------------------------------

def model_to_json(m: Mlp) -> str:
    return json.dumps({"layer_dims": m.layer_dims, "loss_kind": m.loss_kind,
                       "activation": m.activation, "theta": m.theta.tolist()})


def model_from_json(text: str) -> Mlp:
    d = json.loads(text)
    return Mlp(d["layer_dims"], d["loss_kind"], d["activation"], np.array(d["theta"]))


# -- runs --------------------------------------------------------------------

def _run_one(cfg: ExperimentConfig, method: str, seed: int, root: Path) -> dict:
    bench = prepare_benchmark(cfg.benchmark)
    src = bench.source_train
    spec = cfg.model_spec(src.dim, src.n_classes)
    eval_sets = {"source-val": bench.source_val}
    eval_sets.update({d.domain_id: d for d in bench.targets})
    m, tlog = train(spec, [src], cfg.udim, cfg.optim, cfg.run.iters, seed, method=method,
                    batch_size=cfg.run.batch_size, eval_sets=eval_sets, eval_every=cfg.run.eval_every)
    name = f"{method}_seed{seed}"
    run_dir = root / "runs" / name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(replace(cfg, run=replace(cfg.run, methods=[method],
                                                                             seeds=[seed]))))
    tlog.to_csv(run_dir / "metrics.csv")
    (run_dir / "model.json").write_text(model_to_json(m))
    (run_dir / "checkpoints.json").write_text(json.dumps(
        [{"iter": it, "theta": th.tolist()} for it, th in tlog.checkpoints]))

    # best source-validation accuracy; ties go to the later checkpoint
    val = {e["iter"]: e["accuracy"] for e in tlog.evals if e["domain"] == "source-val"}
    best_iter = max(val, key=lambda it: (val[it], it))
    selected = {e["domain"]: e["accuracy"] for e in tlog.evals
                if e["iter"] == best_iter and e["domain"] != "source-val"}
    final = {d.domain_id: m.accuracy(d.inputs, d.labels) for d in bench.targets}
    result = {"method": method, "seed": seed, "selected_iter": best_iter,
              "selected_accuracy": selected, "final_accuracy": final,
              "final_source_test_accuracy": m.accuracy(bench.source_test.inputs,
                                                       bench.source_test.labels)}
    (run_dir / "result.json").write_text(json.dumps(result, sort_keys=True, indent=1))
    files = [f"runs/{name}/{f}" for f in
             ("config.txt", "metrics.csv", "model.json", "checkpoints.json", "result.json")]
    return {**result, "run_dir": name, "files": files}


def _run_task(args):
    cfg, method, seed, root = args
    return _run_one(cfg, method, seed, Path(root))


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Train every (method, seed), write per-run artifacts and ``manifest.json``.

    On a mid-run failure the manifest is still written, with ``complete``
    false and only the finished runs listed; the exception propagates.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    tasks = [(cfg, mth, s, str(out)) for mth in cfg.run.methods for s in cfg.run.seeds]
    manifest = {"config": "config.txt", "config_hash": config_hash(cfg),
                "benchmark_hash": config_hash(cfg, "benchmark"),
                "methods": list(cfg.run.methods), "seeds": list(cfg.run.seeds),
                "targets": [d.domain_id for d in prepare_benchmark(cfg.benchmark).targets],
                "runs": [], "complete": False}
    try:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                manifest["runs"] = list(pool.map(_run_task, tasks))
        else:
            for t in tasks:
                log.info("training %s seed %s", t[1], t[2])
                manifest["runs"].append(_run_task(t))
        manifest["complete"] = True
    finally:
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    emit_comparison([out / "manifest.json"], out / "comparison.csv")
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    m = json.loads(path.read_text())
    m["_root"] = str(path.parent)
    return m


def emit_comparison(manifests, path=None, which: str = "selected") -> str:
    """Rows = methods, columns = target domains + Avg; cells are mean and std over seeds.

    ``std`` is the population standard deviation (0 for a single seed).
    """
    loaded = [load_manifest(p) if not isinstance(p, dict) else p for p in manifests]
    if not loaded:
        raise ValueError("no manifests given")
    if len({m["benchmark_hash"] for m in loaded}) != 1:
        raise ValueError("manifests come from different benchmarks")
    targets = loaded[0]["targets"]
    methods = []
    for m in loaded:
        methods += [x for x in m["methods"] if x not in methods]
    key = f"{which}_accuracy"
    header = ["method"] + [f"{t}_{s}" for t in targets for s in ("mean", "std")] + \
             ["avg_mean", "avg_std", "worst_mean", "worst_std", "n_seeds"]
    lines = [",".join(header)]
    for mth in methods:
        runs = [r for m in loaded for r in m["runs"] if r["method"] == mth]
        if not runs:
            continue
        acc = np.array([[r[key][t] for t in targets] for r in runs])
        means, stds = acc.mean(axis=0), acc.std(axis=0)
        cells = [mth]
        for mu, sd in zip(means, stds):
            cells += [repr(float(mu)), repr(float(sd))]
        per_seed_avg = acc.mean(axis=1)
        worst = acc.min(axis=1)
        cells += [repr(float(np.mean(means))), repr(float(per_seed_avg.std())),
                  repr(float(worst.mean())), repr(float(worst.std())), str(len(runs))]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


ANALYSES = ("inconsistency_curve", "param_grid", "data_grid")


def emit_analysis(manifest, which=ANALYSES, out_dir=None) -> list:
    """Inconsistency-over-checkpoints curves and landscape grids for every run."""
    man = load_manifest(manifest) if not isinstance(manifest, dict) else manifest
    root = Path(man["_root"])
    unknown = set(which) - set(ANALYSES)
    if unknown:
        raise ValueError(f"unknown analyses {sorted(unknown)}")
    cfg = load_config(root / man["config"])
    bench = prepare_benchmark(cfg.benchmark)
    src = bench.source_train
    a = cfg.analysis
    out = Path(out_dir) if out_dir else root / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    grid_target = bench.domains[a.grid_domain]
    expected = list(range(cfg.run.eval_every, cfg.run.iters + 1, cfg.run.eval_every))
    if not expected or expected[-1] != cfg.run.iters:
        expected.append(cfg.run.iters)
    written = []
    for run in man["runs"]:
        rdir = root / "runs" / run["run_dir"]
        name = run["run_dir"]
        if "inconsistency_curve" in which:
            ck_path = rdir / "checkpoints.json"
            if not ck_path.exists():
                raise FileNotFoundError(f"{name}: missing checkpoints file {ck_path}")
            cks = json.loads(ck_path.read_text())
            have = [c["iter"] for c in cks]
            missing = [it for it in expected if it not in have]
            if missing:
                raise FileNotFoundError(f"{name}: missing checkpoints for iterations {missing}")
            m = model_from_json((rdir / "model.json").read_text())
            lines = ["iter,self," + ",".join(t.domain_id for t in bench.targets) + ",max"]
            for c in cks:
                m.set_params(np.array(c["theta"]))
                self_gap = estimate_inconsistency(m, src, src, a.gamma, a.rho, a.samples,
                                                  seed=run["seed"]).value
                vals = [estimate_inconsistency(m, src, t, a.gamma, a.rho, a.samples,
                                               seed=run["seed"]).value for t in bench.targets]
                lines.append(",".join([str(c["iter"]), repr(self_gap)] + [repr(v) for v in vals]
                                      + [repr(max(vals))]))
            p = out / f"{name}_inconsistency.csv"
            p.write_text("\n".join(lines) + "\n")
            written.append(p)
        m = model_from_json((rdir / "model.json").read_text())
        if "param_grid" in which:
            g = param_sharpness_grid(m, grid_target, a.grid_radius_param, a.grid_resolution,
                                     seed=run["seed"])
            p = out / f"{name}_param_grid.csv"
            save_grid(g, p)
            written.append(p)
        if "data_grid" in which:
            g = data_sharpness_grid(m, grid_target, a.grid_radius_data, a.grid_resolution,
                                    seed=run["seed"])
            p = out / f"{name}_data_grid.csv"
            save_grid(g, p)
            written.append(p)
    return written


def generate(cfg: ExperimentConfig, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in build_domains(cfg.benchmark):
        p = out / f"{d.domain_id}.udimds"
        dom.save_dataset(d, p)
        paths.append(p)
    return paths


def worst_target(result: dict, which: str = "final") -> float:
    return min(result[f"{which}_accuracy"].values())


def sign_test_pvalue(wins: int, n: int) -> float:
    """One-sided exact sign test: P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n
