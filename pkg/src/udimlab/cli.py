"""Command line entry point: ``udimlab {gen,train,compare,analyze,selftest}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seeds=[args.seed]))
    cfg.validate()
    return cfg


def cmd_gen(args) -> int:
    cfg = _load(args)
    for p in ex.generate(cfg, args.out):
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    manifest = ex.run_experiment(cfg, args.out, threads=args.threads)
    print(Path(args.out) / "comparison.csv")
    print((Path(args.out) / "comparison.csv").read_text(), end="")
    return EXIT_OK if manifest["complete"] else EXIT_RUNTIME


def cmd_compare(args) -> int:
    paths = args.manifests or [args.out]
    dest = Path(args.out) / "comparison.csv" if Path(args.out).is_dir() else Path(args.out)
    text = ex.emit_comparison(paths, dest, which=args.which)
    print(text, end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    which = tuple(args.which.split(",")) if args.which else ex.ANALYSES
    for p in ex.emit_analysis(args.out, which):
        print(p)
    return EXIT_OK


def _selftests():
    from .domains import DomainDataset, loads_dataset, dumps_dataset, make_moons_domains
    from .nn_core import grad_params, mlp_init, per_sample_classifier_grads, loss
    from .optim import sam_epsilon
    from .toy import Quadratic

    rng = np.random.default_rng(0)

    def grad_fd():
        worst = 0.0
        for seed in range(20):
            m = mlp_init([3, 5, 3], "ce", seed)
            b = DomainDataset("t", rng.normal(size=(4, 3)), rng.integers(0, 3, 4), 3)
            g = grad_params(m, b)
            fd = np.zeros_like(g)
            for i in range(g.size):
                e = np.zeros_like(g)
                e[i] = 1e-5
                m.theta += e
                lp = loss(m, b)
                m.theta -= 2 * e
                lm = loss(m, b)
                m.theta += e
                fd[i] = (lp - lm) / 2e-5
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        return worst <= 1e-5, f"max rel err {worst:.2e}"

    def variance():
        m = mlp_init([2, 4, 2], "ce", 1)
        b = DomainDataset("t", rng.normal(size=(9, 2)), rng.integers(0, 2, 9), 2)
        gs = per_sample_classifier_grads(m, b)
        rows = [g - gs.samples[0] for g in gs.samples]
        mean = sum(rows) / len(rows)
        var = sum((r - mean) ** 2 for r in rows) / (len(rows) - 1)
        ok = np.array_equal(var, gs.variance) and np.allclose(gs.mean, grad_params(m, b, "classifier"),
                                                              atol=1e-10, rtol=0)
        return ok, "two-pass loop vs vectorized"

    def sam_argmax():
        q = Quadratic(np.diag([1.0, 10.0]), [1.0, 1.0])
        eps, _ = sam_epsilon(q.grad(), 0.1)
        t = np.linspace(0, 2 * np.pi, 3600, endpoint=False)
        best = max(0.5 * (1 + 0.1 * np.cos(a)) ** 2 + 5 * (1 + 0.1 * np.sin(a)) ** 2 for a in t)
        q.theta += eps
        return q.loss() >= 0.999 * best, f"{q.loss():.6f} vs {best:.6f}"

    def roundtrip():
        d = make_moons_domains(20, [0, 33], 0.1, 3)[1]
        back = loads_dataset(dumps_dataset(d))
        return (np.array_equal(back.inputs, d.inputs) and np.array_equal(back.labels, d.labels)
                and back.metadata == d.metadata), "dataset text round-trip"

    return [("gradient vs finite differences", grad_fd), ("gradient variance", variance),
            ("SAM closed-form ascent", sam_argmax), ("dataset round-trip", roundtrip)]


def cmd_selftest(args) -> int:
    failed = 0
    for name, check in _selftests():
        ok, detail = check()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udimlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment config (section.key = value lines)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override run.seeds with a single seed")
        sp.add_argument("--threads", type=int, default=1, help="parallel (method, seed) runs")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("gen", help="write benchmark datasets"))
    common(sub.add_parser("train", help="run an experiment from a config"))
    cp = sub.add_parser("compare", help="comparison table from one or more manifests")
    common(cp)
    cp.add_argument("manifests", nargs="*", help="manifest files or run directories")
    cp.add_argument("--which", choices=("selected", "final"), default="selected")
    ap = sub.add_parser("analyze", help="inconsistency curves and sharpness grids")
    common(ap)
    ap.add_argument("--which", help=f"comma-separated subset of {','.join(ex.ANALYSES)}")
    common(sub.add_parser("selftest", help="run built-in invariant checks"), out_required=False)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "compare": cmd_compare,
            "analyze": cmd_analyze, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
