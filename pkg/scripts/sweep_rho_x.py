"""Sweep the data-perturbation radius rho_x for UDIM-w/-SAM on rotated moons.

Shows the trade between source accuracy and worst-target accuracy; SAM
(rho_x irrelevant) is printed as the reference row.

    python3 scripts/sweep_rho_x.py --values 0.1,0.3,1.0 --seeds 0,1,2
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from udimlab import experiment as ex
from udimlab.analysis import estimate_inconsistency
from udimlab.udim import train

ROOT = Path(__file__).resolve().parents[1]


def evaluate(cfg, bench, method, seed):
    src = bench.source_train
    m, _ = train(cfg.model_spec(src.dim, src.n_classes), [src], cfg.udim, cfg.optim, cfg.run.iters, seed,
                 method=method, batch_size=cfg.run.batch_size)
    worst = min(m.accuracy(d.inputs, d.labels) for d in bench.targets)
    a = cfg.analysis
    incons = max(estimate_inconsistency(m, src, d, a.gamma, a.rho, a.samples, seed).value
                 for d in bench.targets)
    return worst, m.accuracy(bench.source_test.inputs, bench.source_test.labels), incons


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "sdg_moons.cfg"))
    p.add_argument("--values", default="0.1,0.3,1.0")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iters", type=int, default=None)
    args = p.parse_args()

    cfg = ex.load_config(args.config)
    if args.iters:
        cfg = replace(cfg, run=replace(cfg.run, iters=args.iters, eval_every=args.iters))
    seeds = [int(s) for s in args.seeds.split(",")]
    bench = ex.prepare_benchmark(cfg.benchmark)

    print(f"{'setting':<14} {'worst-acc':>9} {'src-acc':>8} {'incons':>8}")
    rows = [("sam", None)] + [("udim_sam", float(v)) for v in args.values.split(",")]
    for method, rho_x in rows:
        c = cfg if rho_x is None else replace(cfg, udim=replace(cfg.udim, rho_x=rho_x))
        res = np.array([evaluate(c, bench, method, s) for s in seeds])
        label = method if rho_x is None else f"rho_x={rho_x:g}"
        print(f"{label:<14} {res[:, 0].mean():>9.3f} {res[:, 1].mean():>8.3f} {res[:, 2].mean():>8.3f}")


if __name__ == "__main__":
    main()
