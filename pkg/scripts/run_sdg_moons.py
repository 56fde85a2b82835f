"""Train SAM and UDIM-w/-SAM on the rotated-moons benchmark and print the comparison.

    python3 scripts/run_sdg_moons.py --out runs/sdg_moons
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from udimlab import experiment as ex
from udimlab.analysis import load_grid

ROOT = Path(__file__).resolve().parents[1]


def final_inconsistency(out: Path, name: str) -> float:
    with open(out / "analysis" / f"{name}_inconsistency.csv") as fh:
        return float(list(csv.DictReader(fh))[-1]["max"])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "sdg_moons.cfg"))
    p.add_argument("--out", default="runs/sdg_moons")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    cfg = ex.load_config(args.config)
    out = Path(args.out)
    man = ex.run_experiment(cfg, out, threads=args.threads)
    ex.emit_analysis(out / "manifest.json")
    runs = {(r["method"], r["seed"]): r for r in man["runs"]}

    print((out / "comparison.csv").read_text())
    print(f"{'method':<10} {'seed':>4} {'worst-acc':>9} {'src-acc':>8} {'incons':>8} {'data-sharp':>10}")
    for mth in cfg.run.methods:
        for s in cfg.run.seeds:
            name = f"{mth}_seed{s}"
            r = runs[(mth, s)]
            sharp = load_grid(out / "analysis" / f"{name}_data_grid.csv").sharpness()
            print(f"{mth:<10} {s:>4} {ex.worst_target(r):>9.3f} {r['final_source_test_accuracy']:>8.3f} "
                  f"{final_inconsistency(out, name):>8.3f} {sharp:>10.3f}")

    if {"sam", "udim_sam"} <= set(cfg.run.methods):
        sam = np.array([ex.worst_target(runs[("sam", s)]) for s in cfg.run.seeds])
        udim = np.array([ex.worst_target(runs[("udim_sam", s)]) for s in cfg.run.seeds])
        wins = int(np.sum(udim > sam))
        print(f"\nworst-target accuracy: UDIM {udim.mean():.3f} vs SAM {sam.mean():.3f}, "
              f"wins {wins}/{len(sam)}, sign test p={ex.sign_test_pvalue(wins, len(sam)):.4f}")


if __name__ == "__main__":
    main()
