#!/usr/bin/env python3
"""Relative-improvement study: backbone alone vs. backbone + each
committed searched cell, 3 seeds per configuration.

Writes runs/improvement/<config>_seed<k>/ and prints a summary table.
The cell configurations follow the frozen-backbone protocol: pretrain
the backbone, freeze it, then train the inserted cells.
"""

import json
import sys
import tempfile
from pathlib import Path

from attnsearch import cli, discovered

SEEDS = (0, 1, 2)
OUT_ROOT = Path("runs/improvement")

BACKBONE = ["--epochs", "45", "--lr", "0.2"]
CELL_PHASES = ["--pretrain-epochs", "45", "--pretrain-lr", "0.2",
               "--freeze-backbone", "--epochs", "45", "--lr", "0.03"]


def best_top1(run_dir: Path) -> float:
    summary = json.loads((run_dir / "summary.json").read_text())
    return summary["best_val_top1"]


def run_config(name: str, extra_args, cell_spec=None) -> list:
    scores = []
    for seed in SEEDS:
        out = OUT_ROOT / f"{name}_seed{seed}"
        args = ["train", "--seed", str(seed), "--out", str(out)]
        args += extra_args
        if cell_spec is not None:
            with tempfile.NamedTemporaryFile(
                    "w", suffix=".json", delete=False) as f:
                json.dump(cell_spec, f)
                cell_path = f.name
            args += ["--cell", cell_path]
        code = cli.main(args)
        if code != 0:
            raise SystemExit(f"{name} seed {seed} failed with exit {code}")
        scores.append(best_top1(out))
        print(f"  {name} seed {seed}: best val top-1 {scores[-1]:.4f}")
    return scores


def main() -> int:
    results = {}
    print("backbone only:")
    results["backbone"] = run_config("backbone", BACKBONE)
    print("backbone + differentiable-search cell:")
    results["diff_cell"] = run_config("diff_cell", CELL_PHASES,
                                      discovered.DIFF_CELL)
    print("backbone + bandit-search cell:")
    results["gpb_cell"] = run_config("gpb_cell", CELL_PHASES,
                                     discovered.GPB_CELL)
    print()
    bb_mean = sum(results["backbone"]) / len(SEEDS)
    for name, scores in results.items():
        mean = sum(scores) / len(scores)
        margin = (mean - bb_mean) * 100
        print(f"{name:10s} mean {mean:.4f} "
              f"({', '.join(f'{s:.4f}' for s in scores)})"
              + (f"  margin +{margin:.1f} pts" if name != "backbone"
                 else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
