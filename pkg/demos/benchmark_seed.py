"""Run the desk-scale benchmark for one seed and print its report table.

    python3 demos/benchmark_seed.py [seed] [out_dir]

Takes about two minutes on one core. The same run from the command line:

    advret attack --config configs/benchmark.cfg --seed 1 --out runs/seed1
    advret report --config configs/benchmark.cfg --seed 1 --out runs/seed1
"""

import sys
import time
from pathlib import Path

from advret.experiment import load_config, run_experiment

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.cfg"


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
    out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("runs") / f"seed{seed}"
    config = load_config(CONFIG)
    config.seed = seed
    t0 = time.perf_counter()
    res = run_experiment(config, out)
    print(res.report)
    print(f"{time.perf_counter() - t0:.0f}s; logs and adversarial documents in {out}")


if __name__ == "__main__":
    main()
