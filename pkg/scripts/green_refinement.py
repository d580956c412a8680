"""Regular-part values and mass identity under grid refinement.

    python3 scripts/green_refinement.py configs/two_point.cfg --grids 64 128 256 512
"""

import argparse
import time

import numpy as np

from bubbling.pipeline import compute_green
from bubbling.problem import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--grids", nargs="+", type=int, default=[128, 256, 512])
    args = ap.parse_args()

    cfg = load_config(args.config)
    values = []
    print("n,seconds,mass_error," + ",".join(f"H{j}" for j in range(len(cfg.points))))
    for n in args.grids:
        t0 = time.perf_counter()
        gf = compute_green(cfg, n)
        values.append(np.asarray(gf.H_at_points))
        print(f"{n},{time.perf_counter() - t0:.1f},{gf.mass_error:.3e}," + ",".join(f"{v:.10f}" for v in values[-1]))
    if len(values) >= 3:
        gaps = np.abs(np.diff(values, axis=0))
        print("gap ratios:", (gaps[:-1] / gaps[1:]).round(3).tolist())


if __name__ == "__main__":
    main()
