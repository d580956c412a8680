"""Constructed solutions over a decreasing lambda ladder.

Prints one JSON object per rung (scales, correction statistics, u(p1),
masses, timings) and, when asked, a Newton polish at one lambda.  The
closing line is the height-law fit over all rungs.

    python3 scripts/ladder.py configs/reference.cfg --rungs 0.14:256 0.1:512 0.05:1024
"""

import argparse
import json
import resource
import time

import numpy as np

from bubbling.oracle import height_law
from bubbling.pipeline import compute_green, construct, node_value, polish
from bubbling.problem import load_config


def rung(text):
    lam, n = text.split(":")
    return float(lam), int(n)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--rungs", nargs="+", type=rung, required=True, help="lambda:n pairs")
    ap.add_argument("--polish", type=float, default=None, help="lambda at which to run the Newton polish")
    args = ap.parse_args()

    cfg = load_config(args.config)
    green = compute_green(cfg)
    rows = []
    for lam, n in args.rungs:
        t0 = time.perf_counter()
        con = construct(cfg, lam=lam, n=n, green=green)
        row = con.summary()
        row.pop("c_history")
        row["u_p1"] = node_value(con.u, con.problem.points[0])
        row["seconds"] = time.perf_counter() - t0
        row["timings"] = con.timings
        if args.polish is not None and abs(lam - args.polish) < 1e-12:
            res = polish(con)
            row["polish"] = {"iterations": res.iterations, "moved": float(np.max(np.abs(res.u.values - con.u.values))),
                             "residual": res.residual}
        row["max_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
        print(json.dumps(row, default=float), flush=True)
        rows.append(row)
        del con
    if len(rows) >= 3:
        fit = height_law([r["lambda"] for r in rows], [r["u_p1"] for r in rows])
        print(json.dumps({"height_law": fit.as_dict()}))


if __name__ == "__main__":
    main()
