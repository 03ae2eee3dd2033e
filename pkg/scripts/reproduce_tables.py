"""Run the Monte Carlo grids and write one CSV per table.

    python3 scripts/reproduce_tables.py --tables 1 2 --reps 2000 --outdir results/

Set STAGGER_THREADS to use several worker processes.
"""
import argparse
import itertools
import time
from pathlib import Path

from stagger.simlab import McDesign, results_csv, run_monte_carlo


def grid(table: int):
    if table == 1:
        for n, g in itertools.product((25, 50, 100), (0.0, 1.0, 5.0)):
            yield dict(table=1, n=n, gamma=g)
    elif table == 2:
        for n, g, tau in itertools.product((25, 50, 100), (0.0, 1.0, 5.0), (0.0, 0.25, 0.5)):
            yield dict(table=2, n=n, gamma=g, tau=tau)
    elif table == 3:
        for n, (k1, k2) in itertools.product((25, 50, 100), ((1.0, 0.0), (2.0, 0.0), (2.0, 2.0))):
            yield dict(table=3, n=n, gamma=5.0, k1=k1, k2=k2)
    elif table == 4:
        for n, (k1, k2) in itertools.product((25, 50, 100), ((1.0, 0.0), (2.0, 0.0), (2.0, 2.0))):
            yield dict(table=4, n=n, gamma=5.0, k1=k1, k2=k2)
    else:
        raise SystemExit(f"no table {table}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tables", type=int, nargs="+", default=[1, 2, 3, 4])
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--outdir", type=Path, default=Path("results"))
    args = ap.parse_args()
    args.outdir.mkdir(parents=True, exist_ok=True)
    for table in args.tables:
        results = []
        for k, cell in enumerate(grid(table)):
            t0 = time.perf_counter()
            res = run_monte_carlo(McDesign(replications=args.reps, base_seed=args.seed + 1000 * table + k, **cell))
            rates = "  ".join(f"{v} {r:6.2f}" for v, r in res.rejection_rate.items())
            print(f"table {table} {cell}: {rates}  ({time.perf_counter() - t0:.1f}s)", flush=True)
            results.append(res)
        path = args.outdir / f"table{table}.csv"
        path.write_text(results_csv(results))
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
