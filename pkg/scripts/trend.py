"""Labeled-only versus full unlabeled-data pruning on the synthetic task.

Usage: python3 scripts/trend.py [--seeds 0 1 2] [--rows all]
"""

import argparse
import logging
import time

from pudprune import experiments as E, trainer

ROWS = {"baseline": (False,) * 4, "distill": (True, False, False, False), "full": (True,) * 4}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rows", nargs="+", choices=[*ROWS, "grid"], default=["baseline", "full"],
                    help="'grid' runs every row of the ablation grid")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = E.TrendSetup(seeds=tuple(args.seeds))
    t0 = time.time()
    teacher = E.train_teacher(setup)
    print(f"teacher accuracy={teacher.accuracy:.4f} seconds={teacher.seconds:.0f}", flush=True)
    grid = trainer.ABLATION_GRID if "grid" in args.rows else [ROWS[r] for r in args.rows]
    for name, accs in E.ablation(teacher, setup, grid).items():
        print(f"{name} accuracies={','.join(f'{a:.4f}' for a in accs)} median={E.median(accs):.4f}")
    print(f"seconds={time.time() - t0:.0f}")


if __name__ == "__main__":
    main()
