"""Final ||Gamma||_1 for each L1 weight on the synthetic task."""

import argparse

from pudprune import experiments as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.001, 0.01, 0.1])
    ap.add_argument("--iterations", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    setup = E.SparsitySetup(lams=tuple(args.lams), iterations=args.iterations, seed=args.seed)
    for lam, l1 in E.sparsity_sweep(setup).items():
        print(f"lambda={lam:g} gamma_l1={l1:.6f}")


if __name__ == "__main__":
    main()
