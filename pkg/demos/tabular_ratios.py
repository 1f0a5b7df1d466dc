"""Compare estimated deconfounding ratios with the exact ones on a small
tabular problem.

    python demos/tabular_ratios.py
"""
import numpy as np

from deconfounding_rl import tabular as T
from deconfounding_rl import weights as W


def main():
    cmdp = T.example_frontdoor_cmdp()
    ds = cmdp.sample(10_000, np.random.default_rng(0))
    print(f"{'kind':<16}{'mean est':>10}{'mean exact':>12}{'within 10%':>12}")
    for kind in ("full", "reward-only", "next-state-only"):
        bundle = W.fit_density_bundle(ds, kind, k=400, lambda_reg=0.001, bandwidths=(0.4, 0.3))
        est = W.estimate_weights(ds, bundle, clip=(0, np.inf)).raw
        exact = W.exact_ratio_oracle(cmdp, kind)(ds)
        close = np.mean(np.abs(est / exact - 1) < 0.1)
        print(f"{kind:<16}{est.mean():>10.3f}{exact.mean():>12.3f}{close:>12.2f}")


if __name__ == "__main__":
    main()
