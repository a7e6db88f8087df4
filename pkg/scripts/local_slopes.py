"""Local log-log slopes of the survival of max edge local time at tau_1.

Shows how far the tail is from its asymptotic slope at the sample sizes used
in the acceptance battery.  Usage: python scripts/local_slopes.py [num] [law ...]
"""
import sys

import numpy as np

from btwalk.law import load_reference, solve_kappa
from btwalk.stats import survival_curve
from btwalk.walk import annealed_excursions


def main(num=100_000, laws="AB"):
    for key in laws:
        law = load_reference(key)
        b = annealed_excursions(law, 1, num, seed=9)
        grid = np.unique(np.geomspace(2, b.max_lt.max(), 16).round())
        S, cnt = survival_curve(b.max_lt, grid, b.censored)
        ok = cnt >= 50
        g, s = grid[ok], S[ok]
        loc = np.diff(np.log(s)) / np.diff(np.log(g))
        print(f"ENV-{key} kappa={solve_kappa(law).value:.4f} censored={int(b.censored.sum())}")
        for x0, x1, v in zip(g[:-1], g[1:], loc):
            print(f"  x in [{x0:6.0f}, {x1:6.0f}]  slope {v:+.3f}")


if __name__ == "__main__":
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 100_000
    main(n, sys.argv[2:] or "AB")
