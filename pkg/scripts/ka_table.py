"""Exact K_A along the spine chain (linear solve) and successive ratios."""
from btwalk.law import load_reference, solve_kappa
from btwalk.spine import exact_KA

for key in "AB":
    law = load_reference(key)
    kap = solve_kappa(law).value
    prev = None
    print(f"ENV-{key} kappa={kap:.6f}")
    for A in (4, 8, 16, 32, 64, 128, 256, 512):
        k = exact_KA(law, A, kap)
        rel = "" if prev is None else f"  K_A/K_(A/2) - 1 = {k / prev - 1:+.3f}"
        print(f"  A={A:3d}  K_A={k:12.4f}{rel}")
        prev = k
