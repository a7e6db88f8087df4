"""KS distance between max/n (annealed trees, root type n) and M_e as n grows."""
import sys

from btwalk.env import default_barrier, sample_w_pair, EnvTree
from btwalk.law import load_reference
from btwalk.ltgw import sample_trees
from btwalk.stats import ks_two_sample
import numpy as np

key = sys.argv[1] if len(sys.argv) > 1 else "A"
num = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
law = load_reference(key)
env = EnvTree(law, 7, 0, max_nodes=2_000_000)
b = default_barrier(law)
M = []
for s in range(num):
    p, env, *_ = sample_w_pair(law, 7, s, b, env=env)
    if not p.censored:
        M.append(p.M_e)
M = np.array(M)
for n in (25, 50, 100, 200, 500):
    t = sample_trees(law, n, num, seed=n, full=True)
    print(f"ENV-{key} n={n:4d}  KS(max/n, M_e)={ks_two_sample(t.Mstar / n, M).value:.3f}  "
          f"censored={int(t.censored.sum())}")
