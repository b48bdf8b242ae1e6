"""Observability constants over coefficient magnitude sweeps."""
import numpy as np

from robinhum.estimates import default_ensemble, observability_backward, observability_forward
from robinhum.grid import build_grid
from robinhum.noise import build_tree
from robinhum.spde import CoefficientSet

g, tr = build_grid(32, (0.25, 0.5), (0.3, 0.45)), build_tree(8, 1.0)
base = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B1=0.1, B2=0.1, B=0.1, beta=0.5)
ensF = default_ensemble(g, tr, 100, np.random.default_rng(70), leaf=True)
ensB = default_ensemble(g, tr, 100, np.random.default_rng(71), leaf=False)

print("forward (terminal data, sweep a1)")
for a in (0.0, 0.5, 1.0, 2.0, 4.0):
    r = observability_forward(g, tr, ensF, base.replace(a1=a))
    print(f"  a1={a:4.1f}  C_obs={r.C_obs:+.4f}  max ratio {r.max_ratio:.4f}")
print("backward (initial data, sweep a2)")
for a in (0.0, 0.5, 1.0, 2.0, 4.0):
    r = observability_backward(g, tr, ensB, base.replace(a2=a))
    print(f"  a2={a:4.1f}  C_obs={r.C_obs:+.4f}  max ratio {r.max_ratio:.4f}")
