"""Control cost against the coefficient-dependent bound as a1 varies."""
import numpy as np

from robinhum.grid import build_grid
from robinhum.hum import HumConfig, cost_report, solve_hum_backward, solve_hum_forward
from robinhum.noise import build_tree
from robinhum.spde import CoefficientSet

g, tr = build_grid(64, (0.25, 0.5), (0.3, 0.45)), build_tree(10, 1.0)
cf = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B1=0.1, B2=0.1, beta=0.5)
cb = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B=0.1, beta=0.5)
cfg = HumConfig(epsilon=1e-3, cg_tol=1e-8, cg_max_iters=5000)
y0 = np.sin(np.pi * g.nodes)
rng = np.random.default_rng(0)
n = 2 ** tr.L
yT = np.sin(np.pi * g.nodes) * (1 + 0.5 * rng.standard_normal((n, 1))) \
    + 0.3 * rng.standard_normal((n, 1)) * np.sin(2 * np.pi * g.nodes)

for a1 in (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0):
    f = cost_report(solve_hum_forward(g, tr, y0, cf.replace(a1=a1), cfg), cf.replace(a1=a1), tr.T,
                    grid=g, times=tr.times)
    b = cost_report(solve_hum_backward(g, tr, yT, cb.replace(a1=a1), cfg), cb.replace(a1=a1), tr.T,
                    grid=g, times=tr.times)
    print(f"a1={a1:+4.1f}  forward log ratio {f['log_ratio']:+.3f} C_fit {f['C_fit']:+.3f}   "
          f"backward log ratio {b['log_ratio']:+.3f} C_fit {b['C_fit']:+.3f}")
