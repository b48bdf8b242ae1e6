"""Approximate null control of the forward and backward heat problems over an eps sweep."""
import numpy as np

from robinhum.grid import build_grid
from robinhum.hum import HumConfig, solve_hum_backward, solve_hum_forward
from robinhum.noise import build_tree
from robinhum.spde import CoefficientSet

g, tr = build_grid(64, (0.25, 0.5), (0.3, 0.45)), build_tree(10, 1.0)
cf = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B1=0.1, B2=0.1, beta=0.5)
cb = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B=0.1, beta=0.5)
y0 = np.sin(np.pi * g.nodes)
rng = np.random.default_rng(0)
n = 2 ** tr.L
yT = np.sin(np.pi * g.nodes) * (1 + 0.5 * rng.standard_normal((n, 1))) \
    + 0.3 * rng.standard_normal((n, 1)) * np.sin(2 * np.pi * g.nodes)
W = g.quadrature_weights

print(f"{'eps':>8} {'fwd E|y(T)|^2/|y0|^2':>22} {'cost':>10} {'iters':>6} {'bwd |y(0)|^2/|yT|^2':>21} {'cost':>10}")
for eps in (1e-1, 3e-2, 1e-2, 3e-3, 1e-3):
    cfg = HumConfig(epsilon=eps, cg_tol=1e-12, cg_max_iters=5000)
    f = solve_hum_forward(g, tr, y0, cf, cfg)
    b = solve_hum_backward(g, tr, yT, cb, cfg)
    rb = float(W @ b.state.state[0][0] ** 2) / b.datum_norm_sq
    print(f"{eps:8.0e} {f.terminal_residual / f.datum_norm_sq:22.3e} {f.cost:10.3e} {f.iterations:6d} "
          f"{rb:21.3e} {b.cost:10.3e}")
