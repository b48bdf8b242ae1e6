"""Two-sided Carleman check: lhs/rhs over a lambda sweep, both directions."""
import numpy as np

from robinhum.estimates import (carleman_batch, carleman_eval_backward, carleman_eval_forward, default_ensemble,
                                lambda_sweep, substitution_sources_backward, substitution_sources_forward)
from robinhum.grid import build_grid
from robinhum.noise import build_tree
from robinhum.spde import CoefficientSet, ProblemInstance, solve_backward, solve_forward
from robinhum.weights import WeightFamily, build_psi, lambda_threshold

g, tr = build_grid(32, (0.25, 0.5), (0.3, 0.45)), build_tree(8, 1.0)
c = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B1=0.1, B2=0.1, B=0.1, beta=0.5)
rng = np.random.default_rng(1)

for direction, which in (("backward", "forward-obs"), ("forward", "backward-obs")):
    lt = lambda_threshold(c, tr.T, which)
    lams = lambda_sweep(lt.value, 7, 4.0)
    wf = WeightFamily(build_psi(g), 1.0, lt.value, tr.T)
    reps = []
    for d in default_ensemble(g, tr, 20, rng, leaf=direction == "backward"):
        if direction == "backward":
            b = solve_backward(ProblemInstance("adjoint-backward", g, tr, c, d))
            reps.append(carleman_eval_backward(b, substitution_sources_backward(b, c), wf, lams, coeffs=c))
        else:
            b = solve_forward(ProblemInstance("adjoint-forward", g, tr, c, d))
            reps.append(carleman_eval_forward(b, substitution_sources_forward(b, c), wf, lams, coeffs=c))
    batch = carleman_batch(reps)
    print(f"{direction}: lambda threshold {lt.value:.3f}, C = {batch['C']:.4f}, variation {batch['variation']:.4f}")
    for lam, r in zip(batch["lambda_grid"], batch["per_lambda"]):
        print(f"  lambda {lam:9.3f}  max lhs/rhs {r:.4f}")
    worst = {k: max(float(np.max(rep.absorption[k])) for rep in reps) for k in reps[0].absorption}
    print("  absorption ratios:", ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
