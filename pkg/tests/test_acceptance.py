"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
terminal summary) or ``python tests/test_acceptance.py``.
"""
import time
import warnings

import numpy as np
import pytest

from robinhum.estimates import (carleman_batch, carleman_eval_backward, carleman_eval_forward, default_ensemble,
                                lambda_sweep, observability_backward, observability_forward,
                                observability_ratio_backward, observability_ratio_forward,
                                substitution_sources_backward, substitution_sources_forward)
from robinhum.grid import assemble_operators, build_grid, trace_inequality_gap
from robinhum.hum import (VARIANTS, HumConfig, LqProblem, compare_with_oracle, cost_report, solve_hum_backward,
                          solve_hum_forward)
from robinhum.noise import build_tree, cond_expect, ito_duality_residual, martingale_part
from robinhum.spde import (CFLWarning, CoefficientSet, ProblemInstance, duality_check, random_coefficients,
                           solve_backward, solve_forward)
from robinhum.weights import WeightFamily, build_psi, lambda_threshold

RESULTS = {}

G0, G1 = (0.25, 0.5), (0.3, 0.45)
HEAT_F = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B1=0.1, B2=0.1, beta=0.5)
HEAT_B = CoefficientSet(a=1.0, a1=1.0, a2=1.0, B=0.1, beta=0.5)
EPS = (1e-1, 1e-2, 1e-3)


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def _heat():
    return build_grid(64, G0, G1), build_tree(10, 1.0)


def _leaf_terminal(grid, tree, seed=0):
    rng = np.random.default_rng(seed)
    x, n = grid.nodes, 2 ** tree.L
    xi, eta = rng.standard_normal((n, 1)), rng.standard_normal((n, 1))
    return np.sin(np.pi * x) * (1 + 0.5 * xi) + 0.3 * eta * np.sin(2 * np.pi * x)


def test_c1_adjoint_consistency():
    t0 = time.perf_counter()
    g, tr = build_grid(16, G0, G1), build_tree(4, 1.0)
    rng = np.random.default_rng(2024)
    worst = max(duality_check(g, tr, random_coefficients(rng), rng)["max"] for _ in range(20))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-10 and dt < 10, f"max relative duality residual {worst:.2e} (<= 1e-10), {dt:.1f} s (< 10 s)")


def test_c2_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    g, tr = build_grid(4, G0, G1), build_tree(2, 4.0)
    c = CoefficientSet(a=lambda t, x: 1 + 0.3 * x, a1=0.5, a2=0.7, B1=0.2, B2=-0.3, B=0.25, beta=(0.5, 0.2))
    wf = WeightFamily(build_psi(g), 1.0, 1.0, 4.0)
    cfg = HumConfig(epsilon=0.05, cg_tol=1e-13, cg_max_iters=2000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CFLWarning)
        zb = solve_backward(ProblemInstance("general-backward", g, tr, c, rng.standard_normal((4, 4))))
        zf = solve_forward(ProblemInstance("general-forward", g, tr, c, rng.standard_normal(4)))
        out = []
        for v in VARIANTS:
            datum = rng.standard_normal(4) if v == "forward" else rng.standard_normal((4, 4))
            p = LqProblem(v, g, tr, c, datum=datum, eps=0.05, wf=wf, zdata=zb if v == "weighted-A" else zf)
            out.append(compare_with_oracle(p, cfg))
    diff = max(max(o["max_du"], o["max_dv"]) for o in out)
    res = max(o["oracle_residual"] for o in out)
    dt = time.perf_counter() - t0
    record(2, diff <= 1e-8 and res <= 1e-12 and dt < 30,
           f"max |CG - oracle| {diff:.2e} (<= 1e-8), oracle residual {res:.2e} (<= 1e-12), {dt:.1f} s")


def test_c3_null_control_decay():
    t0 = time.perf_counter()
    g, tr = _heat()
    y0 = np.sin(np.pi * g.nodes)
    runs = [solve_hum_forward(g, tr, y0, HEAT_F, HumConfig(epsilon=e, cg_tol=1e-12, cg_max_iters=5000))
            for e in EPS]
    ratios = [r.terminal_residual / r.datum_norm_sq for r in runs]
    ident = max(r.identity_error for r in runs)
    dt = time.perf_counter() - t0
    ok = ident <= 1e-8 and all(np.diff(ratios) < 0) and ratios[-1] <= 1e-3 and dt < 300
    record(3, ok, f"E|y(T)|^2/|y0|^2 = {', '.join(f'{v:.2e}' for v in ratios)}; identity error {ident:.1e}; "
                  f"{dt:.1f} s")


def test_c4_backward_null_control():
    t0 = time.perf_counter()
    g, tr = _heat()
    yT = _leaf_terminal(g, tr)
    runs = [solve_hum_backward(g, tr, yT, HEAT_B, HumConfig(epsilon=e, cg_tol=1e-12, cg_max_iters=5000))
            for e in EPS]
    W = g.quadrature_weights
    ratios = [float(np.sum(W * r.state.state[0][0] ** 2)) / r.datum_norm_sq for r in runs]
    dt = time.perf_counter() - t0
    ok = all(np.diff(ratios) < 0) and ratios[-1] <= 1e-3 and dt < 300
    record(4, ok, f"|y(0)|^2/|y_T|^2 = {', '.join(f'{v:.2e}' for v in ratios)}; {dt:.1f} s")


def _sweep(forward, values):
    g, tr = _heat()
    cfg = HumConfig(epsilon=1e-3, cg_tol=1e-8, cg_max_iters=5000)
    reps = []
    for a1 in values:
        if forward:
            c = HEAT_F.replace(a1=a1)
            r = solve_hum_forward(g, tr, np.sin(np.pi * g.nodes), c, cfg)
        else:
            c = HEAT_B.replace(a1=a1)
            r = solve_hum_backward(g, tr, _leaf_terminal(g, tr), c, cfg)
        reps.append(cost_report(r, c, tr.T, grid=g, times=tr.times))
    logs = np.array([r["log_ratio"] for r in reps])
    cf = np.array([r["C_fit"] for r in reps])
    mono = bool(np.all(np.diff(logs) >= 0))
    spread = cf.max() / cf.min() if np.all(cf > 0) else np.inf
    return mono, spread, logs, cf


def test_c5_cost_bound_structure():
    fm, fs, fl, fc = _sweep(True, (0.0, 1.0, 2.0, 4.0))
    bm, bs, bl, bc = _sweep(False, (0.0, 1.0, 2.0, 4.0))
    # informational: the same sweep with a1 <= 0, where the backward equation is not damped
    rm, rs, rl, rc = _sweep(False, (0.0, -1.0, -2.0, -4.0))
    print(f"  info: backward sweep a1 in (0,-1,-2,-4): log ratio {np.round(rl, 3)}, C_fit {np.round(rc, 3)}")
    ok_f = fm and fs < 5
    ok_b = bm and bs < 5
    record(5, ok_f and ok_b,
           f"forward (K): log ratio {np.round(fl, 3)} nondecreasing={fm}, C_fit spread {fs:.2f} (< 5); "
           f"backward (M): log ratio {np.round(bl, 3)} nondecreasing={bm}, C_fit {np.round(bc, 3)} spread {bs:.2f}")


def test_c6_carleman_two_sided():
    t0 = time.perf_counter()
    g, tr = build_grid(32, G0, G1), build_tree(8, 1.0)
    psi = build_psi(g)
    rng = np.random.default_rng(6)
    lines, ok = [], True
    for direction in ("backward", "forward"):
        c = HEAT_F if direction == "backward" else HEAT_B
        lt = lambda_threshold(c, tr.T, "forward-obs" if direction == "backward" else "backward-obs")
        lams = lambda_sweep(lt.value, 7, 4.0)
        wf = WeightFamily(psi, 1.0, lt.value, tr.T)
        reps = []
        for d in default_ensemble(g, tr, 20, rng, leaf=direction == "backward"):
            if direction == "backward":
                b = solve_backward(ProblemInstance("adjoint-backward", g, tr, c, d))
                reps.append(carleman_eval_backward(b, substitution_sources_backward(b, c), wf, lams))
            else:
                b = solve_forward(ProblemInstance("adjoint-forward", g, tr, c, d))
                reps.append(carleman_eval_forward(b, substitution_sources_forward(b, c), wf, lams))
        batch = carleman_batch(reps)
        bounded = all(np.all(r.lhs <= batch["C"] * r.rhs * (1 + 1e-12)) for r in reps)
        ok &= bounded and batch["variation"] < 3 and np.isfinite(batch["C"])
        lines.append(f"{direction}: C={batch['C']:.3f}, per-lambda variation {batch['variation']:.3f} (< 3)")
    dt = time.perf_counter() - t0
    record(6, ok and dt < 120, "; ".join(lines) + f"; {dt:.1f} s")


def test_c7_observability():
    g, tr = build_grid(32, G0, G1), build_tree(8, 1.0)
    ensF = default_ensemble(g, tr, 100, np.random.default_rng(70), leaf=True)
    ensB = default_ensemble(g, tr, 100, np.random.default_rng(71), leaf=False)
    fwd = [observability_forward(g, tr, ensF, HEAT_F.replace(a1=a)) for a in (0.0, 1.0, 4.0)]
    bwd = [observability_backward(g, tr, ensB, HEAT_B.replace(a2=a)) for a in (0.0, 1.0, 4.0)]
    finite = all(np.isfinite(r.max_ratio) for r in fwd + bwd)
    cf, cb = [r.C_obs for r in fwd], [r.C_obs for r in bwd]
    mono = bool(np.all(np.diff(cf) >= 0) and np.all(np.diff(cb) >= 0))
    scale = 0.0
    for c in (3.7, -0.01):
        b1 = solve_backward(ProblemInstance("adjoint-backward", g, tr, HEAT_F, ensF[0]))
        b2 = solve_backward(ProblemInstance("adjoint-backward", g, tr, HEAT_F, c * ensF[0]))
        scale = max(scale, abs(observability_ratio_forward(b2) / observability_ratio_forward(b1) - 1))
        f1 = solve_forward(ProblemInstance("adjoint-forward", g, tr, HEAT_B, ensB[0]))
        f2 = solve_forward(ProblemInstance("adjoint-forward", g, tr, HEAT_B, c * ensB[0]))
        scale = max(scale, abs(observability_ratio_backward(f2) / observability_ratio_backward(f1) - 1))
    record(7, finite and mono and scale <= 1e-13,
           f"C_obs forward |a1| in (0,1,4): {np.round(cf, 4)}; backward |a2| in (0,1,4): {np.round(cb, 4)}; "
           f"scaling error {scale:.1e}")


def test_c8_structural_zero_cases():
    g, tr = build_grid(16, G0, G1), build_tree(4, 1.0)
    c = CoefficientSet(a1=0.5, a2=0.4, B1=0.1, B2=0.2, B=0.1, beta=0.3)
    checks = {}
    y = solve_forward(ProblemInstance("forward-controlled", g, tr, c, np.zeros(16)))
    z = solve_backward(ProblemInstance("adjoint-backward", g, tr, c, np.zeros(16)))
    checks["zero data -> zero states"] = all(np.all(v == 0) for v in list(y.state) + list(z.state))
    r = solve_hum_forward(g, tr, np.zeros(16), c, HumConfig())
    rb = solve_hum_backward(g, tr, np.zeros(16), c, HumConfig())
    checks["zero data -> zero controls"] = r.cost == 0 and rb.cost == 0
    wf = WeightFamily(build_psi(g), 1.0, 3.0, 1.0)
    rep = carleman_eval_backward(z, substitution_sources_backward(z, c), wf, [3.0])
    checks["zero solution -> zero Carleman terms"] = rep.lhs[0] == 0 and rep.rhs[0] == 0
    checks["Neumann stiffness annihilates constants"] = bool(
        np.all(assemble_operators(g, CoefficientSet(), 0.5).apply_stiffness(np.ones(16)) == 0))
    zc = solve_backward(ProblemInstance("general-backward", g, tr, CoefficientSet(), np.ones(16)))
    checks["constants are equilibria"] = all(np.allclose(v, 1, rtol=1e-14, atol=0) for v in zc.state) and \
        all(np.all(Z == 0) for Z in zc.martingale)
    checks["Z of W is 1"] = all(np.allclose(martingale_part(tr, tr.increments(k), k), 1.0, rtol=1e-15)
                                for k in range(tr.L))
    checks["E of dW is 0"] = all(np.all(cond_expect(tr, tr.increments(k), k) == 0) for k in range(tr.L))
    rng = np.random.default_rng(8)
    ym = solve_forward(ProblemInstance("forward-controlled", g, tr, CoefficientSet(a=lambda t, x: 1 + x),
                                       rng.standard_normal(16)))
    W = g.quadrature_weights
    m0 = W @ ym.state[0][0]
    checks["mean conserved under Neumann"] = all(np.allclose(v @ W, m0, rtol=1e-13) for v in ym.state)
    yy = solve_forward(ProblemInstance("general-forward", g, tr, CoefficientSet(), np.zeros(16)))
    checks["zero pairing residual"] = ito_duality_residual(yy.state, zc.state, zc.martingale,
                                                           (yy.loads["g"], yy.loads["h"]), zc.loads["r"], W,
                                                           tr.dt) == 0
    bad = [k for k, v in checks.items() if not v]
    record(8, not bad, f"{len(checks) - len(bad)}/{len(checks)} zero cases exact" + (f"; failing: {bad}" if bad else ""))


def test_c9_scaling_invariance():
    g, tr = build_grid(32, G0, G1), build_tree(8, 1.0)
    rng = np.random.default_rng(9)
    lt = lambda_threshold(HEAT_F, 1.0)
    wf = WeightFamily(build_psi(g), 1.0, lt.value, 1.0)
    lams = lambda_sweep(lt.value)
    err = {"trace": 0.0, "carleman": 0.0, "observability": 0.0}
    for c in (3.7, -0.01, 1e5, -2.0):
        z = rng.standard_normal(32)
        err["trace"] = max(err["trace"], abs(trace_inequality_gap(g, c * z) / trace_inequality_gap(g, z) - 1))
        zT = rng.standard_normal((2 ** tr.L, 32))
        b1 = solve_backward(ProblemInstance("adjoint-backward", g, tr, HEAT_F, zT))
        b2 = solve_backward(ProblemInstance("adjoint-backward", g, tr, HEAT_F, c * zT))
        r1 = carleman_eval_backward(b1, substitution_sources_backward(b1, HEAT_F), wf, lams).ratio_per_lambda
        r2 = carleman_eval_backward(b2, substitution_sources_backward(b2, HEAT_F), wf, lams).ratio_per_lambda
        err["carleman"] = max(err["carleman"], float(np.max(np.abs(r2 / r1 - 1))))
        err["observability"] = max(err["observability"],
                                   abs(observability_ratio_forward(b2) / observability_ratio_forward(b1) - 1))
    worst = max(err.values())
    record(9, worst <= 1e-13, ", ".join(f"{k} {v:.1e}" for k, v in err.items()) + " (<= 1e-13)")


if __name__ == "__main__":
    warnings.simplefilter("ignore", CFLWarning)
    for name, fn in list(globals().items()):
        if name.startswith("test_c"):
            try:
                fn()
            except AssertionError:
                pass
    print(f"{sum(ok for ok, _ in RESULTS.values())}/{len(RESULTS)} criteria pass")
