"""Numerical evaluation of Carleman and observability inequalities.

All weighted integrals run over the interior time levels k = 1..L-1 with
weight dt (the weights vanish at t = 0 and t = T), trapezoid weights in x,
path averages over the tree, and weights applied as exp(log w + 2 log|f|).
Gradient terms use cell differences with weights at the cell midpoints, the
same differences that build the stiffness.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import SpatialGrid
from .noise import AdaptedField, NoiseTree
from .spde import CoefficientSet, ProblemInstance, SolutionBundle, SourceSpec, solve_backward, solve_forward
from .weights import WeightFamily, constant_K, constant_M, lambda_threshold

LHS_NAMES = ("weighted_z", "weighted_grad", "weighted_boundary")
RHS_NAMES_BACKWARD = ("local", "F1", "F2_boundary", "F", "Z")
RHS_NAMES_FORWARD = ("local", "F1", "F3_boundary", "F", "F2")


@dataclass(eq=False)
class CarlemanReport:
    """Both sides of a Carleman inequality on a grid of lambda values.

    ``lhs_terms`` and ``rhs_terms`` map term names to arrays over
    ``lambda_grid``. ``absorption`` holds the ratios of the lower-order terms
    to the leading terms when the report was built with coefficients.
    """

    lambda_grid: np.ndarray
    lhs_terms: dict
    rhs_terms: dict
    absorption: dict = field(default_factory=dict)

    @property
    def lhs(self) -> np.ndarray:
        return sum(self.lhs_terms.values())

    @property
    def rhs(self) -> np.ndarray:
        return sum(self.rhs_terms.values())

    @property
    def ratio_per_lambda(self) -> np.ndarray:
        rhs = self.rhs
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(rhs > 0, self.lhs / np.where(rhs > 0, rhs, 1.0), np.nan)


@dataclass(eq=False)
class ObservabilityReport:
    """Observability ratios over an ensemble and the fitted exponent."""

    direction: str
    ratios: np.ndarray
    K: float

    @property
    def size(self) -> int:
        return int(self.ratios.size)

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios))

    @property
    def C_obs(self) -> float:
        return float(np.log(self.max_ratio) / self.K)

    def summary(self) -> dict:
        """min/median/max of the per-sample constants log(ratio)/K."""
        c = np.log(self.ratios) / self.K
        return {"C_min": float(c.min()), "C_median": float(np.median(c)), "C_max": float(c.max())}


class BelowThreshold(UserWarning):
    pass


# --------------------------------------------------------------- helpers

def _wsq(logw: np.ndarray, f: np.ndarray, w) -> float:
    """Path average of sum_i w_i exp(logw_i) f_i^2 computed without overflow."""
    f = np.asarray(f, dtype=float)
    nz = f != 0
    with np.errstate(divide="ignore", under="ignore", over="ignore", invalid="ignore"):
        lf = 2.0 * np.log(np.abs(np.where(nz, f, 1.0)))
        val = np.where(nz, np.exp(logw + lf), 0.0)
    return float(np.mean(np.sum(w * val, axis=-1)))


def _level(src, k):
    return None if src is None else src[k]


def _carleman_terms(grid: SpatialGrid, tree: NoiseTree, z_levels, noise_levels, sources: SourceSpec,
                    wf: WeightFamily, lambda_grid, boundary_name: str, noise_name: str,
                    noise_from_sources: bool):
    W, x, mid, h, dt = grid.quadrature_weights, grid.nodes, grid.midpoints, grid.h, tree.dt
    xb = x[[0, -1]]
    chi = grid.chi0
    lams = np.atleast_1d(np.asarray(lambda_grid, dtype=float))
    lhs = {n: np.zeros(lams.size) for n in LHS_NAMES}
    rhs = {n: np.zeros(lams.size) for n in ("local", "F1", boundary_name, "F", noise_name)}
    sources = sources or SourceSpec()
    bsrc = sources.F2 if boundary_name == "F2_boundary" else sources.F3
    for j, lam in enumerate(lams):
        w = wf.with_lambda(lam)
        for k in range(1, tree.L):
            t = tree.times[k]
            z = z_levels[k]
            l3 = w.log_weight(t, x, 2, 3, 3)
            lhs["weighted_z"][j] += dt * _wsq(l3, z, W)
            lhs["weighted_grad"][j] += dt * _wsq(w.log_weight(t, mid, 2, 1, 1), np.diff(z, axis=-1) / h, h)
            lhs["weighted_boundary"][j] += dt * _wsq(w.log_weight(t, xb, 2, 2, 2), grid.traces(z), 1.0)
            rhs["local"][j] += dt * _wsq(l3, z, W * chi)
            F1 = _level(sources.F1, k)
            if F1 is not None:
                rhs["F1"][j] += dt * _wsq(w.log_weight(t, x, 2, 0, 0), F1, W)
            Fb = _level(bsrc, k)
            if Fb is not None:
                rhs[boundary_name][j] += dt * _wsq(w.log_weight(t, xb, 2, 1, 1), Fb, 1.0)
            l2 = w.log_weight(t, x, 2, 2, 2)
            F = _level(sources.F, k)
            if F is not None:
                rhs["F"][j] += dt * _wsq(l2, F, W)
            noise = _level(sources.F2, k) if noise_from_sources else _level(noise_levels, k)
            if noise is not None:
                rhs[noise_name][j] += dt * _wsq(l2, noise, W)
    return lams, lhs, rhs


def substitution_sources_backward(bundle: SolutionBundle, coeffs: CoefficientSet) -> SourceSpec:
    """Sources that recast the adjoint backward equation in general form.

    F1 = -a1 z - a2 Z, boundary F2 = -beta z, flux F = B1 z + B2 Z.
    """
    grid, tree, x = bundle.grid, bundle.tree, bundle.grid.nodes
    F1, F2, F = [], [], []
    for k in range(tree.L):
        t = tree.times[k]
        z, Z = bundle.state[k], bundle.martingale[k]
        F1.append(-coeffs.eval("a1", t, x) * z - coeffs.eval("a2", t, x) * Z)
        F2.append(-coeffs.beta_at(t) * grid.traces(z))
        F.append(coeffs.eval("B1", t, x) * z + coeffs.eval("B2", t, x) * Z)
    mk = lambda v: AdaptedField(tree, v, range(tree.L))
    return SourceSpec(F1=mk(F1), F2=mk(F2), F=mk(F))


def substitution_sources_forward(bundle: SolutionBundle, coeffs: CoefficientSet) -> SourceSpec:
    """Sources that recast the random parabolic adjoint in general form.

    F1 = -a1 z, noise F2 = -a2 z, boundary F3 = -beta z, flux F = B z.
    """
    grid, tree, x = bundle.grid, bundle.tree, bundle.grid.nodes
    F1, F2, F3, F = [], [], [], []
    for k in range(tree.L):
        t = tree.times[k]
        z = bundle.state[k]
        F1.append(-coeffs.eval("a1", t, x) * z)
        F2.append(-coeffs.eval("a2", t, x) * z)
        F3.append(-coeffs.beta_at(t) * grid.traces(z))
        F.append(coeffs.eval("B", t, x) * z)
    mk = lambda v: AdaptedField(tree, v, range(tree.L))
    return SourceSpec(F1=mk(F1), F2=mk(F2), F3=mk(F3), F=mk(F))


def _absorption_backward(bundle, coeffs, wf, lams):
    """Ratios of the absorbed lower-order terms to the leading terms.

    zero_order:  int th^2 |a1 z|^2 / (lam^3 int th^2 ph^3 z^2)       (bound 1/4)
    boundary:    lam int_S th^2 ph |beta z|^2 / (lam^2 int_S th^2 ph^2 z^2)  (bound 1/2)
    first_order: lam^2 int th^2 ph^2 |B1 z|^2 / (lam^3 int th^2 ph^3 z^2)  (bound 1/4)
    """
    grid, tree = bundle.grid, bundle.tree
    W, x, dt = grid.quadrature_weights, grid.nodes, tree.dt
    xb = x[[0, -1]]
    out = {n: np.zeros(lams.size) for n in ("zero_order", "boundary", "first_order")}
    for j, lam in enumerate(lams):
        w = wf.with_lambda(lam)
        num = dict.fromkeys(out, 0.0)
        den_z = den_b = 0.0
        for k in range(1, tree.L):
            t = tree.times[k]
            z = bundle.state[k]
            l3 = w.log_weight(t, x, 2, 3, 3)
            den_z += dt * _wsq(l3, z, W)
            den_b += dt * _wsq(w.log_weight(t, xb, 2, 2, 2), grid.traces(z), 1.0)
            num["zero_order"] += dt * _wsq(w.log_weight(t, x, 2, 0, 0), coeffs.eval("a1", t, x) * z, W)
            num["boundary"] += dt * _wsq(w.log_weight(t, xb, 2, 1, 1), coeffs.beta_at(t) * grid.traces(z), 1.0)
            Bn = coeffs.eval("B1", t, x) if bundle.martingale is not None else coeffs.eval("B", t, x)
            num["first_order"] += dt * _wsq(w.log_weight(t, x, 2, 2, 2), Bn * z, W)
            if bundle.martingale is None:
                num["first_order"] += dt * _wsq(w.log_weight(t, x, 2, 2, 2), coeffs.eval("a2", t, x) * z, W)
        for n in out:
            den = den_b if n == "boundary" else den_z
            out[n][j] = num[n] / den if den > 0 else 0.0
    return out


def _warn_below(lambda_grid, threshold):
    if threshold is not None and np.min(lambda_grid) < threshold:
        warnings.warn(f"lambda {np.min(lambda_grid):.4g} below threshold {threshold:.4g}", BelowThreshold)


def carleman_eval_backward(bundle: SolutionBundle, sources: SourceSpec, wf: WeightFamily, lambda_grid,
                          coeffs: CoefficientSet | None = None, threshold: float | None = None) -> CarlemanReport:
    """Evaluate both sides of the backward Carleman inequality.

    Left: lam^3 E int th^2 ph^3 z^2, lam E int th^2 ph |z'|^2, lam^2 E int_S th^2 ph^2 z^2.
    Right: lam^3 E int_Q0 th^2 ph^3 z^2, E int th^2 F1^2, lam E int_S th^2 ph F2^2,
    lam^2 E int th^2 ph^2 F^2, lam^2 E int th^2 ph^2 Z^2.
    With ``coeffs`` the report also carries the absorption ratios. A
    BelowThreshold warning is issued for lambdas under ``threshold``.
    """
    _warn_below(lambda_grid, threshold)
    lams, lhs, rhs = _carleman_terms(bundle.grid, bundle.tree, bundle.state, bundle.martingale, sources,
                                     wf, lambda_grid, "F2_boundary", "Z", noise_from_sources=False)
    rep = CarlemanReport(lams, lhs, rhs)
    if coeffs is not None:
        rep.absorption = _absorption_backward(bundle, coeffs, wf, lams)
    return rep


def carleman_eval_forward(bundle: SolutionBundle, sources: SourceSpec, wf: WeightFamily, lambda_grid,
                          coeffs: CoefficientSet | None = None, threshold: float | None = None) -> CarlemanReport:
    """Evaluate both sides of the forward Carleman inequality.

    Same left side; the right side has the boundary source F3 and the
    noise source F2 in place of F2 and Z.
    """
    _warn_below(lambda_grid, threshold)
    lams, lhs, rhs = _carleman_terms(bundle.grid, bundle.tree, bundle.state, None, sources,
                                     wf, lambda_grid, "F3_boundary", "F2", noise_from_sources=True)
    rep = CarlemanReport(lams, lhs, rhs)
    if coeffs is not None:
        rep.absorption = _absorption_backward(bundle, coeffs, wf, lams)
    return rep


def carleman_batch(reports) -> dict:
    """Batch constant over a list of reports sharing one lambda grid.

    ``C`` is the largest ratio over samples and lambdas, ``per_lambda`` the
    largest ratio at each lambda and ``variation`` its max/min over the grid.
    """
    R = np.array([r.ratio_per_lambda for r in reports])
    if R.size == 0:
        raise ValueError("no reports")
    per = np.nanmax(R, axis=0)
    flat = np.nanmax(R, axis=1)
    return {"lambda_grid": reports[0].lambda_grid, "per_lambda": per, "C": float(np.nanmax(per)),
            "variation": float(np.nanmax(per) / np.nanmin(per)),
            "C_min": float(np.nanmin(flat)), "C_median": float(np.nanmedian(flat)),
            "C_max": float(np.nanmax(flat))}


def lambda_sweep(lam_tilde: float, n: int = 7, span: float = 4.0) -> np.ndarray:
    """Geometric grid from lam_tilde to span * lam_tilde."""
    return lam_tilde * np.geomspace(1.0, span, n)


# --------------------------------------------------------- observability

def _time_trapezoid(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(0.5 * v[0] + v[1:-1].sum() + 0.5 * v[-1])


def observability_ratio_forward(bundle: SolutionBundle) -> float:
    """|z(0)|^2 / (E int_Q0 z^2 + E int_Q Z^2) for an adjoint backward solution.

    The z integral uses the trapezoid rule over levels 0..L; the Z integral
    sums dt E|Z_k|^2 over k = 0..L-1.
    """
    grid, tree = bundle.grid, bundle.tree
    W, dt, chi = grid.quadrature_weights, tree.dt, grid.chi0
    z0 = float(np.sum(W * bundle.state[0][0] ** 2))
    loc = dt * _time_trapezoid([np.mean(np.sum(W * chi * z * z, -1)) for z in bundle.state])
    zz = sum(dt * float(np.mean(np.sum(W * Z * Z, -1))) for Z in bundle.martingale)
    return z0 / (loc + zz)


def observability_ratio_backward(bundle: SolutionBundle) -> float:
    """E|z(T)|^2 / E int_Q0 z^2 for a random parabolic adjoint solution."""
    grid, tree = bundle.grid, bundle.tree
    W, dt, chi = grid.quadrature_weights, tree.dt, grid.chi0
    zT = float(np.mean(np.sum(W * bundle.state[tree.L] ** 2, -1)))
    loc = dt * _time_trapezoid([np.mean(np.sum(W * chi * z * z, -1)) for z in bundle.state])
    return zT / loc


def observability_forward(grid: SpatialGrid, tree: NoiseTree, ensemble, coeffs: CoefficientSet) -> ObservabilityReport:
    """Observability ratios of the adjoint backward equation over terminal data."""
    if len(ensemble) < 10:
        raise ValueError("ensemble needs at least 10 members")
    ratios = []
    for zT in ensemble:
        b = solve_backward(ProblemInstance("adjoint-backward", grid, tree, coeffs, zT))
        ratios.append(observability_ratio_forward(b))
    return ObservabilityReport("forward", np.array(ratios), constant_K(coeffs, tree.T, grid, tree.times))


def observability_backward(grid: SpatialGrid, tree: NoiseTree, ensemble, coeffs: CoefficientSet) -> ObservabilityReport:
    """Observability ratios of the random parabolic adjoint over initial data."""
    if len(ensemble) < 10:
        raise ValueError("ensemble needs at least 10 members")
    ratios = []
    for z0 in ensemble:
        b = solve_forward(ProblemInstance("adjoint-forward", grid, tree, coeffs, z0))
        ratios.append(observability_ratio_backward(b))
    return ObservabilityReport("backward", np.array(ratios), constant_M(coeffs, tree.T, grid, tree.times))


def default_ensemble(grid: SpatialGrid, tree: NoiseTree, n: int, rng: np.random.Generator,
                     leaf: bool = True) -> list:
    """Smooth, rough and G0-localized data in rotation.

    With ``leaf`` the data are leaf fields whose amplitude varies per leaf.
    """
    x = grid.nodes
    a, b = grid.g0
    out = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            modes = rng.standard_normal(4) / np.arange(1, 5)
            base = sum(m * np.cos(np.pi * j * x) for j, m in enumerate(modes))
        elif kind == 1:
            base = rng.standard_normal(grid.M)
        else:
            c, w = a + (b - a) * rng.uniform(0.3, 0.7), (b - a) / 4
            base = np.exp(-((x - c) / w) ** 2) * (1 + 0.1 * rng.standard_normal(grid.M))
        if leaf:
            amp = 1.0 + 0.5 * rng.standard_normal((2 ** tree.L, 1))
            pert = 0.2 * rng.standard_normal((2 ** tree.L, grid.M))
            out.append(base[None, :] * amp + pert)
        else:
            out.append(base)
    return out


def time_window_energy(bundle: SolutionBundle, window=None, wf: WeightFamily | None = None,
                       n_scan: int = 401) -> dict:
    """E int_window int_G z^2 by the trapezoid rule over the levels inside the window.

    The rule is exact for constant-in-time data when the window ends fall on
    time levels. With ``wf`` the report adds the scan of
    t -> min_x theta^2 phi^3 over the window and t -> max_x theta^2 phi^3
    over (0, T), with the times of the extreme values.
    """
    tree, grid = bundle.tree, bundle.grid
    T = tree.T
    a, b = window if window is not None else (T / 4, 3 * T / 4)
    times = tree.times
    tol = 1e-12 * T
    idx = [k for k in range(tree.L + 1) if a - tol <= times[k] <= b + tol]
    W = grid.quadrature_weights
    e = [float(np.mean(np.sum(W * bundle.state[k] ** 2, -1))) for k in idx]
    energy = tree.dt * _time_trapezoid(e) if len(e) > 1 else 0.0
    out = {"energy": energy, "levels": idx}
    if wf is not None:
        x = np.linspace(0.0, 1.0, 201)
        ts = np.linspace(a, b, n_scan)
        mins = [float(np.min(wf.log_weight(t, x, 2, 3))) for t in ts]
        full = np.linspace(0, T, n_scan + 2)[1:-1]
        maxs = [float(np.max(wf.log_weight(t, x, 2, 3))) for t in full]
        out.update(weight_min_time=float(ts[int(np.argmin(mins))]), log_weight_min=float(min(mins)),
                   weight_max_time=float(full[int(np.argmax(maxs))]), log_weight_max=float(max(maxs)))
    return out
