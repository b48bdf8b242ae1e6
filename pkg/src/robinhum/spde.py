"""Forward and backward stochastic parabolic solvers on the scenario tree.

Both sweeps share the step matrix S_{k+1} = W + dt K(t_{k+1}) (W lumped mass,
K Robin stiffness). The forward step is

    S y_{k+1}(n+-) = W y_k + dt g_k +- sqrt(dt) h_k

with drift load g_k and noise load h_k evaluated at t_k. The backward step is
its exact transpose:

    zbar_k = S^{-1} W E[z_{k+1}],  Z_k = S^{-1} W (martingale part of z_{k+1}),
    W z_k = W zbar_k + dt r_k,

where the load r_k may depend on (zbar_k, Z_k). With these definitions
E<z_L, y_L> - <z_0, y_0> = sum_k dt E[zbar_k.g_k + Z_k.h_k - r_k.y_k]
holds to rounding error, which makes every HUM Gramian exactly symmetric.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .grid import (SolverFailure, SpatialGrid, apply_D, apply_DT, assemble_operators,
                   gradient_matrix)
from .noise import AdaptedField, NoiseTree, cond_expect, ito_duality_terms, martingale_part

__all__ = ["CoefficientSet", "TableCoefficient", "SourceSpec", "ProblemInstance",
           "SolutionBundle", "solve_forward", "solve_backward", "energy_estimate",
           "SolverFailure", "CFLWarning", "FORWARD_KINDS", "BACKWARD_KINDS",
           "random_coefficients", "duality_check"]


class CFLWarning(UserWarning):
    """Advection-dominated step: dt |B|_inf / h > 1."""


FORWARD_KINDS = ("forward-controlled", "adjoint-forward", "general-forward",
                 "penalized-forward", "tracking-random")
BACKWARD_KINDS = ("backward-controlled", "adjoint-backward", "general-backward",
                  "penalized-adjoint", "tracking-backward")

_COEFF_NAMES = ("a", "a1", "a2", "B1", "B2", "B")


@dataclass(frozen=True, eq=False)
class TableCoefficient:
    """Coefficient sampled on a (t, x) grid, interpolated bilinearly."""

    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray

    def __call__(self, t, x):
        t = float(np.clip(t, self.times[0], self.times[-1]))
        j = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self.times) - 2)) \
            if len(self.times) > 1 else 0
        if len(self.times) == 1:
            row = self.values[0]
        else:
            t0, t1 = self.times[j], self.times[j + 1]
            s = (t - t0) / (t1 - t0)
            row = (1 - s) * self.values[j] + s * self.values[j + 1]
        return np.interp(np.asarray(x, dtype=float), self.xs, row)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients of the parabolic operators.

    Each of ``a, a1, a2, B1, B2, B`` is a float or a callable ``f(t, x)``.
    ``beta`` is a float, a pair (value at x=0, value at x=1), or a callable
    ``t -> pair``. ``c0`` is an optional ellipticity bound checked against
    ``a`` on the evaluation grid.
    """

    a: object = 1.0
    a1: object = 0.0
    a2: object = 0.0
    B1: object = 0.0
    B2: object = 0.0
    B: object = 0.0
    beta: object = 0.0
    c0: Optional[float] = None

    def eval(self, name: str, t: float, x) -> np.ndarray:
        f = getattr(self, name)
        x = np.asarray(x, dtype=float)
        if callable(f):
            return np.broadcast_to(np.asarray(f(t, x), dtype=float), x.shape)
        return np.full(x.shape, float(f))

    def beta_at(self, t: float) -> np.ndarray:
        b = self.beta(t) if callable(self.beta) else self.beta
        return np.broadcast_to(np.asarray(b, dtype=float), (2,)).copy()

    def is_zero(self, name: str) -> bool:
        f = getattr(self, name)
        return (not callable(f)) and float(f) == 0.0

    def replace(self, **kw) -> "CoefficientSet":
        return replace(self, **kw)

    def sup_norms(self, grid: SpatialGrid, times) -> dict:
        """Max absolute value of every coefficient over the (t, x) grid."""
        out = {}
        for name in _COEFF_NAMES:
            out[name] = max(float(np.max(np.abs(self.eval(name, t, grid.nodes)))) for t in times)
        out["beta"] = max(float(np.max(np.abs(self.beta_at(t)))) for t in times)
        return out

    def validate(self, grid: SpatialGrid, times) -> None:
        from .grid import EllipticityViolation
        amin = min(float(np.min(self.eval("a", t, grid.nodes))) for t in times)
        if amin <= 0:
            raise EllipticityViolation(f"min a = {amin} <= 0")
        if self.c0 is not None and amin < self.c0:
            raise EllipticityViolation(f"min a = {amin} below c0 = {self.c0}")


@dataclass(frozen=True, eq=False)
class SourceSpec:
    """Sources of the general adjoint equations.

    Backward kinds read F1 (interior), F (flux field) and F2 (boundary, last
    axis of length 2). Forward kinds read F1 (interior drift), F (flux field),
    F2 (interior noise source) and F3 (boundary). Each entry is an
    AdaptedField covering levels 0..L-1 or None.
    """

    F1: Optional[AdaptedField] = None
    F2: Optional[AdaptedField] = None
    F3: Optional[AdaptedField] = None
    F: Optional[AdaptedField] = None


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """One equation on a grid and tree.

    ``datum`` is y0 (shape (M,)) for forward kinds and the terminal value for
    backward kinds (shape (M,) or (2**L, M)). Controls ``u`` and ``v`` are
    AdaptedFields on levels 0..L-1; ``u`` is restricted to G0 by the solver.
    """

    kind: str
    grid: SpatialGrid
    tree: NoiseTree
    coeffs: CoefficientSet
    datum: np.ndarray
    sources: Optional[SourceSpec] = None
    u: Optional[AdaptedField] = None
    v: Optional[AdaptedField] = None


@dataclass(eq=False)
class SolutionBundle:
    """Output of a tree sweep.

    ``state`` covers levels 0..L. ``martingale`` (Z or Y) and ``pre_state``
    (the implicit part zbar of a backward step) cover levels 0..L-1; both are
    None for forward kinds. ``loads`` holds the load vectors used in each step
    (keys ``g``, ``h`` forward, ``r`` backward).
    """

    kind: str
    grid: SpatialGrid
    tree: NoiseTree
    state: AdaptedField
    martingale: Optional[AdaptedField]
    pre_state: Optional[AdaptedField]
    loads: dict
    traces: list = field(default_factory=list)
    energy: np.ndarray = None


# ---------------------------------------------------------------- sweeps

def _step_solvers(grid, tree, coeffs, robin):
    dt = tree.dt
    times = tree.times
    return [assemble_operators(grid, coeffs, times[k + 1], robin=robin).factor(dt)
            for k in range(tree.L)]


def forward_sweep(grid: SpatialGrid, tree: NoiseTree, y0, load: Callable, coeffs=None,
                  robin: bool = True, solvers=None):
    """Run the forward scheme.

    ``load(k, t_k, y_k)`` returns the pair (g_k, h_k) of load vectors, each of
    shape (2**k, M) or broadcastable to it.
    """
    W = grid.quadrature_weights
    dt, sdt = tree.dt, tree.sqrt_dt
    if solvers is None:
        solvers = _step_solvers(grid, tree, coeffs, robin)
    y = [np.broadcast_to(np.asarray(y0, dtype=float), (1, grid.M)).copy()]
    gs, hs = [], []
    for k in range(tree.L):
        yk = y[k]
        g, h = load(k, tree.times[k], yk)
        g = np.broadcast_to(g, yk.shape)
        h = np.broadcast_to(h, yk.shape)
        base = W * yk + dt * g
        rhs = np.empty((2 * yk.shape[0], grid.M))
        rhs[0::2] = base + sdt * h
        rhs[1::2] = base - sdt * h
        y.append(solvers[k].solve(rhs))
        gs.append(np.array(g))
        hs.append(np.array(h))
    return y, gs, hs


def backward_sweep(grid: SpatialGrid, tree: NoiseTree, zT, load: Callable, coeffs=None,
                   robin: bool = True, solvers=None):
    """Run the backward scheme (transpose of :func:`forward_sweep`).

    ``load(k, t_k, zbar_k, Z_k)`` returns r_k.
    """
    W = grid.quadrature_weights
    dt, L = tree.dt, tree.L
    if solvers is None:
        solvers = _step_solvers(grid, tree, coeffs, robin)
    z = [None] * (L + 1)
    zbar = [None] * L
    Zs = [None] * L
    rs = [None] * L
    z[L] = np.broadcast_to(np.asarray(zT, dtype=float), (2 ** L, grid.M)).copy()
    for k in range(L - 1, -1, -1):
        ce = cond_expect(tree, z[k + 1], k)
        mp = martingale_part(tree, z[k + 1], k)
        n = ce.shape[0]
        sol = solvers[k].solve(np.vstack([W * ce, W * mp]))
        zb, Zk = sol[:n], sol[n:]
        r = np.broadcast_to(load(k, tree.times[k], zb, Zk), zb.shape)
        zbar[k], Zs[k], rs[k] = zb, Zk, np.array(r)
        z[k] = zb + dt * r / W
    return z, zbar, Zs, rs


# ------------------------------------------------------- instance loads

def _level(field_: Optional[AdaptedField], k: int):
    return None if field_ is None else field_[k]


def _general_forward_load(grid, D, sources: Optional[SourceSpec], k):
    """g = W F1 - D^T W F + b(F3), h = W F2."""
    W = grid.quadrature_weights
    g = 0.0
    h = 0.0
    if sources is None:
        return g, h
    F1, F2, F3, F = (_level(s, k) for s in (sources.F1, sources.F2, sources.F3, sources.F))
    if F1 is not None:
        g = g + W * F1
    if F is not None:
        g = g - apply_DT(D, W * F)
    if F3 is not None:
        g = g + grid.boundary_load(F3)
    if F2 is not None:
        h = h + W * F2
    return g, h


def _general_backward_load(grid, D, sources: Optional[SourceSpec], k):
    """r = -W F1 + D^T W F + b(F2)."""
    W = grid.quadrature_weights
    r = 0.0
    if sources is None:
        return r
    F1, F2, F = (_level(s, k) for s in (sources.F1, sources.F2, sources.F))
    if F1 is not None:
        r = r - W * F1
    if F is not None:
        r = r + apply_DT(D, W * F)
    if F2 is not None:
        r = r + grid.boundary_load(F2)
    return r


def _cfl_check(grid, tree, coeffs):
    norms = coeffs.sup_norms(grid, tree.times)
    bmax = max(norms["B1"], norms["B2"], norms["B"])
    if tree.dt * bmax / grid.h > 1.0:
        warnings.warn(f"dt*|B|/h = {tree.dt * bmax / grid.h:.3g} > 1", CFLWarning, stacklevel=3)


def _controls_as_sources(p: ProblemInstance, base: Optional[SourceSpec]) -> Optional[SourceSpec]:
    """Fold chi_G0 u into F1 and v into the noise source F2."""
    if p.u is None and p.v is None:
        return base
    base = base or SourceSpec()
    chi = p.grid.chi0
    F1, F2 = base.F1, base.F2
    if p.u is not None:
        cu = p.u * chi
        F1 = cu if F1 is None else F1 + cu
    if p.v is not None:
        F2 = p.v if F2 is None else F2 + p.v
    return replace(base, F1=F1, F2=F2)


def solve_forward(p: ProblemInstance, solvers=None) -> SolutionBundle:
    """Solve a forward instance from its datum at t = 0.

    Supported kinds: ``forward-controlled`` (controls u, v),
    ``adjoint-forward`` (random parabolic adjoint of the backward system),
    ``general-forward``, ``penalized-forward`` and ``tracking-random``.
    The last three use the conormal (Neumann) form, with all lower-order
    terms carried by the sources.
    """
    if p.kind not in FORWARD_KINDS:
        raise ValueError(f"{p.kind!r} is not a forward kind")
    grid, tree, c = p.grid, p.tree, p.coeffs
    W = grid.quadrature_weights
    D = gradient_matrix(grid)
    robin = p.kind in ("forward-controlled", "adjoint-forward")
    _cfl_check(grid, tree, c)
    sources = p.sources
    if p.kind == "forward-controlled":
        sources = _controls_as_sources(p, sources)
    x = grid.nodes

    def load(k, t, yk):
        g, h = _general_forward_load(grid, D, sources, k)
        if p.kind == "forward-controlled":
            Dy = apply_D(D, yk)
            g = g + W * (c.eval("a1", t, x) * yk + c.eval("B1", t, x) * Dy)
            h = h + W * (c.eval("a2", t, x) * yk + c.eval("B2", t, x) * Dy)
        elif p.kind == "adjoint-forward":
            g = g - W * c.eval("a1", t, x) * yk - apply_DT(D, W * c.eval("B", t, x) * yk)
            h = h - W * c.eval("a2", t, x) * yk
        return g, h

    y, gs, hs = forward_sweep(grid, tree, p.datum, load, c, robin=robin, solvers=solvers)
    state = AdaptedField(tree, y)
    return SolutionBundle(kind=p.kind, grid=grid, tree=tree, state=state, martingale=None,
                          pre_state=None, loads={"g": gs, "h": hs},
                          traces=[grid.traces(v) for v in y],
                          energy=np.array([np.mean(grid.inner(v, v)) for v in y]))


def solve_backward(p: ProblemInstance, solvers=None) -> SolutionBundle:
    """Solve a backward instance from its datum at t = T.

    Supported kinds: ``adjoint-backward`` (adjoint of the forward system),
    ``backward-controlled`` (control u), ``general-backward``,
    ``penalized-adjoint`` and ``tracking-backward`` (conormal form).
    """
    if p.kind not in BACKWARD_KINDS:
        raise ValueError(f"{p.kind!r} is not a backward kind")
    grid, tree, c = p.grid, p.tree, p.coeffs
    W = grid.quadrature_weights
    D = gradient_matrix(grid)
    robin = p.kind in ("adjoint-backward", "backward-controlled")
    _cfl_check(grid, tree, c)
    sources = p.sources
    if p.kind == "backward-controlled":
        sources = _controls_as_sources(replace(p, v=None), sources)
    x = grid.nodes

    def load(k, t, zb, Zk):
        r = _general_backward_load(grid, D, sources, k)
        if p.kind == "adjoint-backward":
            B1 = c.eval("B1", t, x)
            B2 = c.eval("B2", t, x)
            r = (r + W * (c.eval("a1", t, x) * zb + c.eval("a2", t, x) * Zk)
                 + apply_DT(D, W * (B1 * zb + B2 * Zk)))
        elif p.kind == "backward-controlled":
            r = r - W * (c.eval("a1", t, x) * zb + c.eval("a2", t, x) * Zk
                         + c.eval("B", t, x) * apply_D(D, zb))
        return r

    z, zbar, Zs, rs = backward_sweep(grid, tree, p.datum, load, c, robin=robin, solvers=solvers)
    return SolutionBundle(kind=p.kind, grid=grid, tree=tree, state=AdaptedField(tree, z),
                          martingale=AdaptedField(tree, Zs), pre_state=AdaptedField(tree, zbar),
                          loads={"r": rs}, traces=[grid.traces(v) for v in z],
                          energy=np.array([np.mean(grid.inner(v, v)) for v in z]))


# ------------------------------------------------------ energy estimate

def energy_estimate(bundle: SolutionBundle, coeffs: CoefficientSet) -> dict:
    """Discrete energy balance and a fitted Gronwall constant.

    For a backward bundle each step splits exactly as

        E|z_{k+1}|^2 - E|z_k|^2 = 2 dt zbar.K zbar + dt^2 |W^-1 K zbar|^2
                                   + dt E|Z~_k|^2 - 2 dt zbar.r - dt^2 |W^-1 r|^2

    with Z~_k the martingale part of z_{k+1} and all norms weighted by W. The
    report lists these terms per level, the boundary part of the stiffness
    form, and the smallest C >= 0 such that

        |z_0|^2 <= exp(C r2 T) E|z_k|^2 + C |B2|^2 E int |Z|^2   for all k,

    where r2 collects the squared coefficient norms. Forward bundles get the
    per-level energies and the Gronwall exponent for E|z_L|^2 against E|z_k|^2.
    """
    grid, tree = bundle.grid, bundle.tree
    W = grid.quadrature_weights
    dt, T, L = tree.dt, tree.T, tree.L
    norms = coeffs.sup_norms(grid, tree.times)
    r2 = (1.0 + norms["a1"] + norms["a2"] ** 2 + norms["beta"] ** 2
          + norms["B1"] ** 2 + norms["B2"] ** 2 + norms["B"] ** 2)
    energy = np.array([float(np.mean(grid.inner(v, v))) for v in bundle.state])
    report = {"energy": energy, "r2": r2}
    if bundle.martingale is None:
        ratios = energy[-1] / np.where(energy > 0, energy, np.inf)
        logs = np.log(np.where(ratios > 0, ratios, 1.0))
        report["gronwall_C"] = float(max(0.0, np.max(logs) / (r2 * T))) if energy[-1] > 0 else 0.0
        return report
    robin = bundle.kind in ("adjoint-backward", "backward-controlled")
    diff, corr, mart, src, src2, bnd, resid = ([] for _ in range(7))
    for k in range(L):
        asm = assemble_operators(grid, coeffs, tree.times[k + 1], robin=robin)
        zb = bundle.pre_state[k]
        r = bundle.loads["r"][k]
        Kz = asm.apply_stiffness(zb)
        mp = martingale_part(tree, bundle.state[k + 1], k)
        terms = (2 * dt * np.mean(np.sum(zb * Kz, -1)),
                 dt * dt * np.mean(np.sum(Kz * Kz / W, -1)),
                 dt * np.mean(np.sum(W * mp * mp, -1)),
                 -2 * dt * np.mean(np.sum(zb * r, -1)),
                 -dt * dt * np.mean(np.sum(r * r / W, -1)))
        for lst, val in zip((diff, corr, mart, src, src2), terms):
            lst.append(float(val))
        if robin:
            b = np.array([asm.stiff_diag[0] + asm.stiff_off[0],
                          asm.stiff_diag[-1] + asm.stiff_off[-1]])
        else:
            b = np.zeros(2)
        bnd.append(float(dt * np.mean(b[0] * zb[:, 0] ** 2 + b[1] * zb[:, -1] ** 2)))
        resid.append(float(energy[k + 1] - energy[k] - sum(terms)))
    Z_int = float(sum(dt * np.mean(grid.inner(Zk, Zk)) for Zk in bundle.martingale))
    report.update(diffusion=np.array(diff), diffusion_correction=np.array(corr),
                  martingale=np.array(mart), source=np.array(src),
                  source_correction=np.array(src2), boundary=np.array(bnd),
                  identity_residual=np.array(resid), Z_integral=Z_int)
    z0 = energy[0]
    B2sq = norms["B2"] ** 2

    def ok(C):
        return all(z0 <= np.exp(C * r2 * T) * e + C * B2sq * Z_int + 1e-14 * max(z0, 1.0)
                   for e in energy)

    if ok(0.0):
        C = 0.0
    else:
        hi = 1.0
        while not ok(hi):
            hi *= 2.0
            if hi > 1e12:
                break
        lo = 0.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            lo, hi = (lo, mid) if ok(mid) else (mid, hi)
        C = hi
    report["gronwall_C"] = float(C)
    return report


# ------------------------------------------------------ duality checks

def random_coefficients(rng: np.random.Generator, bound: float = 1.0) -> CoefficientSet:
    """Smooth random coefficients with sup norms of order ``bound``; a >= 0.9."""
    p = rng.uniform(-1, 1, size=(8, 2))
    lin = lambda c: (lambda t, x: bound * (c[0] * np.sin(3 * x + t) + c[1] * x))
    a = lambda t, x, c=p[0]: 1.0 + 0.4 * c[0] ** 2 * np.cos(2 * x + t) ** 2 + 0.1 * c[1] * x
    return CoefficientSet(a=a,
                          a1=lin(p[1]), a2=lin(p[2]), B1=lin(p[3]), B2=lin(p[4]), B=lin(p[5]),
                          beta=tuple(bound * p[6]))


def _random_field(rng, tree, shape):
    lv = range(tree.L)
    return AdaptedField(tree, [rng.standard_normal((2 ** k,) + shape) for k in lv], lv)


def duality_check(grid: SpatialGrid, tree: NoiseTree, coeffs: CoefficientSet,
                  rng: np.random.Generator) -> dict:
    """Discrete product-rule residuals of three forward/backward pairs.

    Pairs: controlled forward with its adjoint, general forward with general
    backward under random sources, and the random parabolic adjoint with
    the controlled backward equation. Each entry is residual / largest term.
    """
    M, L = grid.M, tree.L
    W, dt = grid.quadrature_weights, tree.dt
    rf = lambda shape: _random_field(rng, tree, shape)
    leaf = lambda: rng.standard_normal((2 ** L, M))
    out = {}

    def rel(y, z):
        d = ito_duality_terms(y.state, z.state, z.martingale, (y.loads["g"], y.loads["h"]),
                              z.loads["r"], W, dt)
        return abs(d["residual"]) / d["scale"] if d["scale"] > 0 else 0.0

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CFLWarning)
        y = solve_forward(ProblemInstance("forward-controlled", grid, tree, coeffs, rng.standard_normal(M),
                                          u=rf((M,)), v=rf((M,))))
        z = solve_backward(ProblemInstance("adjoint-backward", grid, tree, coeffs, leaf()))
        out["controlled"] = rel(y, z)
        s = SourceSpec(F1=rf((M,)), F2=rf((M,)), F3=rf((2,)), F=rf((M,)))
        sb = SourceSpec(F1=rf((M,)), F2=rf((2,)), F=rf((M,)))
        y = solve_forward(ProblemInstance("general-forward", grid, tree, coeffs, rng.standard_normal(M), sources=s))
        z = solve_backward(ProblemInstance("general-backward", grid, tree, coeffs, leaf(), sources=sb))
        out["general"] = rel(y, z)
        y = solve_forward(ProblemInstance("adjoint-forward", grid, tree, coeffs, rng.standard_normal(M)))
        z = solve_backward(ProblemInstance("backward-controlled", grid, tree, coeffs, leaf(), u=rf((M,))))
        out["random-parabolic"] = rel(y, z)
    out["max"] = max(out.values())
    return out
