"""Penalized HUM: dual conjugate gradients for null controls on the tree.

Every variant is the linear-quadratic problem

    min  1/2 sum_k dt E[|u_k|^2_{R_u} + |v_k|^2_{R_v}]
       + 1/2 sum_{k tracked} dt E|y_k|^2_q + 1/(2 eps) E|y_terminal|^2

subject to a tree scheme. Its dual variable xi lives on the tracked levels
plus the terminal level, and solves

    (Lam + diag(1/q, eps)) xi = -y_free,

where Lam maps xi to the observed state driven by the controls built from the
adjoint of xi. Discrete duality makes Lam symmetric positive semidefinite in
the inner product sum_k dt E<a_k, b_k>_W + E<a_T, b_T>_W. At the solution the
observed state is y = -diag(1/q, eps) xi; in particular y_terminal = -eps xi_T.

Variants
--------
forward     controlled forward equation with Robin conditions, controls (u, v),
            terminal level L, no tracked levels.
backward    controlled backward equation, control u, terminal level 0.
weighted-A  forward conormal system driven by a weighted source of a backward
            solution z, Carleman-weighted costs, tracked levels 1..L-1.
weighted-B  backward conormal system driven by a forward solution z, tracking
            the implicit part ybar on levels 1..L-1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .grid import SpatialGrid, apply_D, assemble_operators, gradient_matrix
from .noise import AdaptedField, NoiseTree
from .spde import (CoefficientSet, ProblemInstance, SolutionBundle, SourceSpec, _step_solvers,
                   solve_backward, solve_forward)
from .weights import LOG_OVERFLOW, WeightFamily, WeightOverflow, constant_K, constant_M

VARIANTS = ("forward", "backward", "weighted-A", "weighted-B")


class CgStalled(RuntimeError):
    """CG hit its iteration cap; ``history`` holds the residual norms."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class OracleTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class HumConfig:
    epsilon: float = 1e-2
    cg_tol: float = 1e-8
    cg_max_iters: int = 500
    weighted: Optional[WeightFamily] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if int(self.cg_max_iters) < 1:
            raise ValueError("cg_max_iters must be >= 1")


@dataclass
class CgInfo:
    iterations: int
    converged: bool
    residuals: list
    functional: list


def conjugate_gradient(apply: Callable, b: np.ndarray, weights: np.ndarray,
                       precond: Optional[np.ndarray] = None, tol: float = 1e-8,
                       maxiter: int = 500, raise_on_stall: bool = True):
    """Preconditioned CG for an operator symmetric in <a, b> = sum(weights a b).

    ``precond`` is a diagonal applied as z = precond * r. The stopping test is
    sqrt(<r, P r>) <= tol sqrt(<b, P b>). Returns (x, CgInfo); ``functional``
    records 1/2 <x, A x> - <b, x>, which CG never increases.
    """
    P = np.ones_like(b) if precond is None else precond
    ip = lambda a, c: float(np.dot(weights * a, c))
    x = np.zeros_like(b)
    r = b.copy()
    z = P * r
    rz = ip(r, z)
    bnorm = np.sqrt(rz)
    res = [1.0 if bnorm > 0 else 0.0]
    fun = [0.0]
    if bnorm == 0.0:
        return x, CgInfo(0, True, res, fun)
    p = z.copy()
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        pAp = ip(p, Ap)
        if pAp <= 0:
            raise CgStalled(f"operator not positive definite (pAp={pAp:.3e})", res)
        a = rz / pAp
        x += a * p
        r -= a * Ap
        z = P * r
        rz_new = ip(r, z)
        res.append(np.sqrt(max(rz_new, 0.0)) / bnorm)
        fun.append(-0.5 * (ip(x, b) + ip(x, r)))
        if res[-1] <= tol:
            return x, CgInfo(it, True, res, fun)
        p = z + (rz_new / rz) * p
        rz = rz_new
    if raise_on_stall:
        raise CgStalled(f"CG did not reach tol={tol} in {maxiter} iterations "
                        f"(last residual {res[-1]:.3e})", res)
    return x, CgInfo(maxiter, False, res, fun)


@dataclass(eq=False)
class HumResult:
    """Controls and diagnostics of one penalized HUM solve.

    ``u`` and ``v`` cover levels 0..L-1 (``v`` is None for backward kinds).
    ``dual`` is the terminal block of the dual optimum (leaf field for the
    forward problem, grid field for the backward problem); ``dual_tracked``
    holds the tracked blocks of the weighted variants.
    """

    variant: str
    u: AdaptedField
    v: Optional[AdaptedField]
    dual: np.ndarray
    dual_tracked: dict
    state: SolutionBundle
    terminal_residual: float
    u_norm_sq: float
    v_norm_sq: float
    datum_norm_sq: float
    iterations: int
    cg: CgInfo
    identity_error: float
    cost_bound: Optional[float] = None
    weighted_norms: Optional[dict] = None

    @property
    def cost(self) -> float:
        return self.u_norm_sq + self.v_norm_sq


# ----------------------------------------------------------- problem data

def _exp_checked(logw: np.ndarray, what: str) -> np.ndarray:
    if np.any(logw > LOG_OVERFLOW):
        raise WeightOverflow(f"{what}: log-weight {np.max(logw):.1f} exceeds {LOG_OVERFLOW}")
    with np.errstate(under="ignore"):
        return np.exp(logw)


class LqProblem:
    """Discrete data shared by the CG solver and the dense oracle.

    Parameters
    ----------
    variant : str
        One of ``VARIANTS``.
    grid, tree, coeffs
        Discretization and coefficients. Weighted variants read only ``a``.
    datum : ndarray
        y0 (forward), y_T (backward; grid or leaf field); ignored by the
        weighted variants, which start from zero.
    eps : float
        Terminal penalty.
    wf : WeightFamily, optional
        Weights with lambda set; the regularization uses ``eps``.
    zdata : SolutionBundle, optional
        Solution whose weighted values drive the weighted systems.
    """

    def __init__(self, variant: str, grid: SpatialGrid, tree: NoiseTree, coeffs: CoefficientSet,
                 datum=None, eps: float = 1e-2, wf: Optional[WeightFamily] = None,
                 zdata: Optional[SolutionBundle] = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant, self.grid, self.tree, self.coeffs, self.eps = variant, grid, tree, coeffs, eps
        self.forward = variant in ("forward", "weighted-A")
        self.weighted = variant.startswith("weighted")
        L, M = tree.L, grid.M
        self.robin = not self.weighted
        self.solvers = _step_solvers(grid, tree, coeffs, self.robin)
        self.chi = grid.chi0
        times = tree.times
        if self.weighted:
            if wf is None or zdata is None:
                raise ValueError("weighted variants need a WeightFamily and z data")
            self.wf = wf.with_epsilon(eps)
            self.tracked = list(range(1, L))
            x = grid.nodes
            self.su2 = [_exp_checked(self.wf.log_weight(t, x, 2, 3, 3), "R_u^-1") for t in times[:L]]
            self.sv2 = [_exp_checked(self.wf.log_weight(t, x, 2, 2, 2), "R_v^-1") for t in times[:L]]
            self.logq = {}
            Wb = grid.quadrature_weights[[0, -1]]
            for k in self.tracked:
                lq = -2.0 * self.wf.log_theta(times[k], x, regularized=True)
                bnd = lq[[0, -1]] - np.log(self.wf.lam) - self.wf.log_phi(times[k], x[[0, -1]]) - np.log(Wb)
                lq[[0, -1]] = np.logaddexp(lq[[0, -1]], bnd)
                _exp_checked(lq, "tracking weight")
                self.logq[k] = lq
            self._build_sources(zdata)
            self.datum = np.zeros(M) if self.forward else np.zeros((2 ** L, M))
        else:
            self.wf = wf
            self.tracked = []
            self.su2 = [np.ones(M)] * L
            self.sv2 = [np.ones(M)] * L
            self.logq = {}
            self.src = None
            d = np.asarray(datum, dtype=float)
            self.datum = d if self.forward else np.broadcast_to(d, (2 ** L, M)).copy()
        self.terminal_level = L if self.forward else 0
        # dual layout: tracked blocks in level order, then the terminal block
        self.blocks = [(k, 2 ** k) for k in self.tracked] + [(self.terminal_level, 2 ** self.terminal_level)]
        W = grid.quadrature_weights
        wts, pre, diag = [], [], []
        for k, n in self.blocks[:-1]:
            wts.append(np.tile(tree.dt * W / n, n))
            q = np.exp(self.logq[k])
            pre.append(np.tile(q, n))
            diag.append(np.tile(np.exp(-self.logq[k]), n))
        n = self.blocks[-1][1]
        wts.append(np.tile(W / n, n))
        pre.append(np.ones(n * M))
        diag.append(np.full(n * M, eps))
        self.inner_weights = np.concatenate(wts)
        self.precond = np.concatenate(pre)
        self.shift = np.concatenate(diag)

    # sources of the weighted systems
    def _build_sources(self, zdata: SolutionBundle):
        grid, tree, wf = self.grid, self.tree, self.wf
        x = grid.nodes
        F1, Fb = [], []
        for k in range(tree.L):
            t = tree.times[k]
            z = zdata.state[k]
            w3 = _exp_checked(wf.log_weight(t, x, 2, 3, 3), "source weight")
            w2 = _exp_checked(wf.log_weight(t, x, 2, 2, 2), "source weight")
            F1.append(w3 * z)
            Fb.append(grid.traces(w2 * z))
        sign = 1.0 if self.forward else -1.0
        self.src_F1 = F1
        self.src_Fb = [sign * f for f in Fb]

    # packing
    def pack(self, blocks: dict) -> np.ndarray:
        return np.concatenate([np.asarray(blocks[k]).reshape(-1) for k, _ in self.blocks])

    def unpack(self, vec: np.ndarray) -> dict:
        out, i, M = {}, 0, self.grid.M
        for k, n in self.blocks:
            out[k] = vec[i:i + n * M].reshape(n, M)
            i += n * M
        return out

    # state and adjoint solves
    def _fields(self, arrs):
        return AdaptedField(self.tree, arrs, range(self.tree.L))

    def solve_state(self, u, v, with_data: bool) -> SolutionBundle:
        g, tr, c = self.grid, self.tree, self.coeffs
        u = [self.chi * uk for uk in u]
        if self.variant == "forward":
            datum = self.datum if with_data else np.zeros(g.M)
            return solve_forward(ProblemInstance("forward-controlled", g, tr, c, datum,
                                                 u=self._fields(u), v=self._fields(v)),
                                 solvers=self.solvers)
        if self.variant == "backward":
            datum = self.datum if with_data else np.zeros_like(self.datum)
            return solve_backward(ProblemInstance("backward-controlled", g, tr, c, datum,
                                                  u=self._fields(u)), solvers=self.solvers)
        F1 = [uk + (s if with_data else 0.0) for uk, s in zip(u, self.src_F1)]
        Fb = self._fields(self.src_Fb) if with_data else None
        if self.variant == "weighted-A":
            src = SourceSpec(F1=self._fields(F1), F2=self._fields(v), F3=Fb)
            return solve_forward(ProblemInstance("penalized-forward", g, tr, c, self.datum, sources=src),
                                 solvers=self.solvers)
        src = SourceSpec(F1=self._fields(F1), F2=Fb)
        return solve_backward(ProblemInstance("tracking-backward", g, tr, c, self.datum, sources=src),
                              solvers=self.solvers)

    def observe(self, bundle: SolutionBundle) -> dict:
        obs = {}
        for k in self.tracked:
            obs[k] = bundle.state[k] if self.forward else bundle.pre_state[k]
        obs[self.terminal_level] = bundle.state[self.terminal_level]
        return obs

    def solve_adjoint(self, xi: dict) -> SolutionBundle:
        g, tr, c, L = self.grid, self.tree, self.coeffs, self.tree.L
        if self.variant == "forward":
            return solve_backward(ProblemInstance("adjoint-backward", g, tr, c, xi[L]), solvers=self.solvers)
        if self.variant == "backward":
            return solve_forward(ProblemInstance("adjoint-forward", g, tr, c, xi[0][0]), solvers=self.solvers)
        # tracked blocks enter as interior sources; the sign keeps the Gramian positive
        sign = -1.0 if self.variant == "weighted-A" else 1.0
        F1 = [sign * xi[k] if k in self.tracked else np.zeros((2 ** k, g.M)) for k in range(L)]
        src = SourceSpec(F1=self._fields(F1))
        if self.variant == "weighted-A":
            return solve_backward(ProblemInstance("penalized-adjoint", g, tr, c, xi[L], sources=src),
                                  solvers=self.solvers)
        return solve_forward(ProblemInstance("tracking-random", g, tr, c, xi[0][0], sources=src),
                             solvers=self.solvers)

    def controls(self, adj: SolutionBundle):
        L = self.tree.L
        if self.forward:
            u = [self.chi * self.su2[k] * adj.pre_state[k] for k in range(L)]
            v = [self.sv2[k] * adj.martingale[k] for k in range(L)]
            return u, v
        u = [-self.chi * self.su2[k] * adj.state[k] for k in range(L)]
        return u, None

    def gramian(self, vec: np.ndarray) -> np.ndarray:
        adj = self.solve_adjoint(self.unpack(vec))
        u, v = self.controls(adj)
        if v is None:
            v = [np.zeros_like(uk) for uk in u]
        return self.pack(self.observe(self.solve_state(u, v, with_data=False)))

    def free_observation(self) -> np.ndarray:
        zeros = [np.zeros((2 ** k, self.grid.M)) for k in range(self.tree.L)]
        return self.pack(self.observe(self.solve_state(zeros, zeros, with_data=True)))

    def control_norms(self, u, v) -> tuple:
        W, dt = self.grid.quadrature_weights, self.tree.dt
        nu = sum(dt * float(np.mean(np.sum(W * uk * uk, -1))) for uk in u)
        nv = 0.0 if v is None else sum(dt * float(np.mean(np.sum(W * vk * vk, -1))) for vk in v)
        return nu, nv


# ------------------------------------------------------------ the solves

def _solve(prob: LqProblem, cfg: HumConfig) -> HumResult:
    b = -prob.free_observation()
    x, info = conjugate_gradient(lambda p: prob.gramian(p) + prob.shift * p, b, prob.inner_weights,
                                 precond=prob.precond if prob.weighted else None,
                                 tol=cfg.cg_tol, maxiter=cfg.cg_max_iters)
    xi = prob.unpack(x)
    adj = prob.solve_adjoint(xi)
    u, v = prob.controls(adj)
    vv = v if v is not None else [np.zeros_like(uk) for uk in u]
    state = prob.solve_state(u, vv, with_data=True)
    W = prob.grid.quadrature_weights
    term = state.state[prob.terminal_level]
    terminal_residual = float(np.mean(np.sum(W * term * term, -1)))
    dual = xi[prob.terminal_level]
    dual_sq = float(np.mean(np.sum(W * dual * dual, -1)))
    ref = max(terminal_residual, cfg.epsilon ** 2 * dual_sq)
    ident = abs(terminal_residual - cfg.epsilon ** 2 * dual_sq) / ref if ref > 0 else 0.0
    nu, nv = prob.control_norms(u, v)
    d = prob.datum
    datum_sq = float(np.mean(np.sum(W * np.atleast_2d(d) ** 2, -1)))
    return HumResult(variant=prob.variant, u=AdaptedField(prob.tree, u, range(prob.tree.L)),
                     v=None if v is None else AdaptedField(prob.tree, v, range(prob.tree.L)),
                     dual=dual if prob.forward else dual[0],
                     dual_tracked={k: xi[k] for k in prob.tracked}, state=state,
                     terminal_residual=terminal_residual, u_norm_sq=nu, v_norm_sq=nv,
                     datum_norm_sq=datum_sq, iterations=info.iterations, cg=info,
                     identity_error=ident)


def gramian_apply_forward(grid, tree, zT, coeffs, eps: float = 1.0) -> np.ndarray:
    """Forward Gramian applied to a leaf field z_T.

    Solves the adjoint backward equation from z_T and returns the terminal
    state y(T) of the forward equation from y(0) = 0 driven by u = chi zbar,
    v = Z. Equivalently -y(T) for the controls u = -chi zbar, v = -Z.
    """
    prob = LqProblem("forward", grid, tree, coeffs, np.zeros(grid.M), eps)
    zT = np.broadcast_to(np.asarray(zT, dtype=float), (2 ** tree.L, grid.M))
    return prob.gramian(zT.reshape(-1)).reshape(2 ** tree.L, grid.M)


def gramian_apply_backward(grid, tree, z0, coeffs, eps: float = 1.0) -> np.ndarray:
    """Backward Gramian: z0 -> y(0) with u = -chi z from the random adjoint."""
    prob = LqProblem("backward", grid, tree, coeffs, np.zeros(grid.M), eps)
    return prob.gramian(np.asarray(z0, dtype=float).reshape(-1))


def solve_hum_forward(grid: SpatialGrid, tree: NoiseTree, y0, coeffs: CoefficientSet,
                      cfg: HumConfig, C_cal: Optional[float] = None) -> HumResult:
    """Penalized null control of the forward equation from y0.

    The dual optimum ``dual`` equals -y(T)/eps; the controls are
    u = chi zbar and v = Z for the adjoint solution from ``dual``.
    """
    prob = LqProblem("forward", grid, tree, coeffs, y0, cfg.epsilon)
    res = _solve(prob, cfg)
    if C_cal is not None:
        res.cost_bound = float(np.exp(C_cal * constant_K(coeffs, tree.T, grid, tree.times)))
    return res


def solve_hum_backward(grid: SpatialGrid, tree: NoiseTree, yT, coeffs: CoefficientSet,
                       cfg: HumConfig, C_cal: Optional[float] = None) -> HumResult:
    """Penalized null control of the backward equation from y_T (grid or leaf field).

    The dual optimum is deterministic, z0 = -y(0)/eps, and u = -chi z for the
    random adjoint started at z0.
    """
    prob = LqProblem("backward", grid, tree, coeffs, yT, cfg.epsilon)
    res = _solve(prob, cfg)
    if C_cal is not None:
        res.cost_bound = float(np.exp(C_cal * constant_M(coeffs, tree.T, grid, tree.times)))
    return res


def _weighted_norms(prob: LqProblem, res: HumResult, zdata: SolutionBundle) -> dict:
    """Weighted norms of (u, y, y on Gamma, grad y, v or Y) and the data side.

    Quadrature over interior levels 1..L-1 with weight dt, unregularized
    weights, trapezoid in x, gradients as cell differences with weights at
    cell midpoints.
    """
    grid, tree, wf = prob.grid, prob.tree, prob.wf
    W, x, mid, dt, h = grid.quadrature_weights, grid.nodes, grid.midpoints, tree.dt, grid.h
    bundle = res.state
    sec = res.v if prob.forward else bundle.martingale

    def wsum(logw, f, w):
        f = np.asarray(f)
        with np.errstate(divide="ignore", under="ignore"):
            lf = np.where(f != 0, 2.0 * np.log(np.abs(np.where(f != 0, f, 1.0))), -np.inf)
            val = np.where(f != 0, np.exp(logw + lf), 0.0)
        return float(np.mean(np.sum(w * val, -1)))

    out = dict(u=0.0, y=0.0, y_boundary=0.0, grad_y=0.0, v=0.0, z_interior=0.0, z_boundary=0.0)
    for k in range(1, tree.L):
        t = tree.times[k]
        y = bundle.state[k]
        out["u"] += dt * wsum(wf.log_weight(t, x, -2, -3, -3), res.u[k], W)
        out["y"] += dt * wsum(wf.log_weight(t, x, -2, 0, 0), y, W)
        xb = x[[0, -1]]
        out["y_boundary"] += dt * wsum(wf.log_weight(t, xb, -2, -1, -1), grid.traces(y), 1.0)
        out["grad_y"] += dt * wsum(wf.log_weight(t, mid, -2, -2, -2), np.diff(y, axis=-1) / h, h)
        out["v"] += dt * wsum(wf.log_weight(t, x, -2, -2, -2), sec[k], W)
        z = zdata.state[k]
        out["z_interior"] += dt * wsum(wf.log_weight(t, x, 2, 3, 3), z, W)
        out["z_boundary"] += dt * wsum(wf.log_weight(t, xb, 2, 2, 2), grid.traces(z), 1.0)
    lhs = out["u"] + out["y"] + out["y_boundary"] + out["grad_y"] + out["v"]
    rhs = out["z_interior"] + out["z_boundary"]
    out["lhs"] = lhs
    out["rhs"] = rhs
    out["fitted_constant"] = lhs / rhs if rhs > 0 else float("nan")
    return out


def solve_weighted_hum_A(zdata: SolutionBundle, lam: float, wf: WeightFamily, cfg: HumConfig,
                         coeffs: Optional[CoefficientSet] = None) -> HumResult:
    """Weighted controls for the forward conormal system driven by z.

    ``zdata`` is a solution of the general backward equation. The result
    carries the weighted norms of the controlled solution and their ratio to
    the weighted norm of z.
    """
    coeffs = coeffs or CoefficientSet()
    prob = LqProblem("weighted-A", zdata.grid, zdata.tree, coeffs, eps=cfg.epsilon,
                     wf=wf.with_lambda(lam), zdata=zdata)
    res = _solve(prob, cfg)
    res.weighted_norms = _weighted_norms(prob, res, zdata)
    return res


def solve_weighted_hum_B(zdata: SolutionBundle, lam: float, wf: WeightFamily, cfg: HumConfig,
                         coeffs: Optional[CoefficientSet] = None) -> HumResult:
    """Weighted control for the backward conormal system driven by z.

    ``zdata`` is a solution of the general forward equation.
    """
    coeffs = coeffs or CoefficientSet()
    prob = LqProblem("weighted-B", zdata.grid, zdata.tree, coeffs, eps=cfg.epsilon,
                     wf=wf.with_lambda(lam), zdata=zdata)
    res = _solve(prob, cfg)
    res.weighted_norms = _weighted_norms(prob, res, zdata)
    return res


# ------------------------------------------------------------- KKT oracle

@dataclass(eq=False)
class KktSystem:
    """Dense optimality system of a tiny instance and its direct solution."""

    matrix: np.ndarray
    rhs: np.ndarray
    solution: np.ndarray
    n_primal: int
    index: dict
    u: list
    v: Optional[list]
    states: dict
    max_relative_residual: float
    objective: float


def _ruiz(A: np.ndarray, iters: int = 30):
    """Symmetric Ruiz equilibration; returns the scaling vector d."""
    d = np.ones(A.shape[0])
    B = A.copy()
    for _ in range(iters):
        m = np.sqrt(np.max(np.abs(B), axis=1))
        m[m == 0] = 1.0
        B = B / m[:, None] / m[None, :]
        d /= m
        if np.max(np.abs(1 - m)) < 1e-3:
            break
    return d


def kkt_oracle(prob: LqProblem, max_unknowns: int = 2000) -> KktSystem:
    """Assemble and solve the dense optimality system of ``prob``.

    Unknowns are every state value on every tree node, the implicit parts and
    martingale parts for backward variants, and the scaled controls
    u~ = R_u^{1/2} u, v~ = R_v^{1/2} v. Constraints are the scheme equations
    written as dense matrices; the objective is diagonal. The saddle-point
    system is equilibrated, solved by LU with two refinement steps, and
    checked row by row: each residual is compared with the largest coefficient
    of its row times max|x| plus the row's right-hand side.
    """
    grid, tree = prob.grid, prob.tree
    L, M, dt, sdt = tree.L, grid.M, tree.dt, tree.sqrt_dt
    if tree.n_nodes * M > max_unknowns:
        raise OracleTooLarge(f"{tree.n_nodes} nodes x {M} points exceeds {max_unknowns}")
    W = grid.quadrature_weights
    Wm = np.diag(W)
    D = gradient_matrix(grid).toarray()
    g0 = np.arange(grid.g0_range.start, grid.g0_range.stop)
    P0 = np.eye(M)[:, g0]  # prolongation from G0 nodes
    c, x, times = prob.coeffs, grid.nodes, tree.times
    S = []
    for k in range(L):
        K = assemble_operators(grid, c, times[k + 1], robin=prob.robin).stiffness.toarray()
        S.append(Wm + dt * K)

    # unknown layout
    index, n = {}, 0

    def alloc(name, k, size):
        nonlocal n
        index[(name, k)] = (n, size)
        n += size

    for k in range(L + 1):
        alloc("y", k, 2 ** k * M)
    if not prob.forward:
        for k in range(L):
            alloc("ybar", k, 2 ** k * M)
            alloc("Y", k, 2 ** k * M)
    for k in range(L):
        alloc("u", k, 2 ** k * g0.size)
    if prob.forward:
        for k in range(L):
            alloc("v", k, 2 ** k * M)
    npr = n
    H = np.zeros(npr)
    for k in range(L):
        s, sz = index[("u", k)]
        H[s:s + sz] = dt / 2 ** k * np.tile(W[g0], 2 ** k)
        if prob.forward:
            s, sz = index[("v", k)]
            H[s:s + sz] = dt / 2 ** k * np.tile(W, 2 ** k)
    for k in prob.tracked:
        s, sz = index[("y" if prob.forward else "ybar", k)]
        H[s:s + sz] = dt / 2 ** k * np.tile(W * np.exp(prob.logq[k]), 2 ** k)
    s, sz = index[("y", prob.terminal_level)]
    H[s:s + sz] = np.tile(W, 2 ** prob.terminal_level) / (2 ** prob.terminal_level * prob.eps)

    rows, rhs = [], []

    def blk(name, k, node):
        s, _ = index[(name, k)]
        w = g0.size if name == "u" else M
        return s + node * w

    def add_rows(entries, b):
        R = np.zeros((M, npr))
        for col0, mat in entries:
            R[:, col0:col0 + mat.shape[1]] += mat
        rows.append(R)
        rhs.append(np.asarray(b, dtype=float))

    def ctrl_u(k):
        return np.sqrt(prob.su2[k])[:, None] * P0

    def ctrl_v(k):
        return np.diag(np.sqrt(prob.sv2[k]))

    if prob.forward:
        y0 = np.asarray(prob.datum, dtype=float)
        add_rows([(blk("y", 0, 0), np.eye(M))], y0)
        for k in range(L):
            t = times[k]
            if prob.variant == "forward":
                Gy = Wm @ (np.diag(c.eval("a1", t, x)) + np.diag(c.eval("B1", t, x)) @ D)
                Hy = Wm @ (np.diag(c.eval("a2", t, x)) + np.diag(c.eval("B2", t, x)) @ D)
            else:
                Gy = Hy = np.zeros((M, M))
            for node in range(2 ** k):
                for child, sgn in ((2 * node, 1.0), (2 * node + 1, -1.0)):
                    src = np.zeros(M)
                    if prob.weighted:
                        src = W * prob.src_F1[k][node] + grid.boundary_load(prob.src_Fb[k][node])
                    add_rows([(blk("y", k + 1, child), S[k]),
                              (blk("y", k, node), -(Wm + dt * Gy + sgn * sdt * Hy)),
                              (blk("u", k, node), -dt * Wm @ ctrl_u(k)),
                              (blk("v", k, node), -sgn * sdt * Wm @ ctrl_v(k))],
                             dt * src)
    else:
        for leaf in range(2 ** L):
            add_rows([(blk("y", L, leaf), np.eye(M))], prob.datum[leaf])
        for k in range(L):
            t = times[k]
            if prob.variant == "backward":
                Ry = -Wm @ (np.diag(c.eval("a1", t, x)) + np.diag(c.eval("B", t, x)) @ D)
                RY = -Wm @ np.diag(c.eval("a2", t, x))
            else:
                Ry = RY = np.zeros((M, M))
            for node in range(2 ** k):
                add_rows([(blk("ybar", k, node), S[k]),
                          (blk("y", k + 1, 2 * node), -0.5 * Wm),
                          (blk("y", k + 1, 2 * node + 1), -0.5 * Wm)], np.zeros(M))
                add_rows([(blk("Y", k, node), S[k]),
                          (blk("y", k + 1, 2 * node), -Wm / (2 * sdt)),
                          (blk("y", k + 1, 2 * node + 1), Wm / (2 * sdt))], np.zeros(M))
                src = np.zeros(M)
                if prob.weighted:
                    src = -W * prob.src_F1[k][node] + grid.boundary_load(prob.src_Fb[k][node])
                # W y_k = W ybar_k + dt r_k,  r_k = Ry ybar + RY Y - W chi u + src
                add_rows([(blk("y", k, node), Wm),
                          (blk("ybar", k, node), -Wm - dt * Ry),
                          (blk("Y", k, node), -dt * RY),
                          (blk("u", k, node), dt * Wm @ ctrl_u(k))], dt * src)
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    m = A.shape[0]
    Kfull = np.zeros((npr + m, npr + m))
    Kfull[:npr, :npr] = np.diag(H)
    Kfull[:npr, npr:] = A.T
    Kfull[npr:, :npr] = A
    f = np.concatenate([np.zeros(npr), b])
    d = _ruiz(Kfull)
    Ks = d[:, None] * Kfull * d[None, :]
    lu = sla.lu_factor(Ks)
    zs = sla.lu_solve(lu, d * f)
    for _ in range(2):
        zs += sla.lu_solve(lu, d * (f - Kfull @ (d * zs)))
    sol = d * zs
    res = Kfull @ sol - f
    # per equation: residual against (largest coefficient of the row) * |x|_inf + |f_i|
    scale = np.max(np.abs(Kfull), axis=1) * np.max(np.abs(sol)) + np.abs(f)
    rel = np.where(scale > 0, np.abs(res) / np.where(scale > 0, scale, 1.0), 0.0)
    prim = sol[:npr]

    def get(name, k, width=M):
        s, sz = index[(name, k)]
        return prim[s:s + sz].reshape(2 ** k, width)

    u = [get("u", k, g0.size) * np.sqrt(prob.su2[k][g0]) @ P0.T for k in range(L)]
    v = [get("v", k) * np.sqrt(prob.sv2[k]) for k in range(L)] if prob.forward else None
    states = {"y": [get("y", k) for k in range(L + 1)]}
    if not prob.forward:
        states["ybar"] = [get("ybar", k) for k in range(L)]
        states["Y"] = [get("Y", k) for k in range(L)]
    return KktSystem(matrix=Kfull, rhs=f, solution=sol, n_primal=npr, index=index, u=u, v=v,
                     states=states, max_relative_residual=float(np.max(rel)),
                     objective=float(0.5 * np.dot(H * prim, prim)))


def hum_objective(prob: LqProblem, res: HumResult) -> float:
    """Penalized objective of a CG result, comparable with the oracle's."""
    W, dt = prob.grid.quadrature_weights, prob.tree.dt
    val = 0.0
    for k in range(prob.tree.L):
        val += 0.5 * dt * float(np.mean(np.sum(W * res.u[k] ** 2 / np.where(
            prob.su2[k] > 0, prob.su2[k], np.inf), -1)))
        if res.v is not None:
            val += 0.5 * dt * float(np.mean(np.sum(W * res.v[k] ** 2 / np.where(
                prob.sv2[k] > 0, prob.sv2[k], np.inf), -1)))
    obs = prob.observe(res.state)
    for k in prob.tracked:
        val += 0.5 * dt * float(np.mean(np.sum(W * np.exp(prob.logq[k]) * obs[k] ** 2, -1)))
    val += 0.5 / prob.eps * res.terminal_residual
    return val


# ---------------------------------------------------------- cost report

def cost_report(result: HumResult, coeffs: CoefficientSet, T: float, C_cal: float = 1.0,
                grid=None, times=None) -> dict:
    """Measured control cost against the exponential bound exp(C_cal K).

    K is the forward constant for forward results and the backward constant
    M for backward results. ``C_fit`` = log(cost / |datum|^2) / K.
    """
    fwd = result.variant in ("forward", "weighted-A")
    Kc = (constant_K if fwd else constant_M)(coeffs, T, grid, times)
    ratio = result.cost / result.datum_norm_sq if result.datum_norm_sq > 0 else 0.0
    return {"cost": result.cost, "u_norm_sq": result.u_norm_sq, "v_norm_sq": result.v_norm_sq,
            "datum_norm_sq": result.datum_norm_sq, "ratio": ratio, "K": Kc,
            "log_ratio": float(np.log(ratio)) if ratio > 0 else float("-inf"),
            "C_fit": float(np.log(ratio) / Kc) if ratio > 0 else float("nan"),
            "bound": float(np.exp(C_cal * Kc))}


def fit_C_cal(reports) -> dict:
    """Batch summary (min, median, max) of the fitted cost constants."""
    vals = np.array([r["C_fit"] for r in reports if np.isfinite(r["C_fit"])])
    if vals.size == 0:
        return {"min": float("nan"), "median": float("nan"), "max": float("nan")}
    return {"min": float(vals.min()), "median": float(np.median(vals)), "max": float(vals.max())}


def solve_problem(prob: LqProblem, cfg: HumConfig) -> HumResult:
    """CG solve of an assembled LqProblem."""
    return _solve(prob, cfg)


def compare_with_oracle(prob: LqProblem, cfg: HumConfig, max_unknowns: int = 2000) -> dict:
    """Solve ``prob`` by CG and by the dense oracle and compare the controls.

    ``max_du`` and ``max_dv`` are the largest absolute differences over all
    control unknowns; ``control_scale`` is the largest oracle control entry.
    """
    res = _solve(prob, cfg)
    k = kkt_oracle(prob, max_unknowns)
    du = max(float(np.max(np.abs(a - b))) for a, b in zip(k.u, res.u))
    dv = 0.0
    if k.v is not None:
        dv = max(float(np.max(np.abs(a - b))) for a, b in zip(k.v, res.v))
    scale = max(float(np.max(np.abs(a))) for a in k.u)
    if k.v is not None:
        scale = max(scale, max(float(np.max(np.abs(a))) for a in k.v))
    return {"variant": prob.variant, "iterations": res.iterations, "max_du": du, "max_dv": dv,
            "control_scale": scale, "oracle_residual": k.max_relative_residual,
            "objective_cg": hum_objective(prob, res), "objective_oracle": k.objective,
            "identity_error": res.identity_error}
