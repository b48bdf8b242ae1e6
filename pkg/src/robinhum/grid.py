"""Uniform mesh of G = (0, 1) and Robin-aware finite difference operators.

Boundary conditions are imposed weakly: the Robin coefficient enters the
bilinear form as a point mass at x = 0 and x = 1, so the stiffness stays
symmetric. The mass matrix is the lumped trapezoid rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded, eigvalsh_tridiagonal


class NestedRegionViolation(ValueError):
    """Raised when the regions are not nested as G1 in G0 in (0, 1)."""


class TooCoarse(ValueError):
    """Raised when a region contains no grid node."""


class EllipticityViolation(ValueError):
    """Raised when the diffusion coefficient is not positive."""


class ZeroField(ValueError):
    """Raised when a ratio is requested for a field of zero L2 norm."""


class SolverFailure(RuntimeError):
    """Raised when a linear factorization breaks down."""


def _strict_indices(M: int, a: float, b: float) -> range:
    i = np.arange(M)
    x = i / (M - 1)
    inside = i[(x > a) & (x < b)]
    if inside.size == 0:
        return range(0)
    return range(int(inside[0]), int(inside[-1]) + 1)


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Uniform grid x_i = i h, i = 0..M-1, with control and weight regions.

    Attributes
    ----------
    M : int
        Number of nodes including both boundary nodes.
    g0, g1 : tuple of float
        Open intervals for the control region G0 and the weight region G1.
    nodes : ndarray
        Node coordinates.
    g0_range, g1_range : range
        Indices of nodes strictly inside G0 and G1.
    quadrature_weights : ndarray
        Trapezoid weights; they sum to 1.
    """

    M: int
    g0: tuple
    g1: tuple
    nodes: np.ndarray
    g0_range: range
    g1_range: range
    quadrature_weights: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / (self.M - 1)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    @property
    def chi0(self) -> np.ndarray:
        """Indicator of G0 on the nodes."""
        c = np.zeros(self.M)
        c[self.g0_range.start:self.g0_range.stop] = 1.0
        return c

    @property
    def chi1(self) -> np.ndarray:
        c = np.zeros(self.M)
        c[self.g1_range.start:self.g1_range.stop] = 1.0
        return c

    @property
    def boundary_index(self) -> tuple:
        return (0, self.M - 1)

    @property
    def normal(self) -> np.ndarray:
        """Outer normal at x = 0 and x = 1."""
        return np.array([-1.0, 1.0])

    def inner(self, y, z) -> np.ndarray:
        """Discrete L2(G) inner product along the last axis."""
        return np.sum(self.quadrature_weights * y * z, axis=-1)

    def boundary_load(self, f2) -> np.ndarray:
        """Load vector of the pairing zeta -> sum over Gamma of f2 zeta.

        ``f2`` has trailing axis of length 2 (values at x=0 and x=1).
        """
        f2 = np.asarray(f2, dtype=float)
        out = np.zeros(f2.shape[:-1] + (self.M,))
        out[..., 0] = f2[..., 0]
        out[..., -1] = f2[..., 1]
        return out

    def traces(self, y) -> np.ndarray:
        y = np.asarray(y)
        return np.stack([y[..., 0], y[..., -1]], axis=-1)


def build_grid(M: int, g0, g1) -> SpatialGrid:
    """Build the grid and locate the regions G1 in G0 in (0, 1).

    Parameters
    ----------
    M : int
        Node count, at least 4.
    g0, g1 : pair of float
        Open intervals for the control and weight regions.

    Returns
    -------
    SpatialGrid
    """
    if int(M) != M or M < 4:
        raise TooCoarse(f"need M >= 4 nodes, got {M}")
    M = int(M)
    a0, b0 = map(float, g0)
    a1, b1 = map(float, g1)
    if not (a0 < b0 and a1 < b1):
        raise NestedRegionViolation("intervals must satisfy left < right")
    if not (0.0 < a0 and b0 < 1.0):
        raise NestedRegionViolation(f"g0={g0} must lie strictly inside (0, 1)")
    if not (a0 < a1 and b1 < b0):
        raise NestedRegionViolation(f"g1={g1} must be compactly contained in g0={g0}")
    r0 = _strict_indices(M, a0, b0)
    r1 = _strict_indices(M, a1, b1)
    if len(r0) == 0:
        raise TooCoarse(f"g0={g0} contains no node for M={M}")
    if len(r1) == 0:
        raise TooCoarse(f"g1={g1} contains no node for M={M}")
    h = 1.0 / (M - 1)
    w = np.full(M, h)
    w[0] = w[-1] = 0.5 * h
    nodes = np.arange(M) * h
    nodes[-1] = 1.0
    return SpatialGrid(M=M, g0=(a0, b0), g1=(a1, b1), nodes=nodes,
                       g0_range=r0, g1_range=r1, quadrature_weights=w)


def gradient_matrix(grid: SpatialGrid) -> sp.csr_matrix:
    """Centered differences inside, second order one-sided at the ends."""
    M, h = grid.M, grid.h
    rows, cols, vals = [], [], []
    for i in range(1, M - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [0, 0, 0, M - 1, M - 1, M - 1]
    cols += [0, 1, 2, M - 1, M - 2, M - 3]
    vals += [-1.5 / h, 2.0 / h, -0.5 / h, 1.5 / h, -2.0 / h, 0.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(M, M))


class StepSolver:
    """Banded Cholesky factor of W + dt K, reused for many right-hand sides."""

    def __init__(self, mass: np.ndarray, diag: np.ndarray, off: np.ndarray, dt: float):
        ab = np.zeros((2, mass.size))
        ab[0, 1:] = dt * off
        ab[1] = mass + dt * diag
        try:
            self._cb = cholesky_banded(ab, lower=False)
        except LinAlgError as exc:
            raise SolverFailure(f"factorization of W + dt K failed: {exc}") from exc
        self.dt = dt

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for each row of ``rhs`` (shape (n, M) or (M,))."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return cho_solve_banded((self._cb, False), rhs)
        return cho_solve_banded((self._cb, False), rhs.T).T


@dataclass(frozen=True, eq=False)
class RobinAssembly:
    """Discrete operators at a fixed time t.

    ``stiffness`` realizes zeta -> int a y' zeta' dx + sum_Gamma beta y zeta.
    ``drift_first_order`` is the gradient matrix D; a coefficient B enters as
    diag(B) D.
    """

    t: float
    mass: np.ndarray
    stiff_diag: np.ndarray
    stiff_off: np.ndarray
    drift_first_order: sp.csr_matrix
    trace_rows: np.ndarray
    min_generalized_eig: float

    @property
    def stiffness(self) -> sp.csr_matrix:
        K = sp.diags([self.stiff_off, self.stiff_diag, self.stiff_off], [-1, 0, 1], format="csr")
        return K

    def apply_stiffness(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = self.stiff_diag * y
        out[..., :-1] += self.stiff_off * y[..., 1:]
        out[..., 1:] += self.stiff_off * y[..., :-1]
        return out

    def form(self, y, z) -> float:
        return float(np.sum(np.asarray(z) * self.apply_stiffness(y)))

    def coercivity_shift(self) -> float:
        """Smallest c >= 0 such that K + c W is positive semidefinite."""
        return max(0.0, -self.min_generalized_eig)

    def factor(self, dt: float) -> StepSolver:
        return StepSolver(self.mass, self.stiff_diag, self.stiff_off, dt)


def _beta_pair(coeffs, t: float) -> np.ndarray:
    if coeffs is None:
        return np.zeros(2)
    return np.asarray(coeffs.beta_at(t), dtype=float)


def assemble_operators(grid: SpatialGrid, coeffs, t: float, robin: bool = True) -> RobinAssembly:
    """Assemble mass, stiffness, gradient and trace functionals at time t.

    Parameters
    ----------
    grid : SpatialGrid
    coeffs : CoefficientSet or None
        Supplies ``a`` (evaluated at cell midpoints) and ``beta``. ``None``
        means a = 1, beta = 0.
    t : float
    robin : bool
        If False the Robin term is dropped (pure conormal/Neumann form).
    """
    mid = grid.midpoints
    if coeffs is None:
        a_mid = np.ones(mid.size)
    else:
        a_mid = np.broadcast_to(np.asarray(coeffs.eval("a", t, mid), dtype=float), mid.shape)
    if np.min(a_mid) <= 0.0:
        raise EllipticityViolation(f"min a(t={t}, .) = {np.min(a_mid)} <= 0")
    k = a_mid / grid.h
    diag = np.zeros(grid.M)
    diag[:-1] += k
    diag[1:] += k
    off = -k
    if robin:
        b = _beta_pair(coeffs, t)
        diag[0] += b[0]
        diag[-1] += b[1]
    trace_rows = np.zeros((2, grid.M))
    trace_rows[0, 0] = 1.0
    trace_rows[1, -1] = 1.0
    # generalized eigenvalues of K v = lam W v via the symmetric scaling W^-1/2 K W^-1/2
    s = 1.0 / np.sqrt(grid.quadrature_weights)
    lam_min = float(eigvalsh_tridiagonal(diag * s * s, off * s[:-1] * s[1:],
                                         select="i", select_range=(0, 0))[0])
    return RobinAssembly(t=float(t), mass=grid.quadrature_weights.copy(), stiff_diag=diag,
                         stiff_off=off, drift_first_order=gradient_matrix(grid),
                         trace_rows=trace_rows, min_generalized_eig=lam_min)


def apply_D(D: sp.spmatrix, X: np.ndarray) -> np.ndarray:
    """Apply D along the last axis of X."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return D @ X
    return (D @ X.T).T


def apply_DT(D: sp.spmatrix, X: np.ndarray) -> np.ndarray:
    """Apply D^T along the last axis of X."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return D.T @ X
    return (D.T @ X.T).T


def weak_divergence_pairing(grid: SpatialGrid, F, z) -> float:
    """Discrete value of -int F z' dx + sum_Gamma (F nu) z.

    This is the action of the divergence of F on z, so for smooth data it
    approximates int (div F) z dx.
    """
    F = np.asarray(F, dtype=float)
    z = np.asarray(z, dtype=float)
    if F.shape != (grid.M,) or z.shape != (grid.M,):
        raise ValueError(f"expected fields of shape ({grid.M},)")
    dz = apply_D(gradient_matrix(grid), z)
    interior = -np.sum(grid.quadrature_weights * F * dz)
    boundary = F[-1] * z[-1] * grid.normal[1] + F[0] * z[0] * grid.normal[0]
    return float(interior + boundary)


def trace_inequality_gap(grid: SpatialGrid, z) -> float:
    """Ratio of sum_Gamma z^2 to ||z||_{H1} ||z||_{L2}.

    Gradients are cell differences integrated by the midpoint rule, which is
    the quadratic form of the a = 1 stiffness.
    """
    z = np.asarray(z, dtype=float)
    l2 = float(np.sum(grid.quadrature_weights * z * z))
    if l2 == 0.0:
        raise ZeroField("trace ratio undefined for z with zero L2 norm")
    grad = float(np.sum(np.diff(z) ** 2) / grid.h)
    bnd = float(z[0] ** 2 + z[-1] ** 2)
    return bnd / (np.sqrt(l2 + grad) * np.sqrt(l2))
