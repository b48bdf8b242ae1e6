"""Carleman weight functions and the constants built from coefficient norms.

The spatial profile is the cubic psi(x) = c x (1 - x)(1 + s x). It vanishes
at both ends with nonzero slope there, has a single critical point x* in
(0, 1), and is normalized to max psi = 1. The shape parameter s places x* at
a / (a + b) for the requested integers (a, b); this works for x* in (1/3, 2/3).

All weights are handled through their logarithms. For g(t) = 1 / (t (T - t)):

    log phi = mu psi - log(t (T - t)),   lambda alpha = lambda (e^{mu psi} - e^{2 mu}) g,
    log theta = lambda alpha.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .grid import SpatialGrid

LOG_OVERFLOW = 700.0


class ArgmaxOutsideG1(ValueError):
    pass


class InvalidPsi(ValueError):
    pass


class TimeOnBoundary(ValueError):
    pass


class WeightOverflow(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class PsiFunction:
    """Normalized profile psi on [0, 1] with argmax x* inside G1.

    Attributes
    ----------
    exponents : tuple of int
        (a, b); the argmax is a / (a + b).
    c, s : float
        psi(x) = c x (1 - x)(1 + s x).
    argmax : float
    values, derivative : ndarray
        psi and psi' on the grid nodes.
    """

    exponents: tuple
    c: float
    s: float
    argmax: float
    values: np.ndarray
    derivative: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.c * x * (1.0 - x) * (1.0 + self.s * x)

    def d1(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.c * (1.0 - 2.0 * x + 2.0 * self.s * x - 3.0 * self.s * x * x)

    def d2(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.c * (-2.0 + 2.0 * self.s - 6.0 * self.s * x)

    @property
    def sup(self) -> float:
        return 1.0


def build_psi(grid: SpatialGrid, a: int = 3, b: int = 5) -> PsiFunction:
    """Profile with argmax a / (a + b) that must fall strictly inside G1."""
    if int(a) != a or int(b) != b or a < 1 or b < 1:
        raise InvalidPsi(f"exponents must be positive integers, got ({a}, {b})")
    xs = a / (a + b)
    if not grid.g1[0] < xs < grid.g1[1]:
        raise ArgmaxOutsideG1(f"argmax {xs:.4g} not inside G1={grid.g1}")
    if not 1.0 / 3.0 < xs < 2.0 / 3.0:
        raise InvalidPsi(f"argmax {xs:.4g} outside (1/3, 2/3): no admissible cubic profile")
    s = (2.0 * xs - 1.0) / (xs * (2.0 - 3.0 * xs))
    c = 1.0 / (xs * (1.0 - xs) * (1.0 + s * xs))
    tmp = PsiFunction((int(a), int(b)), c, s, xs, np.empty(0), np.empty(0))
    psi = PsiFunction((int(a), int(b)), c, s, xs, tmp(grid.nodes), tmp.d1(grid.nodes))
    _check_psi(grid, psi)
    return psi


def _check_psi(grid: SpatialGrid, psi: PsiFunction) -> None:
    v, d = psi.values, psi.derivative
    if abs(v[0]) > 1e-14 or abs(v[-1]) > 1e-14:
        raise InvalidPsi("psi must vanish on the boundary")
    if np.any(v[1:-1] <= 0):
        raise InvalidPsi("psi must be positive inside")
    outside = np.ones(grid.M, dtype=bool)
    outside[grid.g1_range.start:grid.g1_range.stop] = False
    if np.any(np.abs(d[outside]) <= 0):
        raise InvalidPsi("psi' vanishes outside G1")


@dataclass(frozen=True, eq=False)
class WeightFamily:
    """Weights alpha, phi, theta for given (mu, lambda) and horizon T.

    ``epsilon`` enables the regularized alpha_eps, theta_eps where t (T - t)
    is replaced by (t + eps)(T - t + eps).
    """

    psi: PsiFunction
    mu: float = 1.0
    lam: float = 1.0
    T: float = 1.0
    epsilon: Optional[float] = None

    def with_lambda(self, lam: float) -> "WeightFamily":
        return replace(self, lam=float(lam))

    def with_epsilon(self, eps: Optional[float]) -> "WeightFamily":
        return replace(self, epsilon=eps)

    def _den(self, t, regularized: bool):
        if regularized:
            if self.epsilon is None:
                raise ValueError("regularized weights need epsilon")
            e = self.epsilon
            return (t + e) * (self.T - t + e)
        if not 0.0 < t < self.T:
            raise TimeOnBoundary(f"t={t} is not inside (0, {self.T})")
        return t * (self.T - t)

    def alpha(self, t: float, x, regularized: bool = False) -> np.ndarray:
        ep = np.exp(self.mu * self.psi(x))
        with np.errstate(over="ignore"):
            # t near 0 or T sends alpha to -inf, which is the right limit
            return (ep - np.exp(2.0 * self.mu * self.psi.sup)) / self._den(t, regularized)

    def log_phi(self, t: float, x, regularized: bool = False) -> np.ndarray:
        return self.mu * self.psi(x) - np.log(self._den(t, regularized))

    def phi(self, t: float, x) -> np.ndarray:
        return np.exp(self.log_phi(t, x))

    def log_theta(self, t: float, x, regularized: bool = False) -> np.ndarray:
        return self.lam * self.alpha(t, x, regularized)

    def theta(self, t: float, x, regularized: bool = False) -> np.ndarray:
        return np.exp(self.log_theta(t, x, regularized))

    def log_weight(self, t: float, x, theta_pow: float, phi_pow: float = 0.0,
                   lam_pow: float = 0.0) -> np.ndarray:
        """log of lambda^lam_pow theta^theta_pow phi^phi_pow.

        At t in {0, T} the theta factor dominates: the result is -inf when
        theta_pow > 0 and +inf when theta_pow < 0.
        """
        x = np.asarray(x, dtype=float)
        if not 0.0 < t < self.T:
            if theta_pow == 0:
                raise TimeOnBoundary(f"phi is singular at t={t}")
            return np.full(x.shape, -np.inf if theta_pow > 0 else np.inf)
        return (lam_pow * np.log(self.lam) + theta_pow * self.log_theta(t, x)
                + phi_pow * self.log_phi(t, x))

    # exact time derivatives, with g = 1/(t(T-t)), g' = (2t-T) g^2, g'' = 2 g^2 + 2 (2t-T)^2 g^3
    def _g(self, t):
        g = 1.0 / (t * (self.T - t))
        g1 = (2.0 * t - self.T) * g * g
        g2 = 2.0 * g * g + 2.0 * (2.0 * t - self.T) ** 2 * g ** 3
        return g, g1, g2

    def phi_t(self, t: float, x) -> np.ndarray:
        return np.exp(self.mu * self.psi(x)) * self._g(t)[1]

    def phi_tt(self, t: float, x) -> np.ndarray:
        return np.exp(self.mu * self.psi(x)) * self._g(t)[2]

    def alpha_t(self, t: float, x) -> np.ndarray:
        return (np.exp(self.mu * self.psi(x)) - np.exp(2 * self.mu)) * self._g(t)[1]

    def alpha_tt(self, t: float, x) -> np.ndarray:
        return (np.exp(self.mu * self.psi(x)) - np.exp(2 * self.mu)) * self._g(t)[2]


def eval_weights(wf: WeightFamily, t: float, node_index, grid: SpatialGrid | None = None,
                 regularized: bool = False):
    """Return (alpha, phi, theta) at time t and the given nodes.

    ``node_index`` indexes ``grid.nodes``; without a grid it is read as the
    coordinate itself.
    """
    x = grid.nodes[node_index] if grid is not None else np.asarray(node_index, dtype=float)
    with np.errstate(under="ignore"):
        a = wf.alpha(t, x, regularized)
        lphi = wf.mu * wf.psi(x) - np.log(wf._den(t, regularized))
        return a, np.exp(lphi), np.exp(wf.lam * a)


def check_weight_bounds(wf: WeightFamily, times, xs) -> dict:
    """Smallest constants in the elementary weight bounds over a sample grid.

    Returns the fitted C for each of
    phi >= C T^-2, |phi_t| <= C T phi^2, |phi_tt| <= C T^2 phi^3,
    |alpha_t| <= C T e^{2 mu} phi^2 and |alpha_tt| <= C T^2 e^{2 mu} phi^3.
    The first is a lower constant (min), the rest upper constants (max).
    """
    T, e2 = wf.T, np.exp(2.0 * wf.mu)
    xs = np.asarray(xs, dtype=float)
    lo = np.inf
    up = {"phi_t": 0.0, "phi_tt": 0.0, "alpha_t": 0.0, "alpha_tt": 0.0}
    for t in times:
        phi = wf.phi(t, xs)
        lo = min(lo, float(np.min(phi * T * T)))
        up["phi_t"] = max(up["phi_t"], float(np.max(np.abs(wf.phi_t(t, xs)) / (T * phi ** 2))))
        up["phi_tt"] = max(up["phi_tt"], float(np.max(np.abs(wf.phi_tt(t, xs)) / (T * T * phi ** 3))))
        up["alpha_t"] = max(up["alpha_t"], float(np.max(np.abs(wf.alpha_t(t, xs)) / (T * e2 * phi ** 2))))
        up["alpha_tt"] = max(up["alpha_tt"],
                             float(np.max(np.abs(wf.alpha_tt(t, xs)) / (T * T * e2 * phi ** 3))))
    return {"phi_lower": lo, **up}


# ------------------------------------------------------ coefficient constants

@dataclass(frozen=True)
class LambdaThreshold:
    which: str
    C_cal: float
    value: float
    r1: float
    r2: float


def _norms(coeffs, grid=None, times=None) -> dict:
    if isinstance(coeffs, dict):
        return coeffs
    if grid is None:
        # constants only
        return {k: abs(float(getattr(coeffs, k))) for k in ("a1", "a2", "B1", "B2", "B")} | \
            {"beta": float(np.max(np.abs(coeffs.beta_at(0.0))))}
    return coeffs.sup_norms(grid, times)


def lambda_threshold(coeffs, T: float, which: str = "forward-obs", C_cal: float = 1.0,
                     grid=None, times=None) -> LambdaThreshold:
    """Lower bound for lambda in the observability argument.

    forward-obs:  C [T + T^2 (1 + |a1|^{2/3} + |a2|^{2/3} + |beta|^2 + |B1|^2 + |B2|^2)]
    backward-obs: C [T + T^2 (1 + |a1|^{2/3} + |a2|^2 + |beta|^2 + |B|^2)]

    ``coeffs`` is a CoefficientSet or a dict of sup-norms. Callable
    coefficients need ``grid`` and ``times`` for the norms.
    """
    if not C_cal > 0:
        raise ValueError("C_cal must be positive")
    n = _norms(coeffs, grid, times)
    if which == "forward-obs":
        s = (1 + n["a1"] ** (2 / 3) + n["a2"] ** (2 / 3) + n["beta"] ** 2
             + n["B1"] ** 2 + n["B2"] ** 2)
        r2 = 1 + n["a1"] + n["a2"] ** 2 + n["beta"] ** 2 + n["B1"] ** 2
    elif which == "backward-obs":
        s = 1 + n["a1"] ** (2 / 3) + n["a2"] ** 2 + n["beta"] ** 2 + n["B"] ** 2
        r2 = 1 + n["a1"] + n["a2"] ** 2 + n["beta"] ** 2 + n["B"] ** 2
    else:
        raise ValueError(f"unknown threshold kind {which!r}")
    # r1 = 1/T + s and r2 are the aggregates whose combination r1 + T r2 gives K or M
    return LambdaThreshold(which, float(C_cal), float(C_cal * (T + T * T * s)), 1 / T + s, r2)


def constant_K(coeffs, T: float, grid=None, times=None) -> float:
    """Exponent constant of the forward control cost, r1 + T r2."""
    lt = lambda_threshold(coeffs, T, "forward-obs", 1.0, grid, times)
    return float(lt.r1 + T * lt.r2)


def constant_M(coeffs, T: float, grid=None, times=None) -> float:
    """Exponent constant of the backward control cost, r1 + T r2."""
    lt = lambda_threshold(coeffs, T, "backward-obs", 1.0, grid, times)
    return float(lt.r1 + T * lt.r2)
