"""Binary scenario tree for a scalar Brownian motion.

Level k holds 2**k nodes, each with probability 2**-k. The children of node n
are 2n (increment +sqrt(dt)) and 2n + 1 (increment -sqrt(dt)). An adapted
field stores one array of shape (2**k, ...) per level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 22


class DepthTooLarge(ValueError):
    pass


class LevelMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NoiseTree:
    L: int
    T: float

    @property
    def dt(self) -> float:
        return self.T / self.L

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.L + 1) - 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.L + 1)

    def level_size(self, k: int) -> int:
        return 2 ** k

    def probability(self, k: int) -> float:
        return 2.0 ** (-k)

    def increments(self, k: int) -> np.ndarray:
        """Increments W(t_{k+1}) - W(t_k) indexed by the level k+1 nodes."""
        if not 0 <= k < self.L:
            raise LevelMismatch(f"no increment after level {k} in a tree of depth {self.L}")
        out = np.empty(2 ** (k + 1))
        out[0::2] = self.sqrt_dt
        out[1::2] = -self.sqrt_dt
        return out

    def brownian(self, k: int) -> np.ndarray:
        """Path value W(t_k) at every level-k node."""
        if not 0 <= k <= self.L:
            raise LevelMismatch(f"level {k} outside 0..{self.L}")
        w = np.zeros(1)
        for j in range(k):
            w = np.repeat(w, 2) + self.increments(j)
        return w


def build_tree(L: int, T: float) -> NoiseTree:
    """Return a tree with L time steps on [0, T]."""
    if int(L) != L or L < 1:
        raise ValueError(f"L must be a positive integer, got {L}")
    if L > MAX_DEPTH:
        raise DepthTooLarge(f"L={L} exceeds the memory guard {MAX_DEPTH}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    return NoiseTree(L=int(L), T=float(T))


class AdaptedField:
    """Per-level node values of an adapted process.

    Parameters
    ----------
    tree : NoiseTree
    values : list of ndarray
        ``values[j]`` has leading axis ``2**levels[j]``.
    levels : sequence of int, optional
        Levels stored, default ``0..len(values)-1``.
    """

    def __init__(self, tree: NoiseTree, values, levels=None):
        values = [np.asarray(v, dtype=float) for v in values]
        if levels is None:
            levels = range(len(values))
        levels = list(levels)
        if len(levels) != len(values):
            raise LevelMismatch("levels and values differ in length")
        for k, v in zip(levels, values):
            if k < 0 or k > tree.L or v.shape[0] != 2 ** k:
                raise LevelMismatch(f"level {k} needs {2 ** k} nodes, got shape {v.shape}")
        self.tree = tree
        self.levels = levels
        self._data = dict(zip(levels, values))

    def __getitem__(self, k: int) -> np.ndarray:
        return self._data[k]

    def __iter__(self):
        return iter(self._data[k] for k in self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def values(self) -> list:
        return [self._data[k] for k in self.levels]

    def _combine(self, other, op):
        if isinstance(other, AdaptedField):
            if other.levels != self.levels:
                raise LevelMismatch("fields live on different levels")
            return AdaptedField(self.tree, [op(a, b) for a, b in zip(self, other)], self.levels)
        return AdaptedField(self.tree, [op(a, other) for a in self], self.levels)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) if v.size else 0.0) for v in self)

    @classmethod
    def zeros(cls, tree: NoiseTree, shape, levels=None) -> "AdaptedField":
        shape = tuple(np.atleast_1d(shape))
        levels = list(range(tree.L + 1)) if levels is None else list(levels)
        return cls(tree, [np.zeros((2 ** k,) + shape) for k in levels], levels)

    @classmethod
    def from_function(cls, tree: NoiseTree, f, levels=None) -> "AdaptedField":
        """Build from ``f(k, t_k, W_k)`` where W_k is the path value per node."""
        levels = list(range(tree.L + 1)) if levels is None else list(levels)
        vals = []
        for k in levels:
            w = tree.brownian(k)
            v = np.asarray(f(k, tree.times[k], w), dtype=float)
            if v.shape[0] != 2 ** k:
                v = np.broadcast_to(v, (2 ** k,) + v.shape).copy()
            vals.append(v)
        return cls(tree, vals, levels)


def _check_next(tree: NoiseTree, X: np.ndarray, k) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if k is None:
        k = int(np.log2(n)) - 1 if n >= 2 else -1
    if k < 0 or k >= tree.L or n != 2 ** (k + 1):
        raise LevelMismatch(f"expected a level-{k + 1} field with {2 ** (k + 1)} nodes, got {n}")
    return X


def cond_expect(tree: NoiseTree, X_next, k: int | None = None) -> np.ndarray:
    """E[X_{k+1} | F_{t_k}]: average of the two children of each node."""
    X = _check_next(tree, X_next, k)
    return 0.5 * (X[0::2] + X[1::2])


def martingale_part(tree: NoiseTree, X_next, k: int | None = None) -> np.ndarray:
    """E[X_{k+1} dW_k | F_{t_k}] / dt = (X(n+) - X(n-)) / (2 sqrt(dt))."""
    X = _check_next(tree, X_next, k)
    return (X[0::2] - X[1::2]) / (2.0 * tree.sqrt_dt)


def expectation(tree: NoiseTree, X) -> np.ndarray | float:
    """Path average of a level field (uniform node weights)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n & (n - 1) or int(np.log2(n)) > tree.L:
        raise LevelMismatch(f"{n} nodes is not a level of this tree")
    m = X.mean(axis=0)
    return float(m) if np.ndim(m) == 0 else m


def _levels_of(x) -> list:
    if isinstance(x, AdaptedField):
        return [x[k] for k in x.levels]
    return list(x)


def ito_duality_terms(y, z, Z, forward_rhs, backward_rhs, mass, dt: float) -> dict:
    """Terms of the discrete product rule for a forward/backward pair.

    Parameters
    ----------
    y : AdaptedField or list
        Forward state on levels 0..L.
    z : AdaptedField or list
        Backward state on levels 0..L.
    Z : AdaptedField or list
        Backward martingale part on levels 0..L-1.
    forward_rhs : pair (g, h)
        Forward drift and noise load vectors on levels 0..L-1.
    backward_rhs : list
        Backward load vectors r on levels 0..L-1.
    mass : ndarray
        Lumped mass diagonal.
    dt : float

    Returns
    -------
    dict
        ``lhs`` = E<y_L, z_L> - <y_0, z_0>, ``drift``, ``noise`` and
        ``backward`` pairing sums, and ``residual`` = lhs - (drift + noise - backward).
    """
    y, z, Z = _levels_of(y), _levels_of(z), _levels_of(Z)
    g, hn = (_levels_of(v) for v in forward_rhs)
    r = _levels_of(backward_rhs)
    W = np.asarray(mass, dtype=float)
    L = len(y) - 1
    end = float(np.mean(np.sum(W * y[L] * z[L], axis=-1)))
    start = float(np.mean(np.sum(W * y[0] * z[0], axis=-1)))
    drift = noise = back = 0.0
    scale = max(abs(end), abs(start))
    for k in range(L):
        zbar = z[k] - dt * r[k] / W
        a = dt * float(np.mean(np.sum(zbar * g[k], axis=-1)))
        b = dt * float(np.mean(np.sum(Z[k] * hn[k], axis=-1)))
        c = dt * float(np.mean(np.sum(r[k] * y[k], axis=-1)))
        drift += a
        noise += b
        back += c
        scale = max(scale, abs(a), abs(b), abs(c))
    lhs = end - start
    return {"lhs": lhs, "drift": drift, "noise": noise, "backward": back,
            "residual": lhs - (drift + noise - back), "scale": scale}


def ito_duality_residual(y, z, Z, forward_rhs, backward_rhs, mass, dt: float) -> float:
    """Residual of the discrete Ito product rule; zero for an adjoint-consistent pair."""
    return ito_duality_terms(y, z, Z, forward_rhs, backward_rhs, mass, dt)["residual"]
