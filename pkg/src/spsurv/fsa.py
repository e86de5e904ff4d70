"""Full-scale approximation (FSA) of spatial correlation matrices.

The approximated correlation matrix is

    R_dag = (1 - eps) rho_mK rho_KK^{-1} rho_mK^T + R_s,
    R_s   = (1 - eps) (rho_mm - rho_mK rho_KK^{-1} rho_mK^T) o Delta + eps I,

with ``Delta`` the same-block indicator.  ``R_s`` is block diagonal, so
solves and log-determinants only need per-block Cholesky factors plus one
``K x K`` capacitance factorization (Sherman-Morrison-Woodbury).
"""
from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError


def _as_points(points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    return P[:, None] if P.ndim == 1 else P


def cover_design(points, K: int, rng=None, max_sweeps: int = 200, return_history: bool = False):
    """Select ``K`` space-filling knots from ``points`` by point swapping.

    The criterion is the sum over points of the squared distance to the
    nearest knot.  A sweep tries, for every knot, the best swap with a
    non-knot candidate and accepts it only if the criterion strictly
    decreases.  Stops after ``max_sweeps`` sweeps or the first sweep
    without an accepted swap.  Returns indices into ``points`` (sorted).
    """
    P = _as_points(points)
    m = P.shape[0]
    if K > m:
        raise ValidationError(f"cannot choose K={K} knots from {m} points")
    if K < 1:
        raise ValidationError("K must be at least 1")
    _, first = np.unique(P, axis=0, return_index=True)
    cand = np.sort(first)
    if K > cand.size:
        raise ValidationError(f"only {cand.size} distinct locations for K={K} knots")
    D = cdist(P, P, "sqeuclidean")
    if K == cand.size:
        knots = cand
        history = [float(np.min(D[:, knots], axis=1).sum())]
        return (knots, history) if return_history else knots

    rng = np.random.default_rng(0) if rng is None else rng
    knots = np.sort(rng.choice(cand, size=K, replace=False))
    in_set = np.zeros(m, dtype=bool)
    in_set[knots] = True

    def crit_of(kn):
        return float(np.min(D[:, kn], axis=1).sum())

    current = crit_of(knots)
    history = [current]
    for _ in range(max_sweeps):
        swapped = False
        for pos in range(K):
            dk = D[:, knots]
            if K > 1:
                others = np.delete(dk, pos, axis=1).min(axis=1)
            else:
                others = np.full(m, np.inf)
            free = cand[~in_set[cand]]
            totals = np.minimum(others[:, None], D[:, free]).sum(axis=0)
            best = int(np.argmin(totals))
            if totals[best] < current * (1.0 - 1e-12):
                in_set[knots[pos]] = False
                knots[pos] = free[best]
                in_set[knots[pos]] = True
                current = float(totals[best])
                history.append(current)
                swapped = True
        if not swapped:
            break
    knots = np.sort(knots)
    return (knots, history) if return_history else knots


def assign_blocks(points, centers) -> np.ndarray:
    """Index of the nearest center for every point; ties go to the lowest index."""
    return np.argmin(cdist(_as_points(points), _as_points(centers)), axis=1)


def powered_exponential(phi: float, nu: float = 1.0):
    def corr(d):
        return np.exp(-(phi * d) ** nu)
    return corr


def _chol(A, what):
    try:
        return linalg.cholesky(A, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite (duplicate knots?)") from None


class FsaPlan:
    """Factorized FSA of a correlation matrix over ``coords``.

    Parameters
    ----------
    coords : (m, d) array
    corr : callable
        Maps a distance array to correlations.
    knots : (K,) int array
        Indices of the knot locations within ``coords``.
    blocks : (m,) int array
        Block label of every location.
    eps : float
        Nugget added on the diagonal.
    """

    def __init__(self, coords, corr, knots, blocks, eps: float = 1e-10):
        self.coords = _as_points(coords)
        self.corr = corr
        self.knots = np.asarray(knots, dtype=int)
        self.blocks = np.asarray(blocks, dtype=int)
        self.eps = float(eps)
        if not 0 <= self.eps < 1:
            raise ValidationError("nugget must lie in [0, 1)")
        m = self.m
        if self.blocks.shape != (m,):
            raise ValidationError("block assignment must have one entry per location")
        kc = self.coords[self.knots]
        self.rho_KK = corr(cdist(kc, kc))
        self.L_KK = _chol(self.rho_KK, "knot correlation matrix")
        self.rho_mK = corr(cdist(self.coords, kc))
        # W^T W = rho_mK rho_KK^{-1} rho_mK^T
        self.W = linalg.solve_triangular(self.L_KK, self.rho_mK.T, lower=True)
        self.block_index = [np.flatnonzero(self.blocks == b) for b in np.unique(self.blocks)]
        self.block_chol = []
        s = 1.0 - self.eps
        # One location per block: R_s is diagonal and handled as a vector.
        self._diag = None
        if len(self.block_index) == m:
            d = s * (1.0 - np.sum(self.W ** 2, axis=0)) + self.eps
            if np.any(~(d > 0)):
                raise NumericalError("residual block is not positive definite (duplicate knots?)")
            self._diag = d
            self.block_chol = [np.sqrt(d[i:i + 1])[:, None] for i in range(m)]
        for idx in self.block_index if self._diag is None else ():
            pc = self.coords[idx]
            Wb = self.W[:, idx]
            Rb = s * (corr(cdist(pc, pc)) - Wb.T @ Wb) + self.eps * np.eye(idx.size)
            self.block_chol.append(_chol(Rb, "residual block"))
        self.A = self._rs_solve(self.rho_mK)
        cap = self.rho_KK + s * (self.rho_mK.T @ self.A)
        self.L_C = _chol(0.5 * (cap + cap.T), "capacitance matrix")

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    @property
    def K(self) -> int:
        return self.knots.size

    @property
    def B(self) -> int:
        return len(self.block_index)

    def with_corr(self, corr, eps: float | None = None) -> "FsaPlan":
        """Same knots and blocks, new correlation function or nugget."""
        return FsaPlan(self.coords, corr, self.knots, self.blocks,
                       self.eps if eps is None else eps)

    def _rs_solve(self, x):
        if self._diag is not None:
            x = np.asarray(x, dtype=float)
            return x / (self._diag if x.ndim == 1 else self._diag[:, None])
        out = np.empty_like(np.asarray(x, dtype=float))
        for idx, Lb in zip(self.block_index, self.block_chol):
            out[idx] = linalg.cho_solve((Lb, True), x[idx])
        return out

    def _rs_matvec(self, y):
        if self._diag is not None:
            y = np.asarray(y, dtype=float)
            return y * (self._diag if y.ndim == 1 else self._diag[:, None])
        out = np.empty_like(np.asarray(y, dtype=float))
        for idx, Lb in zip(self.block_index, self.block_chol):
            out[idx] = Lb @ (Lb.T @ y[idx])
        return out

    def _woodbury(self, x):
        y = self._rs_solve(x)
        inner = linalg.cho_solve((self.L_C, True), self.rho_mK.T @ y)
        return y - (1.0 - self.eps) * (self.A @ inner)

    def solve(self, x, refine: int = 3) -> np.ndarray:
        """``R_dag^{-1} x`` via Sherman-Morrison-Woodbury.

        Knots that coincide with data locations leave ``R_s`` with
        eigenvalues near ``eps``, so the raw Woodbury solve loses digits;
        a few steps of iterative refinement against :meth:`matvec` restore
        them at the same asymptotic cost.
        """
        x = np.asarray(x, dtype=float)
        sol = self._woodbury(x)
        scale = np.max(np.abs(x)) if x.size else 0.0
        for _ in range(refine):
            r = x - self.matvec(sol)
            if not np.max(np.abs(r), initial=0.0) > 1e-15 * scale:
                break
            sol = sol + self._woodbury(r)
        return sol

    def matvec(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        low = self.W.T @ (self.W @ y)
        return (1.0 - self.eps) * low + self._rs_matvec(y)

    def logdet(self) -> float:
        """``log det R_dag`` from the capacitance, knot and block factors."""
        ld = 2.0 * np.sum(np.log(np.diag(self.L_C))) - 2.0 * np.sum(np.log(np.diag(self.L_KK)))
        if self._diag is not None:
            ld += float(np.sum(np.log(self._diag)))
        else:
            for Lb in self.block_chol:
                ld += 2.0 * np.sum(np.log(np.diag(Lb)))
        if not np.isfinite(ld):
            raise NumericalError("non-finite FSA log-determinant")
        return float(ld)

    def dense(self) -> np.ndarray:
        """Explicit ``R_dag`` (for checking; O(m^2) memory)."""
        R = (1.0 - self.eps) * (self.W.T @ self.W)
        for idx, Lb in zip(self.block_index, self.block_chol):
            R[np.ix_(idx, idx)] += Lb @ Lb.T
        return R

    def precision(self) -> np.ndarray:
        """Explicit ``R_dag^{-1}``."""
        P = self.solve(np.eye(self.m))
        return 0.5 * (P + P.T)

    def precision_column(self, i: int) -> np.ndarray:
        e = np.zeros(self.m)
        e[i] = 1.0
        return self.solve(e)


def fsa_design(coords, K: int, B: int | None = None, rng=None, max_sweeps: int = 200):
    """Knot indices and block labels for ``coords``.

    ``B=None`` uses one block per location.  Block centers come from the
    same cover design with ``B`` points.
    """
    P = _as_points(coords)
    m = P.shape[0]
    K = min(K, np.unique(P, axis=0).shape[0])
    knots = cover_design(P, K, rng=rng, max_sweeps=max_sweeps)
    B = m if B is None else B
    if not 1 <= B <= m:
        raise ValidationError(f"number of blocks must lie in [1, {m}]")
    if B == 1:
        blocks = np.zeros(m, dtype=int)
    elif B == m:
        blocks = np.arange(m)
    else:
        centers = cover_design(P, B, rng=rng, max_sweeps=max_sweeps)
        blocks = assign_blocks(P, P[centers])
    return knots, blocks


def build_fsa(coords, phi: float, nu: float = 1.0, K: int = 100, B: int | None = None,
              eps: float = 1e-10, rng=None, knots=None, blocks=None) -> FsaPlan:
    """Build an :class:`FsaPlan` for the powered exponential correlation."""
    if knots is None or blocks is None:
        k2, b2 = fsa_design(coords, K, B, rng=rng)
        knots = k2 if knots is None else knots
        blocks = b2 if blocks is None else blocks
    return FsaPlan(coords, powered_exponential(phi, nu), knots, blocks, eps)


def fsa_solve(plan: FsaPlan, x) -> np.ndarray:
    return plan.solve(x)


def fsa_logdet(plan: FsaPlan) -> float:
    return plan.logdet()
