"""Howard policy iteration for discrete Bellman equations.

The equation is ``max_k (b_k - A_k u) = 0`` row by row, where each
``A_k`` is a row-diagonally-dominant M-matrix.  All ``K`` operators are
stored stacked in one CSR matrix of shape ``(K n, n)``: row ``k n + i`` is
row ``i`` of ``A_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import bicgstab, spsolve

# a control only replaces the incumbent when it improves the row by more
# than this margin, measured in value units (row residual over diagonal)
# relative to the size of u; keeps Howard from cycling on ties
SWITCH_EPS = 1e-11
# systems up to this size are factorized, larger ones go to Krylov
DIRECT_MAX = 4000
KRYLOV_RTOL = 1e-13


def solve_linear(A: sp.csr_matrix, b: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
    """Solve ``A x = b`` for a diagonally dominant M-matrix.

    Large systems use Jacobi-preconditioned BiCGSTAB (warm-started from
    ``x0``) and fall back to sparse LU if it stalls.
    """
    n = A.shape[0]
    if n <= DIRECT_MAX:
        return np.atleast_1d(spsolve(A.tocsc(), b))
    d = A.diagonal()
    prec = sp.diags(1.0 / d)
    x, info = bicgstab(A, b, x0=x0, M=prec, rtol=KRYLOV_RTOL, atol=0.0, maxiter=50 * int(np.sqrt(n)) + 1000)
    if info != 0 or not np.all(np.isfinite(x)):
        return np.atleast_1d(spsolve(A.tocsc(), b))
    return x


@dataclass
class StackedOperator:
    A: sp.csr_matrix
    b: np.ndarray
    n_controls: int
    n: int
    # positive per-row scaling used for the explicit update (value iteration)
    theta: np.ndarray | None = None
    _diag: np.ndarray | None = None

    def rows(self, policy: np.ndarray) -> np.ndarray:
        return policy * self.n + np.arange(self.n)

    def diagonal(self) -> np.ndarray:
        """``(K, n)`` diagonals of the ``A_k``."""
        if self._diag is None:
            rows = np.arange(self.n_controls * self.n)
            self._diag = np.asarray(self.A[rows, rows % self.n]).reshape(self.n_controls, self.n)
        return self._diag

    def residuals(self, u: np.ndarray) -> np.ndarray:
        """``(K, n)`` array of ``b_k - A_k u``."""
        return (self.b - self.A @ u).reshape(self.n_controls, self.n)

    def greedy(self, u: np.ndarray, current: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Row-wise argmax (lowest index on ties) and the maximal residual."""
        r = self.residuals(u)
        best = np.argmax(r, axis=0)
        top = r[best, np.arange(self.n)]
        if current is not None:
            keep = r[current, np.arange(self.n)]
            diag = self.diagonal()[current, np.arange(self.n)]
            scale = SWITCH_EPS * diag * (1.0 + np.max(np.abs(u), initial=0.0))
            stay = top - keep <= scale
            best = np.where(stay, current, best)
            top = np.where(stay, keep, top)
        return best, top

    def frozen(self, policy: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
        rows = self.rows(policy)
        return self.A[rows], self.b[rows]

    def explicit_step(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``max_k u + theta_k (b_k - A_k u)`` and its argmax."""
        theta = self.theta.reshape(self.n_controls, self.n) if self.theta is not None else 1.0
        cand = u[None, :] + theta * self.residuals(u)
        best = np.argmax(cand, axis=0)
        return cand[best, np.arange(self.n)], best


@dataclass
class HowardResult:
    u: np.ndarray
    policy: np.ndarray
    iterations: int
    policy_stable: bool


def policy_iteration(op: StackedOperator, u0: np.ndarray, max_iter: int,
                     policy0: np.ndarray | None = None) -> HowardResult:
    """Alternate exact policy evaluation and greedy improvement.

    Stops as soon as the greedy policy reproduces the current one.
    """
    u = np.asarray(u0, dtype=float).copy()
    policy = op.greedy(u)[0] if policy0 is None else np.asarray(policy0, dtype=np.int64)
    for it in range(1, max_iter + 1):
        A, b = op.frozen(policy)
        u = solve_linear(A, b, u)
        new, _ = op.greedy(u, policy)
        if np.array_equal(new, policy):
            return HowardResult(u, policy, it, True)
        policy = new
    return HowardResult(u, policy, max_iter, False)
