"""Wide-stencil monotone finite differences for ``1/2 P+(D^2 u) + f = 0``.

For an orthogonal pair of lattice directions ``(e, e_perp)`` and second
differences ``d1, d2`` along them, the discrete operator is

    1/2 max over pairs of  sum_i (Lam d_i^+ - lam d_i^-),

i.e. the maximum over pairs and over ``a_i`` in ``{lam, Lam}`` of
``1/2 (a_1 d_1 + a_2 d_2)``.  Near the boundary the second differences use
the crossing of the stencil arm with ``dD`` (Shortley-Weller) and the exact
``g`` there.  Two dimensions only.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .bellman import StackedOperator, policy_iteration
from .dpp_solver import SolveReport
from .exprlang import ScalarField
from .geometry import NO_EXIT, Domain, nb_segment_exit_many
from .grid import INTERIOR, ValueGrid, build_grid

MIN_ARM = 1e-8  # shortest stencil arm, in units of h


@dataclass(frozen=True)
class StencilSet:
    """Orthogonal pairs of primitive lattice vectors approximating angles ``k pi / K``."""

    directions: tuple[tuple[np.ndarray, np.ndarray], ...]
    K: int
    W: int

    def __len__(self) -> int:
        return len(self.directions)

    def spacing(self, h: float) -> np.ndarray:
        """Arm length ``h |e|`` of each pair (both members have the same length)."""
        return np.array([h * float(np.linalg.norm(e)) for e, _ in self.directions])

    @property
    def reach(self) -> int:
        return max(int(np.abs(np.concatenate(pair)).max()) for pair in self.directions)


def _canon(v) -> tuple[int, int]:
    a, b = int(v[0]), int(v[1])
    if a < 0 or (a == 0 and b < 0):
        a, b = -a, -b
    return a, b


def build_stencils(K: int = 8, W: int = 3) -> StencilSet:
    """Pairs ``(e, rot90(e))`` with ``e`` the primitive vector of sup-norm at
    most ``W`` closest in angle to ``k pi / K`` (shorter vector on ties).
    Pairs spanning the same frame are kept once.
    """
    if K < 1 or W < 1:
        raise ValueError("need K >= 1 and W >= 1")
    cands = [(a, b) for a in range(0, W + 1) for b in range(-W, W + 1)
             if (a > 0 or b > 0) and math.gcd(a, abs(b)) == 1]
    angles = np.array([math.atan2(b, a) % math.pi for a, b in cands])
    norms = np.array([math.hypot(a, b) for a, b in cands])
    pairs, seen = [], set()
    for k in range(K):
        th = k * math.pi / K
        err = np.abs(angles - th)
        err = np.minimum(err, math.pi - err)
        order = np.lexsort((norms, np.round(err, 12)))
        e = np.array(cands[order[0]], dtype=np.int64)
        ep = np.array([-e[1], e[0]], dtype=np.int64)
        key = frozenset((_canon(e), _canon(ep)))
        if key in seen:
            continue
        seen.add(key)
        pairs.append((e, ep))
    return StencilSet(tuple(pairs), K, W)


def _arms(grid: ValueGrid, idx: np.ndarray, e: np.ndarray):
    """Arm lengths, neighbour flat indices (-1 at the boundary) and
    boundary points for the arm ``x -> x + h e`` from every node in ``idx``."""
    dom = grid.domain
    X = grid.coords(idx)
    sub = np.stack(np.unravel_index(idx, grid.shape), axis=-1) + e
    nb = grid.flat_index(sub)
    Y = np.ascontiguousarray(grid.coords(nb))
    t = nb_segment_exit_many(dom.code, dom.params, X, Y)
    # a lattice node on dD (up to roundoff) is a crossing at t = 1
    inside = (t >= NO_EXIT) & (grid.kind[nb] == INTERIOR)
    t = np.where(inside, 1.0, np.clip(t, MIN_ARM, 1.0))
    nb = np.where(inside, nb, -1)
    length = grid.h * float(np.linalg.norm(e))
    return t * length, nb, X + t[:, None] * (Y - X)


def _second_diff_operator(grid: ValueGrid, g: ScalarField, e: np.ndarray):
    """Sparse ``D`` and vector ``c`` with ``delta^2_e u = D u_int + c``."""
    idx = grid.interior
    n = idx.size
    pos = np.full(grid.size, -1, dtype=np.int64)
    pos[idx] = np.arange(n)
    sp_, nb_p, q_p = _arms(grid, idx, e)
    sm_, nb_m, q_m = _arms(grid, idx, -e)
    tot = sp_ + sm_
    wp = 2.0 / (sp_ * tot)
    wm = 2.0 / (sm_ * tot)
    c = np.zeros(n)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [-(wp + wm)]
    for w, nb, q in ((wp, nb_p, q_p), (wm, nb_m, q_m)):
        out = nb < 0
        if out.any():
            c[out] += w[out] * g(q[out])
        inn = ~out
        cols_in = pos[nb[inn]]
        if np.any(cols_in < 0):
            raise RuntimeError("stencil arm ended on a non-interior node without crossing the boundary")
        rows.append(np.flatnonzero(inn))
        cols.append(cols_in)
        vals.append(w[inn])
    D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return D, c


@dataclass
class FDOperator:
    grid: ValueGrid
    stencils: StencilSet
    lam: float
    Lam: float
    op: StackedOperator

    def decode(self, k: int) -> tuple[int, float, float]:
        """Control index -> (pair, a_1, a_2)."""
        p, pat = divmod(int(k), 4)
        lv = (self.lam, self.Lam)
        return p, lv[pat >> 1], lv[pat & 1]


def build_fd_operator(grid: ValueGrid, f: ScalarField, stencils: StencilSet, lam: float, Lam: float) -> FDOperator:
    if grid.dim != 2:
        raise ValueError("the wide-stencil oracle is two-dimensional")
    if not 0 < lam <= Lam:
        raise ValueError(f"need 0 < lam <= Lam, got {lam}, {Lam}")
    g = grid.g
    fx = f(grid.coords(grid.interior))
    blocks, rhs = [], []
    for e, ep in stencils.directions:
        D1, c1 = _second_diff_operator(grid, g, e)
        D2, c2 = _second_diff_operator(grid, g, ep)
        for a1 in (lam, Lam):
            for a2 in (lam, Lam):
                blocks.append(-0.5 * (a1 * D1 + a2 * D2))
                rhs.append(fx + 0.5 * (a1 * c1 + a2 * c2))
    A = sp.vstack(blocks, format="csr")
    op = StackedOperator(A, np.concatenate(rhs), len(blocks), grid.interior.size)
    return FDOperator(grid, stencils, float(lam), float(Lam), op)


def directional_second_diff(grid: ValueGrid, node: int, direction, spacing: float) -> float:
    """``(u(x + s v) - 2 u(x) + u(x - s v)) / s^2`` along the unit vector ``v``.

    An arm that leaves ``D`` is cut at the boundary, where ``g`` is used
    (non-uniform three-point formula); other arm ends are interpolated.
    """
    if grid.kind[node] != INTERIOR:
        raise ValueError("second differences are taken at interior nodes")
    v = np.asarray(direction, dtype=float)
    v = v / np.linalg.norm(v)
    x = grid.coords(node)
    u0 = grid.values[node]
    arms = []
    for sgn in (1.0, -1.0):
        y = x + sgn * spacing * v
        t = grid.domain.segment_exit(x, y)
        if t >= NO_EXIT:
            arms.append((spacing, grid.interpolate(y)))
        else:
            t = max(t, MIN_ARM)
            arms.append((t * spacing, float(grid.g(x + t * (y - x)))))
    (sp_, up), (sm_, um) = arms
    return 2.0 / (sp_ + sm_) * ((up - u0) / sp_ + (um - u0) / sm_)


def pucci_residual(grid: ValueGrid, node: int, stencils: StencilSet, lam: float, Lam: float,
                   f: ScalarField) -> float:
    """``1/2 max_pairs sum_i (Lam d_i^+ - lam d_i^-) + f`` at one node."""
    best = -math.inf
    for e, ep in stencils.directions:
        s = grid.h * float(np.linalg.norm(e))
        cand = 0.0
        for d in (directional_second_diff(grid, node, e, s), directional_second_diff(grid, node, ep, s)):
            cand += Lam * max(d, 0.0) - lam * max(-d, 0.0)
        best = max(best, cand)
    return 0.5 * best + float(f(grid.coords(node)))


def residuals(fdop: FDOperator, grid: ValueGrid) -> np.ndarray:
    """Pointwise discrete residual at every interior node (interior order)."""
    return fdop.op.greedy(grid.values[grid.interior])[1]


def solve_policy_iteration(D: Domain, f: ScalarField, g: ScalarField, h: float, K: int = 8,
                           tol: float = 1e-9, max_iter: int = 200, *, lam: float = 1.0, Lam: float = 1.0,
                           W: int = 3, grid: ValueGrid | None = None) -> tuple[ValueGrid, SolveReport]:
    """Howard iteration: freeze the maximizing pair and coefficients per node,
    solve the linear system exactly, re-maximize; stop on a stable policy."""
    t0 = time.perf_counter()
    grid = grid if grid is not None else build_grid(D, g, h)
    stencils = build_stencils(K, W)
    fdop = build_fd_operator(grid, f, stencils, lam, Lam)
    res = policy_iteration(fdop.op, grid.values[grid.interior], max_iter)
    best, top = fdop.op.greedy(res.u)
    out = grid.with_interior(res.u, best)
    # residual divided by the diagonal: the change of one Jacobi step
    diag = fdop.op.diagonal()[best, np.arange(best.size)]
    final = float(np.max(np.abs(top / diag))) if top.size else 0.0
    report = SolveReport(res.iterations, final, 0.0, bool(res.policy_stable and final <= tol), "howard", [],
                         time.perf_counter() - t0)
    return out, report
