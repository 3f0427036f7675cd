"""Semi-Lagrangian dynamic-programming solver on a lattice.

One step of the dynamic programming principle over a time ``dt`` is
approximated at each interior node ``x`` by a symmetric quadrature along
the columns ``sigma_i`` of each control: with ``v = sigma_i / |sigma_i|``
the points ``x +- a v`` receive weights

    w+ = dt |sigma_i|^2 / (a+ (a+ + a-)),   w- = dt |sigma_i|^2 / (a- (a+ + a-)),

so that ``sum w (u(x +- a v) - u(x))`` is ``dt/2 |sigma_i|^2`` times a
second difference of ``u`` along ``v``.  Away from the boundary
``a+ = a- = R`` with ``R = max(sqrt(N dt) |sigma_i|, m h)``, ``m`` of order ``h^(-1/2)``; at the natural
reach this is the ``1/(2N)`` rule that matches the first two moments of the
Gaussian increment.  Points whose interpolation cell is not entirely inside
``D``, or whose ray leaves ``D`` first, are replaced by the boundary
crossing of the ray, which carries ``g`` exactly (the one-dimensional exit
law of the step).  Interior points use multilinear interpolation.

Each update is ``u + theta (sum w (u_pt - u) + dt f)`` with ``theta``
``min(1, 1 / sum w)``, which keeps all weights nonnegative (monotone
scheme).  The fixed point does not depend on ``dt``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bellman import StackedOperator, policy_iteration
from .exprlang import ScalarField
from .geometry import nb_segment_exit_many
from .grid import INTERIOR, ValueGrid
from .simulate import PathConfig, Policy, ValueEstimate, estimate_value
from .symmat import ControlSet

# reach floor R = m h with m = ceil(REACH_SCALE / sqrt(h)), so that both
# the interpolation error (h / R)^2 and the truncation error R^2 are O(h)
REACH_SCALE = 0.6
# corners carrying less interpolation weight than this are ignored when
# deciding whether a cell lies inside D
CORNER_EPS = 1e-12
METHODS = ("howard", "value")


def default_dt(h: float, dim: int, Lam: float) -> float:
    """``h^2 / (N Lam)``: the natural quadrature reach is then at most ``h``."""
    return h * h / (dim * Lam)


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    dt_dpp: float
    converged: bool
    method: str = "howard"
    residuals: list[float] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class DPPOperator:
    """Stacked per-control operators of the update on one grid."""

    grid: ValueGrid
    controls: ControlSet
    dt: float
    reach_multiple: float
    op: StackedOperator

    @property
    def n(self) -> int:
        return self.op.n


def reach_multiple_for(h: float) -> int:
    return max(2, math.ceil(REACH_SCALE / math.sqrt(h) - 1e-9))


def _check_reach(grid: ValueGrid, controls: ControlSet, dt: float, reach_multiple: float) -> None:
    if not dt > 0:
        raise ValueError("dt_dpp must be positive")
    if reach_multiple < 1:
        raise ValueError("reach multiple must be at least 1")
    natural = math.sqrt(grid.dim * controls.Lam * dt)
    if natural > 2 * grid.h * reach_multiple:
        raise ValueError(f"dt_dpp={dt} gives quadrature reach {natural:.3g} beyond "
                         f"2 h m = {2 * grid.h * reach_multiple:.3g}")


def build_operator(grid: ValueGrid, controls: ControlSet, f: ScalarField, dt_dpp: float,
                   reach_multiple: float | None = None) -> DPPOperator:
    if reach_multiple is None:
        reach_multiple = reach_multiple_for(grid.h)
    _check_reach(grid, controls, dt_dpp, reach_multiple)
    dom = grid.domain
    idx = grid.interior
    n = idx.size
    pos = np.full(grid.size, -1, dtype=np.int64)
    pos[idx] = np.arange(n)
    X = grid.coords(idx)
    fx = f(X)
    ray = 1.01 * dom.diameter + grid.h
    floor = reach_multiple * grid.h
    rows_all, cols_all, vals_all, b_all, theta_all = [], [], [], [], []
    g_field = _boundary_g(grid)
    for k, ctrl in enumerate(controls):
        diag = np.zeros(n)
        b = dt_dpp * fx
        rr, cc, vv = [], [], []
        for i in range(grid.dim):
            col = ctrl.sigma[:, i]
            s = float(np.linalg.norm(col))
            if s == 0.0:
                continue
            v = col / s
            c = dt_dpp * s * s
            R = max(math.sqrt(grid.dim * dt_dpp) * s, floor)
            sides = []
            for d in (v, -v):
                t = nb_segment_exit_many(dom.code, dom.params, X, np.ascontiguousarray(X + ray * d))
                a_exit = np.minimum(t, 1.0) * ray
                corners = np.zeros((n, 2**grid.dim), dtype=np.int64)
                weights = np.zeros((n, 2**grid.dim))
                a = a_exit.copy()
                use = np.zeros(n, dtype=bool)
                # largest reach in R, R - h, ... whose cell lies in D; the
                # boundary crossing when the ray exits first or none does
                pending = a_exit > R
                for r in _reaches(R, grid.h):
                    if not pending.any():
                        break
                    sel = np.flatnonzero(pending)
                    ci, cw = grid.cell_corners(X[sel] + r * d)
                    ok = np.all((grid.kind[ci] == INTERIOR) | (cw <= CORNER_EPS), axis=1)
                    hit = sel[ok]
                    corners[hit] = ci[ok]
                    weights[hit] = cw[ok]
                    a[hit] = r
                    use[hit] = True
                    pending[hit] = False
                q = X + a_exit[:, None] * d
                sides.append((use, a, corners, weights, q))
            a_p, a_m = sides[0][1], sides[1][1]
            for (use, a, corners, weights, q), other in ((sides[0], a_m), (sides[1], a_p)):
                w = c / (a * (a + other))
                diag += w
                hit = ~use
                if hit.any():
                    b[hit] += w[hit] * g_field(q[hit])
                if use.any():
                    rows = np.repeat(np.flatnonzero(use), corners.shape[1])
                    cols = pos[corners[use]].ravel()
                    vals = -(w[use][:, None] * weights[use]).ravel()
                    keep = cols >= 0
                    rr.append(rows[keep])
                    cc.append(cols[keep])
                    vv.append(vals[keep])
        rr.append(np.arange(n))
        cc.append(np.arange(n))
        vv.append(diag)
        rows_all.append(np.concatenate(rr) + k * n)
        cols_all.append(np.concatenate(cc))
        vals_all.append(np.concatenate(vv))
        b_all.append(b)
        theta_all.append(np.minimum(1.0, 1.0 / diag))
    A = sp.csr_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                      shape=(len(controls) * n, n))
    A.sum_duplicates()
    op = StackedOperator(A, np.concatenate(b_all), len(controls), n, np.concatenate(theta_all))
    return DPPOperator(grid, controls, float(dt_dpp), float(reach_multiple), op)


def _reaches(R: float, h: float) -> list[float]:
    k = max(0, math.ceil(R / h - 1e-9) - 1)
    return [R] + [R - j * h for j in range(1, k + 1) if R - j * h >= 0.5 * h]


def _boundary_g(grid: ValueGrid):
    g = grid.g
    if g is None:
        raise ValueError("grid carries no boundary data; build it with build_grid")
    return g


def dpp_update(grid: ValueGrid, controls: ControlSet, f: ScalarField, dt_dpp: float, *,
               operator: DPPOperator | None = None,
               reach_multiple: float | None = None) -> tuple[ValueGrid, float]:
    """One Jacobi sweep of the update at every interior node.

    Returns the new grid (values and maximizing control indices) and the
    sup-norm of the change.
    """
    op = operator or build_operator(grid, controls, f, dt_dpp, reach_multiple)
    u = grid.values[grid.interior]
    new, best = op.op.explicit_step(u)
    res = float(np.max(np.abs(new - u))) if u.size else 0.0
    return grid.with_interior(new, best), res


def initial_below(grid: ValueGrid, ell: float, max_time: float) -> ValueGrid:
    """Interior start at ``-ell max_time``, below the solution."""
    return grid.with_interior(np.full(grid.interior.size, -ell * max_time))


def solve(grid: ValueGrid, controls: ControlSet, f: ScalarField, dt_dpp: float | None = None,
          tol: float = 1e-7, max_iter: int = 100_000, *, method: str = "howard",
          reach_multiple: float | None = None,
          operator: DPPOperator | None = None) -> tuple[ValueGrid, SolveReport]:
    """Solve the discrete dynamic programming equation.

    ``method="howard"`` runs policy iteration (exact solves of the frozen
    linear systems); ``method="value"`` repeats ``dpp_update`` from the
    grid's current values.  Either way ``final_residual`` is the sup-norm
    change of one more update.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if dt_dpp is None:
        dt_dpp = default_dt(grid.h, grid.dim, controls.Lam)
    t0 = time.perf_counter()
    dop = operator or build_operator(grid, controls, f, dt_dpp, reach_multiple)
    op = dop.op
    u = grid.values[grid.interior].copy()
    history: list[float] = []
    if method == "howard":
        res = policy_iteration(op, u, max_iter)
        u = res.u
        iters = res.iterations
        stable = res.policy_stable
    else:
        stable = True
        iters = 0
        while iters < max_iter:
            new, _ = op.explicit_step(u)
            r = float(np.max(np.abs(new - u)))
            u = new
            iters += 1
            history.append(r)
            if r <= tol:
                break
    step, best = op.explicit_step(u)
    final = float(np.max(np.abs(step - u))) if u.size else 0.0
    out = grid.with_interior(u, best)
    report = SolveReport(iters, final, float(dt_dpp), bool(stable and final <= tol), method, history,
                         time.perf_counter() - t0)
    return out, report


def extract_policy(grid: ValueGrid, controls: ControlSet) -> Policy:
    """Feedback policy reading ``policy_index`` at the nearest lattice node."""
    table = np.where(grid.kind == INTERIOR, grid.policy_index, 0)
    return Policy.feedback(controls, table, grid.origin, grid.h, grid.shape)


@dataclass(frozen=True)
class Certification:
    lower: ValueEstimate
    grid_value: float

    @property
    def gap(self) -> float:
        return self.grid_value - self.lower.mean

    def passes(self, C: float, h: float, dt: float) -> bool:
        return abs(self.gap) <= 3 * self.lower.stderr + C * (h + math.sqrt(dt))


def mc_certify(x, grid: ValueGrid, controls: ControlSet, f: ScalarField, g: ScalarField, D, n_paths: int,
               cfg: PathConfig) -> Certification:
    """Monte Carlo value of the extracted feedback policy next to the grid value."""
    pol = extract_policy(grid, controls)
    est = estimate_value(x, pol, D, f, g, n_paths, cfg)
    return Certification(est, grid.value_at(x))
