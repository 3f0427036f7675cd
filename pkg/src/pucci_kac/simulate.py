"""Monte Carlo for the controlled diffusion ``X = x + int sigma dW``.

Paths are advanced with exact Gaussian increments over steps of length
``dt`` (no drift, control frozen over a step), stopped at the first lattice
time outside ``D`` and, optionally, pulled back to the boundary crossing of
the last segment.  Every path draws from its own counter-based stream, so
results are bit-identical for any thread count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from . import exprlang
from .exprlang import ScalarField, rpn_eval
from .geometry import NO_EXIT, Domain, nb_contains, nb_segment_exit
from .rng import as_seed, next_normal_pair, path_state
from .symmat import Control, ControlSet

EXITED, CENSORED, STOPPED, OUTSIDE = 0, 1, 2, 3
REFINEMENTS = ("none", "segment_projection")
CENSOR_WARN_RATE = 0.01


class CensoredPathError(ValueError):
    """Payoff requested for a path that hit ``max_time`` before exiting."""


def set_threads(n: int) -> int:
    """Set the numba worker count, clamped to what the runtime allows."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def default_max_time(domain: Domain, lam: float) -> float:
    """Censoring horizon ``50 diam(D)^2 / lam``."""
    return 50.0 * domain.diameter**2 / lam


@dataclass(frozen=True)
class PathConfig:
    dt: float
    max_time: float
    seed: int = 0
    exit_refinement: str = "segment_projection"
    # normals per step; a step of dt*m with substeps=m sums the same normals
    # as m steps of dt, which couples paths across resolutions
    substeps: int = 1

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.max_time) and self.dt <= self.max_time):
            raise ValueError(f"need 0 < dt <= max_time < inf, got dt={self.dt}, max_time={self.max_time}")
        if self.exit_refinement not in REFINEMENTS:
            raise ValueError(f"exit_refinement must be one of {REFINEMENTS}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        as_seed(self.seed)

    @property
    def max_steps(self) -> int:
        return int(math.floor(self.max_time / self.dt * (1 + 1e-12)))


@dataclass(frozen=True, eq=False)
class Policy:
    """Constant control, or a feedback table over a lattice.

    A feedback policy reads ``controls[table[node]]`` at the lattice node
    nearest to the current state; points off the lattice clamp to its edge.
    """

    controls: tuple[Control, ...]
    table: np.ndarray | None = None
    origin: np.ndarray | None = None
    h: float = 1.0
    shape: tuple[int, ...] = ()
    sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sig = np.ascontiguousarray(np.stack([c.sigma for c in self.controls]), dtype=float)
        object.__setattr__(self, "sigmas", sig)
        if self.table is not None:
            tab = np.ascontiguousarray(self.table, dtype=np.int64)
            if tab.size != int(np.prod(self.shape)) or tab.min() < 0 or tab.max() >= len(self.controls):
                raise ValueError("feedback table does not match its lattice or control list")
            object.__setattr__(self, "table", tab)

    @classmethod
    def constant(cls, control: Control) -> "Policy":
        return cls((control,))

    @classmethod
    def feedback(cls, controls, table, origin, h, shape) -> "Policy":
        controls = tuple(controls.controls if isinstance(controls, ControlSet) else controls)
        return cls(controls, np.asarray(table), np.asarray(origin, dtype=float), float(h), tuple(shape))

    @property
    def is_feedback(self) -> bool:
        return self.table is not None

    @property
    def dim(self) -> int:
        return self.controls[0].dim

    def index_at(self, x) -> int:
        if not self.is_feedback:
            return 0
        return int(self.table[_cell(np.asarray(x, dtype=float), self.origin, self.h, np.array(self.shape))])

    def control_at(self, x) -> Control:
        return self.controls[self.index_at(x)]

    def check(self, lam: float, Lam: float) -> None:
        for c in self.controls:
            c.check(lam, Lam)

    def _kernel_args(self):
        if self.is_feedback:
            return self.sigmas, self.table, self.origin, self.h, np.array(self.shape, dtype=np.int64), True
        return self.sigmas, np.zeros(1, dtype=np.int64), np.zeros(self.dim), 1.0, np.ones(self.dim, dtype=np.int64), False


@njit(cache=True)
def _cell(x, origin, h, shape):
    flat = 0
    for i in range(x.shape[0]):
        k = int(math.floor((x[i] - origin[i]) / h + 0.5))
        k = min(max(k, 0), shape[i] - 1)
        flat = flat * shape[i] + k
    return flat


@njit(cache=True)
def _walk_one(x0, seed, stream, index, kind, dparams, sigmas, table, origin, h, shape, feedback,
              ops, consts, stack, dt, substeps, max_steps, stop_step, refine, exit_pt):
    n = x0.shape[0]
    x = x0.copy()
    for i in range(n):
        exit_pt[i] = x[i]
    if not nb_contains(kind, dparams, x):
        return 0.0, 0.0, OUTSIDE, 0
    state = path_state(seed, stream, index)
    spare = 0.0
    has_spare = False
    z = np.empty(n)
    xn = np.empty(n)
    scale = math.sqrt(dt / substeps)
    acc = 0.0
    k = 0
    while True:
        if k == stop_step:
            for i in range(n):
                exit_pt[i] = x[i]
            return k * dt, acc, STOPPED, k
        if k >= max_steps:
            for i in range(n):
                exit_pt[i] = x[i]
            return k * dt, acc, CENSORED, k
        c = table[_cell(x, origin, h, shape)] if feedback else 0
        fx = rpn_eval(ops, consts, x, stack)
        for j in range(n):
            z[j] = 0.0
        for _ in range(substeps):
            for j in range(n):
                if has_spare:
                    z[j] += spare
                    has_spare = False
                else:
                    state, a, b = next_normal_pair(state)
                    z[j] += a
                    spare = b
                    has_spare = True
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += sigmas[c, i, j] * z[j]
            xn[i] = x[i] + scale * s
        if not nb_contains(kind, dparams, xn):
            th = 1.0
            if refine:
                th = nb_segment_exit(kind, dparams, x, xn)
                if th > 1.0:
                    th = 1.0
            for i in range(n):
                exit_pt[i] = x[i] + th * (xn[i] - x[i])
            return (k + th) * dt, acc + th * dt * fx, EXITED, k + 1
        acc += dt * fx
        for i in range(n):
            x[i] = xn[i]
        k += 1


@njit(parallel=True, cache=True)
def _walk_kernel(starts, seed, stream, index0, kind, dparams, sigmas, table, origin, h, shape, feedback,
                 ops, consts, stack_size, dt, substeps, max_steps, stop_step, refine,
                 tau, exit_pts, fint, status, steps):
    for p in prange(starts.shape[0]):
        stack = np.empty(stack_size)
        t, acc, st, k = _walk_one(starts[p], seed, stream, index0 + p, kind, dparams, sigmas, table,
                                  origin, h, shape, feedback, ops, consts, stack, dt, substeps,
                                  max_steps, stop_step, refine, exit_pts[p])
        tau[p] = t
        fint[p] = acc
        status[p] = st
        steps[p] = k


@dataclass(frozen=True)
class ExitRecord:
    tau: float
    exit_point: np.ndarray
    f_integral: float
    censored: bool
    steps: int
    status: int = EXITED


@dataclass(frozen=True)
class ExitBatch:
    """Per-path results of one kernel launch (arrays indexed by path)."""

    tau: np.ndarray
    exit_points: np.ndarray
    f_integral: np.ndarray
    status: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return self.tau.size

    @property
    def censored(self) -> np.ndarray:
        return self.status == CENSORED

    def record(self, i: int) -> ExitRecord:
        return ExitRecord(float(self.tau[i]), self.exit_points[i].copy(), float(self.f_integral[i]),
                          bool(self.status[i] == CENSORED), int(self.steps[i]), int(self.status[i]))


_ZERO = exprlang.parse("0", 1)


def _zero_field(dim: int) -> ScalarField:
    return _ZERO if dim == 1 else exprlang.parse("0", dim)


def simulate_paths(starts, policy: Policy, domain: Domain, f: ScalarField | None, cfg: PathConfig, *,
                   stream: int = 0, index0: int = 0, stop_time: float | None = None) -> ExitBatch:
    """Run one path per row of ``starts``.

    Path ``p`` uses random stream ``(cfg.seed, stream, index0 + p)``.  With
    ``stop_time`` a path that has not exited by the lattice time nearest to
    it is returned with status ``STOPPED`` at its current position.
    """
    starts = np.ascontiguousarray(np.atleast_2d(np.asarray(starts, dtype=float)))
    n, dim = starts.shape
    if dim != domain.dim or dim != policy.dim:
        raise ValueError(f"dimension mismatch: start {dim}, domain {domain.dim}, policy {policy.dim}")
    f = f if f is not None else _zero_field(dim)
    if f.dim != dim:
        raise ValueError(f"field dimension {f.dim} does not match {dim}")
    stop_step = -1 if stop_time is None else int(round(stop_time / cfg.dt))
    tau = np.empty(n)
    pts = np.empty((n, dim))
    fint = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    steps = np.empty(n, dtype=np.int64)
    sigmas, table, origin, h, shape, feedback = policy._kernel_args()
    _walk_kernel(starts, as_seed(cfg.seed), np.uint64(stream), np.int64(index0), domain.code, domain.params,
                 sigmas, table, origin, float(h), shape, feedback, f.ops, f.consts, f.stack_size,
                 float(cfg.dt), int(cfg.substeps), cfg.max_steps, stop_step,
                 cfg.exit_refinement == "segment_projection", tau, pts, fint, status, steps)
    return ExitBatch(tau, pts, fint, status, steps)


def gaussian_increment(control: Control, dt: float, seed: int = 0, index: int = 0, count: int = 1,
                       stream: int = 0) -> np.ndarray:
    """``count`` successive increments ``sigma sqrt(dt) xi`` from one path stream."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    from .rng import normals

    n = control.dim
    xi = normals(as_seed(seed), np.uint64(stream), np.int64(index), n * count).reshape(count, n)
    return math.sqrt(dt) * xi @ control.sigma.T


def simulate_exit(x, policy: Policy, domain: Domain, f: ScalarField | None, cfg: PathConfig,
                  path_index: int = 0) -> ExitRecord:
    return simulate_paths(np.asarray(x, dtype=float)[None, :], policy, domain, f, cfg,
                          index0=path_index).record(0)


def payoff(rec: ExitRecord, g: ScalarField) -> float:
    """``g(X_tau) + int_0^tau f(X_t) dt`` for one uncensored path."""
    if rec.censored:
        raise CensoredPathError("path was censored at max_time; widen max_time")
    return g(rec.exit_point) + rec.f_integral


def batch_payoffs(batch: ExitBatch, g: ScalarField) -> np.ndarray:
    ok = ~batch.censored
    return g(batch.exit_points[ok]) + batch.f_integral[ok]


def mean_stderr(values) -> tuple[float, float]:
    """Sample mean and standard error by compensated, order-fixed summation."""
    v = np.asarray(values, dtype=float)
    n = v.size
    if n == 0:
        return math.nan, math.nan
    shift = float(v[0])
    mean = shift + math.fsum(v - shift) / n
    if n < 2:
        return mean, math.nan
    d = v - mean
    var = math.fsum(d * d) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    stderr: float
    censor_rate: float
    n_paths: int
    warning: str | None = None

    def __iter__(self):
        return iter((self.mean, self.stderr, self.censor_rate))


def _censor_warning(rate: float) -> str | None:
    if rate > CENSOR_WARN_RATE:
        msg = f"{100 * rate:.2f}% of paths censored at max_time"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return msg
    return None


def _estimate(values, n: int, censored: int) -> ValueEstimate:
    mean, se = mean_stderr(values)
    rate = censored / n
    return ValueEstimate(mean, se, rate, n, _censor_warning(rate))


def estimate_value(x, policy: Policy, domain: Domain, f: ScalarField, g: ScalarField, n_paths: int,
                   cfg: PathConfig) -> ValueEstimate:
    """Monte Carlo estimate of ``E[g(X_tau) + int_0^tau f]`` from ``x``.

    Censored paths are dropped from the mean and reported in ``censor_rate``.
    """
    if n_paths < 2:
        raise ValueError("need at least 2 paths")
    starts = np.repeat(np.asarray(x, dtype=float)[None, :], n_paths, axis=0)
    batch = simulate_paths(starts, policy, domain, f, cfg)
    return _estimate(batch_payoffs(batch, g), n_paths, int(batch.censored.sum()))


@dataclass(frozen=True)
class ExitTimeStats:
    mean_tau: float
    stderr: float
    tail: list[tuple[float, float]]
    bound: float
    censor_rate: float

    @property
    def bound_ok(self) -> bool:
        return self.mean_tau <= self.bound


def exit_time_bound(x, domain: Domain, lam: float) -> float:
    """``(R^2 - |x - c|^2) / (N lam)`` for the circumscribed ball ``B_R(c)``.

    Applying Ito's formula to ``|X - c|^2`` gives this bound on ``E[tau]``
    for every control whose diffusion dominates ``lam I``; it never exceeds
    ``diam(D)^2 / (N lam)``.
    """
    x = np.asarray(x, dtype=float)
    if not domain.contains(x):
        return 0.0
    lo, hi = domain.bounding_box()
    c = domain.center
    if domain.kind == "box":
        r2 = float(np.sum((0.5 * (hi - lo)) ** 2))
    else:
        r2 = float(0.25 * (hi[0] - lo[0]) ** 2)
    return (r2 - float(np.sum((x - c) ** 2))) / (domain.dim * lam)


def exit_time_stats(x, policy: Policy, domain: Domain, cfg: PathConfig, n_paths: int,
                    tail_times=None, lam: float | None = None, tail_factors=None) -> ExitTimeStats:
    """Mean exit time and survival probabilities ``P(tau >= T)``.

    ``tail_times`` defaults to the multiples ``tail_factors`` of the sample
    mean, themselves defaulting to ``2^k``, ``k = -3..5``.  ``lam`` defaults
    to the smallest diffusion eigenvalue in the policy's controls.
    """
    if n_paths < 1000:
        raise ValueError("exit-time statistics need at least 1000 paths")
    starts = np.repeat(np.asarray(x, dtype=float)[None, :], n_paths, axis=0)
    batch = simulate_paths(starts, policy, domain, None, cfg)
    tau = batch.tau
    mean, se = mean_stderr(tau)
    if tail_times is None:
        factors = tail_factors if tail_factors is not None else [2.0**k for k in range(-3, 6)]
        tail_times = [mean * k for k in factors] if mean > 0 else [1.0]
    tail = [(float(t), float(np.count_nonzero(tau >= t) / n_paths) if t > 0 or mean > 0 else 0.0)
            for t in sorted(tail_times)]
    if lam is None:
        from .symmat import eigen

        lam = min(float(eigen(c.diffusion)[0][0]) for c in policy.controls)
    rate = float(batch.censored.mean())
    _censor_warning(rate)
    return ExitTimeStats(mean, se, tail, exit_time_bound(x, domain, lam), rate)


def continuity_probe(x, y, policy: Policy, domain: Domain, cfg: PathConfig, n_paths: int,
                     alpha: float) -> float:
    """Fraction of coupled path pairs with ``|tau_x - tau_y| > alpha``.

    The walks from ``x`` and ``y`` share every increment (same stream).
    """
    starts_x = np.repeat(np.asarray(x, dtype=float)[None, :], n_paths, axis=0)
    starts_y = np.repeat(np.asarray(y, dtype=float)[None, :], n_paths, axis=0)
    tx = simulate_paths(starts_x, policy, domain, None, cfg).tau
    ty = simulate_paths(starts_y, policy, domain, None, cfg).tau
    return float(np.count_nonzero(np.abs(tx - ty) > alpha) / n_paths)


def restart_consistency(x, policy: Policy, domain: Domain, f: ScalarField, g: ScalarField,
                        rho_time: float, cfg: PathConfig, n_paths: int) -> tuple[ValueEstimate, ValueEstimate]:
    """Direct estimate versus the estimate split at ``rho ^ tau``.

    The split estimator runs every path up to ``min(rho_time, tau)``, keeps
    the running integral, and restarts the unfinished ones from where they
    stopped on an independent stream.
    """
    if rho_time < 0:
        raise ValueError("rho_time must be nonnegative")
    direct = estimate_value(x, policy, domain, f, g, n_paths, cfg)
    starts = np.repeat(np.asarray(x, dtype=float)[None, :], n_paths, axis=0)
    first = simulate_paths(starts, policy, domain, f, cfg, stop_time=rho_time)
    total = first.f_integral.copy()
    done = first.status != STOPPED
    ok = first.status != CENSORED
    total[done & ok] += g(first.exit_points[done & ok])
    pending = np.flatnonzero(~done)
    if pending.size:
        rest = simulate_paths(first.exit_points[pending], policy, domain, f, cfg, stream=1, index0=0)
        # leg 2 restarts its clock at 0 on an independent stream
        ok[pending] = rest.status != CENSORED
        total[pending] += rest.f_integral + np.where(rest.status != CENSORED, g(rest.exit_points), 0.0)
    split = _estimate(total[ok], n_paths, int(np.count_nonzero(~ok)))
    return direct, split
