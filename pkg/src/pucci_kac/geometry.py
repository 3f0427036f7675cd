"""Bounded open domains: balls, boxes and annuli.

All three kinds satisfy the exterior cone condition and have closed-form
signed distances.  The scalar kernels are numba-compiled so the path
simulator can call them from inside its loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

BALL, BOX, ANNULUS = 0, 1, 2
KINDS = {"ball": BALL, "box": BOX, "annulus": ANNULUS}
CLOSURE_EPS = 1e-12
# returned by segment_exit when the segment never leaves D
NO_EXIT = 2.0


@njit(cache=True)
def _norm_from(p, x, n):
    s = 0.0
    for i in range(n):
        d = x[i] - p[i]
        s += d * d
    return math.sqrt(s)


@njit(cache=True)
def nb_signed_distance(kind, p, x):
    n = x.shape[0]
    if kind == BALL:
        return p[n] - _norm_from(p, x, n)
    if kind == BOX:
        inside = np.inf
        outside = 0.0
        for i in range(n):
            lo = p[i]
            hi = p[n + i]
            inside = min(inside, x[i] - lo, hi - x[i])
            if x[i] < lo:
                outside += (lo - x[i]) ** 2
            elif x[i] > hi:
                outside += (x[i] - hi) ** 2
        if outside > 0.0:
            return -math.sqrt(outside)
        return inside
    r = _norm_from(p, x, n)
    return min(r - p[n], p[n + 1] - r)


@njit(cache=True)
def nb_contains(kind, p, x):
    n = x.shape[0]
    if kind == BALL:
        s = 0.0
        for i in range(n):
            d = x[i] - p[i]
            s += d * d
        return s < p[n] * p[n]
    if kind == BOX:
        for i in range(n):
            if not (p[i] < x[i] < p[n + i]):
                return False
        return True
    s = 0.0
    for i in range(n):
        d = x[i] - p[i]
        s += d * d
    return p[n] * p[n] < s < p[n + 1] * p[n + 1]


@njit(cache=True)
def _sphere_roots(c, r, a, b, n):
    # roots of |a + t (b - a) - c|^2 = r^2, ascending; nan when none
    qa = 0.0
    qb = 0.0
    qc = -r * r
    for i in range(n):
        d = b[i] - a[i]
        f = a[i] - c[i]
        qa += d * d
        qb += 2.0 * f * d
        qc += f * f
    if qa == 0.0:
        return np.nan, np.nan
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0.0:
        return np.nan, np.nan
    sq = math.sqrt(disc)
    q = -0.5 * (qb + math.copysign(sq, qb))
    if q == 0.0:
        return 0.0, 0.0
    t1 = q / qa
    t2 = qc / q
    return min(t1, t2), max(t1, t2)


@njit(cache=True)
def _segment_exit_closed(kind, p, a, b):
    n = a.shape[0]
    if kind == BOX:
        t = np.inf
        for i in range(n):
            d = b[i] - a[i]
            if d > 0.0:
                t = min(t, (p[n + i] - a[i]) / d)
            elif d < 0.0:
                t = min(t, (p[i] - a[i]) / d)
        return t
    if kind == BALL:
        _, hi = _sphere_roots(p, p[n], a, b, n)
        return hi
    _, hi = _sphere_roots(p, p[n + 1], a, b, n)
    t = hi
    lo_in, _ = _sphere_roots(p, p[n], a, b, n)
    if lo_in >= 0.0 and lo_in < t:
        t = lo_in
    return t


@njit(cache=True)
def nb_segment_exit(kind, p, a, b):
    """First segment parameter ``t`` in ``[0, 1]`` at which ``a + t (b - a)``
    hits ``dD``; ``NO_EXIT`` when the whole segment stays in ``D``.
    ``a`` is assumed inside ``D``.
    """
    n = a.shape[0]
    t = _segment_exit_closed(kind, p, a, b)
    if not (t >= 0.0) or t > 1.0:
        if nb_contains(kind, p, b):
            return NO_EXIT
        t = 1.0
    pt = np.empty(n)
    for i in range(n):
        pt[i] = a[i] + t * (b[i] - a[i])
    if abs(nb_signed_distance(kind, p, pt)) <= 1e-9:
        return t
    # bisection fallback on [0, t]: invariant lo inside, hi not inside
    lo = 0.0
    hi = t
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        for i in range(n):
            pt[i] = a[i] + mid * (b[i] - a[i])
        if nb_contains(kind, p, pt):
            lo = mid
        else:
            hi = mid
    return hi


@njit(cache=True)
def nb_segment_exit_many(kind, p, a, b):
    out = np.empty(a.shape[0])
    for k in range(a.shape[0]):
        out[k] = nb_segment_exit(kind, p, a[k], b[k])
    return out


@njit(cache=True)
def nb_signed_distance_many(kind, p, x):
    out = np.empty(x.shape[0])
    for k in range(x.shape[0]):
        out[k] = nb_signed_distance(kind, p, x[k])
    return out


@njit(cache=True)
def nb_contains_many(kind, p, x):
    out = np.empty(x.shape[0], dtype=np.bool_)
    for k in range(x.shape[0]):
        out[k] = nb_contains(kind, p, x[k])
    return out


@dataclass(frozen=True, eq=False)
class Domain:
    """Open bounded domain of kind ``ball``, ``box`` or ``annulus``.

    ``params`` is the flat parameter vector used by the compiled kernels:
    ``[center..., radius]``, ``[lo..., hi...]`` or ``[center..., r_inner, r_outer]``.
    """

    kind: str
    dim: int
    params: np.ndarray

    @classmethod
    def ball(cls, center, radius: float) -> "Domain":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        if not radius > 0:
            raise ValueError(f"ball radius must be positive, got {radius}")
        return cls._make("ball", c.size, np.append(c, float(radius)))

    @classmethod
    def box(cls, lo, hi) -> "Domain":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ValueError(f"box needs lo < hi componentwise, got {lo} and {hi}")
        return cls._make("box", lo.size, np.concatenate([lo, hi]))

    @classmethod
    def annulus(cls, center, r_inner: float, r_outer: float) -> "Domain":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        if not 0 < r_inner < r_outer:
            raise ValueError(f"annulus needs 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
        return cls._make("annulus", c.size, np.concatenate([c, [r_inner, r_outer]]))

    @classmethod
    def _make(cls, kind, dim, params):
        params = np.ascontiguousarray(params, dtype=float)
        params.setflags(write=False)
        return cls(kind, int(dim), params)

    @property
    def code(self) -> int:
        return KINDS[self.kind]

    @property
    def center(self) -> np.ndarray:
        if self.kind == "box":
            return 0.5 * (self.params[: self.dim] + self.params[self.dim :])
        return self.params[: self.dim].copy()

    def _points(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"point dimension {x.shape[-1:]} does not match domain dimension {self.dim}")
        return np.ascontiguousarray(x.reshape(-1, self.dim)), x.ndim == 1

    def contains(self, x):
        """Strict (open-set) membership; vectorised over leading axes."""
        pts, single = self._points(x)
        out = nb_contains_many(self.code, self.params, pts)
        return bool(out[0]) if single else out.reshape(np.shape(x)[:-1])

    def boundary_distance(self, x):
        """Signed distance to the boundary: positive inside, negative outside."""
        pts, single = self._points(x)
        out = nb_signed_distance_many(self.code, self.params, pts)
        return float(out[0]) if single else out.reshape(np.shape(x)[:-1])

    def in_closure(self, x):
        d = self.boundary_distance(x)
        return d >= -CLOSURE_EPS

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.dim
        if self.kind == "box":
            return self.params[:n].copy(), self.params[n:].copy()
        r = self.params[n] if self.kind == "ball" else self.params[n + 1]
        c = self.params[:n]
        return c - r, c + r

    @property
    def diameter(self) -> float:
        lo, hi = self.bounding_box()
        if self.kind == "box":
            return float(np.linalg.norm(hi - lo))
        return float(hi[0] - lo[0])

    @property
    def inradius(self) -> float:
        n = self.dim
        if self.kind == "ball":
            return float(self.params[n])
        if self.kind == "box":
            return float(0.5 * np.min(self.params[n:] - self.params[:n]))
        return float(0.5 * (self.params[n + 1] - self.params[n]))

    def segment_exit(self, x_in, x_out) -> float:
        """Segment parameter of the first boundary crossing from ``x_in``."""
        a, _ = self._points(x_in)
        b, _ = self._points(x_out)
        if not self.contains(a[0]):
            raise ValueError(f"segment start {a[0]} is not inside the domain")
        return float(nb_segment_exit(self.code, self.params, a[0], b[0]))

    def project_to_boundary(self, x_in, x_out) -> np.ndarray:
        """Intersection of the segment ``[x_in, x_out]`` with ``dD``."""
        a = np.asarray(x_in, dtype=float)
        b = np.asarray(x_out, dtype=float)
        if self.contains(b):
            raise ValueError(f"segment end {b} is inside the domain")
        t = self.segment_exit(a, b)
        return a + t * (b - a)

    def closest_boundary_point(self, x) -> np.ndarray:
        """Nearest point of ``dD`` to an exterior point ``x``."""
        x = np.asarray(x, dtype=float)
        n = self.dim
        if self.kind == "box":
            return np.clip(x, self.params[:n], self.params[n:])
        c = self.params[:n]
        d = x - c
        r = np.linalg.norm(d)
        if r == 0.0:
            d, r = np.eye(n)[0], 1.0
        if self.kind == "ball":
            return c + self.params[n] * d / r
        r_in, r_out = self.params[n], self.params[n + 1]
        target = r_in if abs(r - r_in) < abs(r - r_out) else r_out
        return c + target * d / r

    def describe(self) -> dict:
        n = self.dim
        p = self.params
        if self.kind == "ball":
            return {"center": p[:n].tolist(), "radius": float(p[n])}
        if self.kind == "box":
            return {"lo": p[:n].tolist(), "hi": p[n:].tolist()}
        return {"center": p[:n].tolist(), "r_inner": float(p[n]), "r_outer": float(p[n + 1])}

    def __eq__(self, other) -> bool:
        return isinstance(other, Domain) and self.kind == other.kind and np.array_equal(self.params, other.params)

    def __hash__(self) -> int:
        return hash((self.kind, self.params.tobytes()))

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items())
        return f"Domain.{self.kind}({args})"
