"""Small dense symmetric matrices, Pucci's maximal operator and the diffusion
controls ``sigma`` with ``sigma sigma^T`` in ``M(lam, Lam)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
PSD_CLAMP = 1e-10
PSD_REJECT = 1e-8


class EigenError(RuntimeError):
    """Raised when the Jacobi sweep budget is exhausted."""


class NotPSDError(ValueError):
    pass


def _check_params(lam: float, Lam: float) -> None:
    if not (lam > 0 and lam <= Lam):
        raise ValueError(f"need 0 < lam <= Lam, got lam={lam!r}, Lam={Lam!r}")


class SymMatrix:
    """Symmetric N x N matrix stored once per (i, j) pair, i <= j."""

    __slots__ = ("dim", "_packed")

    def __init__(self, dim: int, packed):
        packed = np.array(packed, dtype=float)
        if dim < 1 or packed.shape != (dim * (dim + 1) // 2,):
            raise ValueError(f"packed storage for dim={dim} needs {dim * (dim + 1) // 2} entries")
        packed.setflags(write=False)
        self.dim = dim
        self._packed = packed

    @classmethod
    def from_array(cls, a, atol: float = 1e-12) -> "SymMatrix":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.allclose(a, a.T, rtol=0.0, atol=atol * (1.0 + np.abs(a).max(initial=0.0))):
            raise ValueError("matrix is not symmetric")
        n = a.shape[0]
        iu = np.triu_indices(n)
        return cls(n, 0.5 * (a + a.T)[iu])

    @classmethod
    def identity(cls, dim: int) -> "SymMatrix":
        return cls.from_array(np.eye(dim))

    @classmethod
    def diag(cls, *entries: float) -> "SymMatrix":
        return cls.from_array(np.diag(np.asarray(entries, dtype=float)))

    @property
    def packed(self) -> np.ndarray:
        return self._packed

    @property
    def array(self) -> np.ndarray:
        n = self.dim
        out = np.empty((n, n))
        iu = np.triu_indices(n)
        out[iu] = self._packed
        out.T[iu] = self._packed
        return out

    def norm(self) -> float:
        """Frobenius norm ``|S|``."""
        return math.sqrt(frobenius(self, self))

    def __add__(self, other: "SymMatrix") -> "SymMatrix":
        _same_dim(self, other)
        return SymMatrix(self.dim, self._packed + other._packed)

    def __sub__(self, other: "SymMatrix") -> "SymMatrix":
        _same_dim(self, other)
        return SymMatrix(self.dim, self._packed - other._packed)

    def __mul__(self, t: float) -> "SymMatrix":
        return SymMatrix(self.dim, float(t) * self._packed)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return isinstance(other, SymMatrix) and self.dim == other.dim and np.array_equal(self._packed, other._packed)

    def __hash__(self) -> int:
        return hash((self.dim, self._packed.tobytes()))

    def __repr__(self) -> str:
        return f"SymMatrix({self.array.tolist()!r})"


def _same_dim(a: SymMatrix, b: SymMatrix) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def _as_sym(s) -> SymMatrix:
    return s if isinstance(s, SymMatrix) else SymMatrix.from_array(s)


def _off_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def eigen(s) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition.

    Returns ascending eigenvalues ``w`` and orthonormal eigenvectors ``Q``
    (columns) with ``Q diag(w) Q^T = S``.
    """
    s = _as_sym(s)
    a = s.array
    n = s.dim
    q = np.eye(n)
    scale = max(np.abs(a).max(initial=0.0), np.finfo(float).tiny)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = _off_norm(a)
        if off <= JACOBI_TOL * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= 1e-300:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[r, r] = c
                rot[p, r] = sn
                rot[r, p] = -sn
                a = rot.T @ a @ rot
                a[p, r] = a[r, p] = 0.0
                q = q @ rot
    else:
        off = _off_norm(a)
        if off > JACOBI_TOL * scale:
            raise EigenError(
                f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal norm {off:.3e})"
            )
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], q[:, order]


def frobenius(a, b) -> float:
    """``<A, B> = tr(A B^T) = sum_ij A_ij B_ij``."""
    a, b = _as_sym(a), _as_sym(b)
    _same_dim(a, b)
    return float(np.sum(a.array * b.array))


def pucci_plus(s, lam: float, Lam: float) -> float:
    """Pucci's maximal operator from the spectrum of ``S``."""
    _check_params(lam, Lam)
    w, _ = eigen(s)
    return float(Lam * w[w >= 0].sum() + lam * w[w < 0].sum())


def optimal_diffusion(s, lam: float, Lam: float) -> SymMatrix:
    """The maximiser ``A*`` of ``<A, S>`` over ``M(lam, Lam)``."""
    _check_params(lam, Lam)
    w, q = eigen(s)
    levels = np.where(w >= 0, Lam, lam)
    return SymMatrix.from_array((q * levels) @ q.T, atol=1e-9)


@dataclass(frozen=True, eq=False)
class Control:
    """A diffusion matrix ``sigma`` together with ``sigma sigma^T``."""

    sigma: np.ndarray
    diffusion: SymMatrix

    @classmethod
    def from_sigma(cls, sigma) -> "Control":
        sigma = np.array(sigma, dtype=float)
        sigma.setflags(write=False)
        return cls(sigma, SymMatrix.from_array(sigma @ sigma.T, atol=1e-9))

    @property
    def dim(self) -> int:
        return self.diffusion.dim

    def check(self, lam: float, Lam: float) -> None:
        w, _ = eigen(self.diffusion)
        if w[0] < lam - 1e-9 or w[-1] > Lam + 1e-9:
            raise ValueError(f"diffusion spectrum {w} not inside [{lam}, {Lam}]")
        if np.abs(self.sigma @ self.sigma.T - self.diffusion.array).max() > 1e-10:
            raise ValueError("stored diffusion does not match sigma sigma^T")


def sqrt_factor(a) -> Control:
    """Principal (symmetric PSD) square root of ``A`` wrapped as a Control."""
    a = _as_sym(a)
    w, q = eigen(a)
    if w[0] < -PSD_REJECT * (1.0 + a.norm()):
        raise NotPSDError(f"matrix has eigenvalue {w[0]:.3e} < 0")
    w = np.where(w < PSD_CLAMP, np.maximum(w, 0.0), w)
    sigma = (q * np.sqrt(w)) @ q.T
    sigma = 0.5 * (sigma + sigma.T)
    return Control(_frozen(sigma), a)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def rotation2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class ControlSet:
    """Finite subset of the control set ``K``.

    ``angles`` and ``levels`` record how it was enumerated.
    """

    controls: tuple[Control, ...]
    lam: float
    Lam: float
    angles: int
    levels: int
    _sigmas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.controls:
            raise ValueError("control set is empty")
        dims = {c.dim for c in self.controls}
        if len(dims) != 1:
            raise ValueError("controls of mixed dimension")
        object.__setattr__(self, "_sigmas", np.stack([c.sigma for c in self.controls]))

    def __len__(self) -> int:
        return len(self.controls)

    def __iter__(self):
        return iter(self.controls)

    def __getitem__(self, i) -> Control:
        return self.controls[i]

    @property
    def dim(self) -> int:
        return self.controls[0].dim

    @property
    def sigmas(self) -> np.ndarray:
        """``(K, N, N)`` stack of the sigma matrices."""
        return self._sigmas

    def best(self, s) -> tuple[int, float]:
        """Brute-force ``max_A <A, S>`` over the set (lowest index on ties)."""
        s = _as_sym(s).array
        vals = np.array([np.sum(c.diffusion.array * s) for c in self.controls])
        i = int(np.argmax(vals))
        return i, float(vals[i])


def enumerate_controls(dim: int, lam: float, Lam: float, angles: int = 16, levels: int = 2) -> ControlSet:
    """Enumerate ``sqrt(Q diag(e) Q^T)`` over rotations and eigenvalue levels.

    For ``dim == 2`` the eigenbasis ``Q`` runs over rotations by ``k pi / angles``;
    for other dimensions only the axis-aligned basis is used (``angles`` is
    ignored).  Eigenvalue levels are a uniform grid on ``[lam, Lam]`` with both
    endpoints; duplicate diffusion matrices are dropped, keeping first
    occurrence.
    """
    _check_params(lam, Lam)
    if angles < 1 or levels < 2:
        raise ValueError(f"need angles >= 1 and levels >= 2, got {angles}, {levels}")
    grid = np.linspace(lam, Lam, levels)
    bases = [rotation2(k * math.pi / angles) for k in range(angles)] if dim == 2 else [np.eye(dim)]
    diffs = [np.full(dim, lam), np.full(dim, Lam)]
    diffs += [np.array(e) for e in itertools.product(grid, repeat=dim)]
    out: list[Control] = []
    seen: list[np.ndarray] = []
    for q in bases:
        for e in diffs:
            a = (q * e) @ q.T
            a = 0.5 * (a + a.T)
            if any(np.abs(a - b).max() <= 1e-12 * Lam for b in seen):
                continue
            seen.append(a)
            out.append(sqrt_factor(SymMatrix.from_array(a)))
    return ControlSet(tuple(out), lam, Lam, angles, levels)
