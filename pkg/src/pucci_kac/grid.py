"""Uniform lattice over the closure of a domain, with Dirichlet band.

Nodes are classified as interior (inside ``D``), boundary band (outside
``D`` but within ``h sqrt(N)`` of it; pinned to ``g``) or exterior.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .exprlang import ScalarField
from .geometry import Domain

INTERIOR, BAND, EXTERIOR = 0, 1, 2
ON_BOUNDARY = 1e-9
KIND_NAMES = ("interior", "boundary_band", "exterior")


class GridError(ValueError):
    """Lattice cannot resolve the domain."""


@dataclass(frozen=True, eq=False)
class ValueGrid:
    """Values and policy indices on a lattice ``origin + h * k``.

    Arrays are flat in C order over ``shape``.  ``policy_index`` is ``-1``
    off the interior.
    """

    domain: Domain
    h: float
    origin: np.ndarray
    shape: tuple[int, ...]
    kind: np.ndarray
    values: np.ndarray
    policy_index: np.ndarray
    g: ScalarField | None = None

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def size(self) -> int:
        return self.kind.size

    @property
    def interior(self) -> np.ndarray:
        """Flat indices of interior nodes, ascending."""
        return np.flatnonzero(self.kind == INTERIOR)

    @property
    def band(self) -> np.ndarray:
        return np.flatnonzero(self.kind == BAND)

    def coords(self, idx=None) -> np.ndarray:
        """Coordinates of the nodes with flat indices ``idx`` (all by default)."""
        if idx is None:
            idx = np.arange(self.size)
        sub = np.stack(np.unravel_index(np.asarray(idx), self.shape), axis=-1)
        return self.origin + self.h * sub

    def flat_index(self, sub) -> np.ndarray:
        sub = np.asarray(sub)
        return np.ravel_multi_index(tuple(np.moveaxis(sub, -1, 0)), self.shape)

    def with_values(self, values, policy_index=None) -> "ValueGrid":
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size,):
            raise ValueError("value array does not match the lattice")
        pol = self.policy_index if policy_index is None else np.asarray(policy_index, dtype=np.int64)
        return replace(self, values=values, policy_index=pol)

    def with_interior(self, u_int, policy=None) -> "ValueGrid":
        """Copy with interior values (and policy) replaced, in ``interior`` order."""
        values = self.values.copy()
        values[self.interior] = u_int
        pol = None
        if policy is not None:
            pol = self.policy_index.copy()
            pol[self.interior] = policy
        return self.with_values(values, pol)

    def cell_corners(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Flat corner indices ``(M, 2^N)`` and multilinear weights of each point's cell.

        Points must lie inside the lattice cover.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        s = (p - self.origin) / self.h
        base = np.floor(s).astype(np.int64)
        shape = np.array(self.shape)
        base = np.clip(base, 0, shape - 2)
        frac = s - base
        if np.any(frac < -1e-9) or np.any(frac > 1 + 1e-9):
            raise ValueError("interpolation point outside the lattice cover")
        frac = np.clip(frac, 0.0, 1.0)
        n = self.dim
        offs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
        sub = base[:, None, :] + offs[None, :, :]
        w = np.prod(np.where(offs[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1)
        return self.flat_index(sub), w

    def interpolate(self, points):
        """Multilinear interpolation of the node values."""
        p = np.asarray(points, dtype=float)
        idx, w = self.cell_corners(p.reshape(-1, self.dim))
        out = np.sum(w * self.values[idx], axis=1)
        return float(out[0]) if p.ndim == 1 else out.reshape(p.shape[:-1])

    def value_at(self, x) -> float:
        return self.interpolate(np.asarray(x, dtype=float))

    def node_near(self, x) -> int:
        sub = np.rint((np.asarray(x, dtype=float) - self.origin) / self.h).astype(np.int64)
        sub = np.clip(sub, 0, np.array(self.shape) - 1)
        return int(self.flat_index(sub))

    def to_csv(self, path, include_exterior: bool = False) -> None:
        """Write ``node_x1..node_xN,kind,value,policy_index`` rows in flat order."""
        pts = self.coords()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"node_x{i + 1}" for i in range(self.dim)] + ["kind", "value", "policy_index"])
            for k in range(self.size):
                if self.kind[k] == EXTERIOR and not include_exterior:
                    continue
                w.writerow([repr(float(c)) for c in pts[k]]
                           + [KIND_NAMES[self.kind[k]], repr(float(self.values[k])), int(self.policy_index[k])])


def read_grid_csv(path) -> dict[str, np.ndarray]:
    """Columns of a grid CSV as arrays (``kind`` stays as strings)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(head):
        col = [r[j] for r in body]
        if name == "kind":
            cols[name] = np.array(col)
        elif name == "policy_index":
            cols[name] = np.array(col, dtype=np.int64)
        else:
            cols[name] = np.array(col, dtype=float)
    return cols


def _band_points(domain: Domain, grid_pts: np.ndarray, kind: np.ndarray, shape, band_idx) -> np.ndarray:
    # boundary point on the segment from the nearest interior neighbour
    n = domain.dim
    offs = np.array([o for o in itertools.product((-1, 0, 1), repeat=n) if any(o)], dtype=np.int64)
    subs = np.stack(np.unravel_index(band_idx, shape), axis=-1)
    out = np.empty((band_idx.size, n))
    shape_a = np.array(shape)
    lengths = np.linalg.norm(offs, axis=1)
    order = np.argsort(lengths, kind="stable")
    for r, (b, sub) in enumerate(zip(band_idx, subs)):
        x = grid_pts[b]
        if domain.contains(x):
            # on dD up to roundoff
            out[r] = x
            continue
        for o in offs[order]:
            nb = sub + o
            if np.any(nb < 0) or np.any(nb >= shape_a):
                continue
            j = np.ravel_multi_index(tuple(nb), shape)
            if kind[j] == INTERIOR:
                out[r] = domain.project_to_boundary(grid_pts[j], x)
                break
        else:
            out[r] = domain.closest_boundary_point(x)
    return out


def build_grid(domain: Domain, g: ScalarField, h: float) -> ValueGrid:
    """Lattice aligned with the lower corner of the bounding box of ``D``.

    Band nodes carry ``g`` at the boundary crossing of the segment from
    their nearest interior neighbour (closest boundary point when no
    neighbour is interior); interior values start at 0.  ``h`` at most a
    quarter of the inradius is recommended.
    """
    if not (h > 0 and math.isfinite(h)):
        raise GridError(f"h must be positive, got {h}")
    n = domain.dim
    lo, hi = domain.bounding_box()
    margin = math.ceil(math.sqrt(n)) + 1
    cells = np.ceil((hi - lo) / h - 1e-9).astype(np.int64)
    shape = tuple(int(c) + 1 + 2 * margin for c in cells)
    origin = lo - margin * h
    axes = [origin[i] + h * np.arange(shape[i]) for i in range(n)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    dist = domain.boundary_distance(pts)
    # nodes on dD up to roundoff belong to the band
    inside = domain.contains(pts) & (dist > ON_BOUNDARY * h)
    kind = np.full(pts.shape[0], EXTERIOR, dtype=np.int8)
    kind[inside] = INTERIOR
    kind[~inside & (dist >= -h * math.sqrt(n) - 1e-12)] = BAND
    if not inside.any():
        raise GridError(f"h={h} leaves no interior node in {domain!r}")
    values = np.full(pts.shape[0], np.nan)
    values[inside] = 0.0
    band_idx = np.flatnonzero(kind == BAND)
    values[band_idx] = g(_band_points(domain, pts, kind, shape, band_idx))
    policy = np.full(pts.shape[0], -1, dtype=np.int64)
    policy[inside] = 0
    return ValueGrid(domain, float(h), origin, shape, kind, values, policy, g)
