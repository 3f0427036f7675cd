import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pucci_kac.symmat import (Control, NotPSDError, SymMatrix, eigen, enumerate_controls, frobenius,
                              optimal_diffusion, pucci_plus, sqrt_factor)

from conftest import random_rotation, random_sym

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def sym2(draw_vals):
    a, b, c = draw_vals
    return np.array([[a, b], [b, c]])


def test_symmetric_storage_is_single():
    s = SymMatrix.from_array([[1.0, 2.0], [2.0, 3.0]])
    assert s.packed.size == 3
    assert np.array_equal(s.array, s.array.T)


def test_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        SymMatrix.from_array([[1.0, 2.0], [0.0, 1.0]])


def test_eigen_diagonal():
    w, q = eigen(SymMatrix.diag(3.0, 1.0))
    assert np.allclose(w, [1.0, 3.0])
    assert np.allclose(np.abs(q), [[0.0, 1.0], [1.0, 0.0]])


def test_eigen_zero():
    w, _ = eigen(SymMatrix.from_array(np.zeros((3, 3))))
    assert np.all(w == 0.0)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_eigen_recovers_constructed_spectrum(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        q = random_rotation(rng, n)
        d = np.sort(rng.normal(size=n))
        w, v = eigen(SymMatrix.from_array(q @ np.diag(d) @ q.T, atol=1e-9))
        assert np.allclose(w, d, atol=1e-9)
        assert np.allclose(v.T @ v, np.eye(n), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.tuples(finite, finite, finite))
def test_eigen_reconstructs(vals):
    s = SymMatrix.from_array(sym2(vals))
    w, q = eigen(s)
    err = np.linalg.norm((q * w) @ q.T - s.array)
    assert err <= 1e-10 * (1 + s.norm())


def test_frobenius_examples():
    assert frobenius(SymMatrix.identity(2), SymMatrix.identity(2)) == 2.0
    assert frobenius(SymMatrix.diag(1.0, 2.0), SymMatrix.diag(3.0, 4.0)) == 11.0


def test_frobenius_against_double_sum():
    rng = np.random.default_rng(1)
    a, b = random_sym(rng, 3), random_sym(rng, 3)
    ref = sum(a[i, j] * b[i, j] for i in range(3) for j in range(3))
    assert abs(frobenius(a, b) - ref) <= 1e-12


def test_pucci_examples():
    assert pucci_plus(SymMatrix.diag(1.0, -1.0), 1.0, 2.0) == 1.0
    assert pucci_plus(SymMatrix.from_array(np.zeros((2, 2))), 1.0, 2.0) == 0.0


def test_pucci_rejects_bad_ellipticity():
    with pytest.raises(ValueError):
        pucci_plus(SymMatrix.identity(2), 2.0, 1.0)


def test_pucci_dominates_discrete_control_set():
    rng = np.random.default_rng(7)
    cs = enumerate_controls(2, 1.0, 2.0, angles=64, levels=2)
    for _ in range(100):
        s = random_sym(rng)
        _, brute = cs.best(s)
        p = pucci_plus(s, 1.0, 2.0)
        assert brute <= p + 1e-12
        assert p - brute <= 0.01 * np.linalg.norm(s)


def test_optimal_diffusion_examples():
    assert optimal_diffusion(SymMatrix.diag(1.0, -1.0), 1.0, 2.0) == SymMatrix.diag(2.0, 1.0)
    assert optimal_diffusion(SymMatrix.identity(2), 1.0, 2.0) == SymMatrix.diag(2.0, 2.0)


def test_optimal_diffusion_attains_pucci():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = random_sym(rng)
        a = optimal_diffusion(s, 0.5, 3.0)
        assert abs(frobenius(a, s) - pucci_plus(s, 0.5, 3.0)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite), st.floats(0, 5))
def test_pucci_invariants(v1, v2, t):
    s, r = sym2(v1), sym2(v2)
    lam, Lam = 1.0, 2.0
    tol = 1e-9 * (1 + np.abs(s).sum() + np.abs(r).sum())
    # positive homogeneity
    assert abs(pucci_plus(t * s, lam, Lam) - t * pucci_plus(s, lam, Lam)) <= tol * (1 + t)
    # subadditivity
    assert pucci_plus(s + r, lam, Lam) <= pucci_plus(s, lam, Lam) + pucci_plus(r, lam, Lam) + tol
    # monotone in the PSD order
    p = r @ r.T
    assert pucci_plus(s + p, lam, Lam) >= pucci_plus(s, lam, Lam) - tol * (1 + np.abs(p).sum())


def test_pucci_equal_bounds_is_scaled_trace():
    rng = np.random.default_rng(5)
    s = random_sym(rng, 3)
    assert math.isclose(pucci_plus(s, 1.5, 1.5), 1.5 * np.trace(s), abs_tol=1e-12)


def test_sqrt_factor_examples():
    c = sqrt_factor(SymMatrix.diag(4.0, 9.0))
    assert np.allclose(c.sigma, np.diag([2.0, 3.0]))
    assert np.allclose(sqrt_factor(SymMatrix.identity(2)).sigma, np.eye(2))


def test_sqrt_factor_round_trip():
    rng = np.random.default_rng(11)
    for n in (2, 3):
        b = rng.normal(size=(n, n))
        a = b @ b.T + 0.1 * np.eye(n)
        c = sqrt_factor(SymMatrix.from_array(a, atol=1e-9))
        assert np.abs(c.sigma @ c.sigma.T - a).max() <= 1e-9


def test_sqrt_factor_rejects_indefinite():
    with pytest.raises(NotPSDError):
        sqrt_factor(SymMatrix.diag(1.0, -1.0))


def test_control_check():
    Control.from_sigma(np.eye(2)).check(1.0, 1.0)
    with pytest.raises(ValueError):
        Control.from_sigma(2 * np.eye(2)).check(1.0, 2.0)


def test_enumerate_counts():
    cs = enumerate_controls(2, 1.0, 2.0, angles=1, levels=2)
    assert len(cs) == 4
    diffs = [c.diffusion.array for c in cs]
    assert any(np.allclose(d, np.eye(2)) for d in diffs)
    assert any(np.allclose(d, 2 * np.eye(2)) for d in diffs)


def test_enumerate_collapses_when_bounds_equal():
    cs = enumerate_controls(2, 1.0, 1.0, angles=16, levels=3)
    assert len(cs) == 1
    assert np.allclose(cs[0].sigma, np.eye(2))


def test_enumerated_controls_are_admissible():
    for c in enumerate_controls(3, 0.5, 2.0, levels=3):
        c.check(0.5, 2.0)


def test_fine_control_set_matches_pucci():
    rng = np.random.default_rng(100)
    cs = enumerate_controls(2, 1.0, 2.0, angles=64, levels=5)
    for _ in range(100):
        s = random_sym(rng)
        p = pucci_plus(s, 1.0, 2.0)
        assert abs(cs.best(s)[1] - p) <= 0.01 * max(abs(p), np.linalg.norm(s))
