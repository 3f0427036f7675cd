import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pucci_kac.geometry import NO_EXIT, Domain, nb_segment_exit_many

BALL = Domain.ball([0.0, 0.0], 1.0)
BOX = Domain.box([0.0, 0.0], [1.0, 1.0])
ANNULUS = Domain.annulus([0.0, 0.0], 0.5, 1.0)
coord = st.floats(-3, 3, allow_nan=False)


def test_contains_examples():
    assert BALL.contains([0.0, 0.0])
    assert not BALL.contains([1.0, 0.0])
    assert not BALL.contains([0.6, 0.8])
    assert not BOX.contains([0.5, 1.0])
    assert not ANNULUS.contains([0.2, 0.0])
    assert ANNULUS.contains([0.75, 0.0])


def test_contains_vectorised():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.5, 0.5]])
    assert BALL.contains(pts).tolist() == [True, False, True]


def test_boundary_distance_examples():
    assert BALL.boundary_distance([0.0, 0.0]) == 1.0
    assert BALL.boundary_distance([2.0, 0.0]) == -1.0
    assert ANNULUS.boundary_distance([0.75, 0.0]) == pytest.approx(0.25)
    assert BOX.boundary_distance([0.25, 0.5]) == pytest.approx(0.25)


def test_bounding_box_examples():
    for d, lo, hi in ((BALL, [-1, -1], [1, 1]), (BOX, [0, 0], [1, 1]), (ANNULUS, [-1, -1], [1, 1])):
        blo, bhi = d.bounding_box()
        assert np.array_equal(blo, lo) and np.array_equal(bhi, hi)


def test_project_examples():
    assert np.allclose(BALL.project_to_boundary([0, 0], [2, 0]), [1, 0])
    assert np.allclose(BOX.project_to_boundary([0.5, 0.5], [0.5, 1.5]), [0.5, 1.0])
    assert np.allclose(ANNULUS.project_to_boundary([0.75, 0], [1.5, 0]), [1, 0])


def test_project_toward_the_hole():
    assert np.allclose(ANNULUS.project_to_boundary([0.75, 0], [0.0, 0.0]), [0.5, 0])


def test_project_requires_exterior_end():
    with pytest.raises(ValueError):
        BALL.project_to_boundary([0, 0], [0.5, 0])


def test_segment_exit_inside_segment():
    t = nb_segment_exit_many(BALL.code, BALL.params, np.zeros((1, 2)), np.array([[0.5, 0.0]]))
    assert t[0] >= NO_EXIT


def test_invalid_constructors():
    with pytest.raises(ValueError):
        Domain.ball([0, 0], -1.0)
    with pytest.raises(ValueError):
        Domain.box([0, 0], [1, -1])
    with pytest.raises(ValueError):
        Domain.annulus([0, 0], 1.0, 0.5)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        BALL.contains([0.0, 0.0, 0.0])


def test_geometry_summaries():
    assert BALL.diameter == 2.0 and BALL.inradius == 1.0
    assert BOX.diameter == pytest.approx(np.sqrt(2)) and BOX.inradius == 0.5
    assert ANNULUS.inradius == 0.25
    assert Domain.ball([0.0, 0.0], 1.0) == BALL


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([BALL, BOX, ANNULUS]), coord, coord)
def test_inside_points_lie_in_bounding_box(d, x, y):
    p = np.array([x, y])
    if d.contains(p):
        lo, hi = d.bounding_box()
        assert np.all(p > lo) and np.all(p < hi)
        assert d.boundary_distance(p) > 0


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([BALL, BOX, ANNULUS]), coord, coord, coord, coord)
def test_projection_lands_on_boundary(d, x, y, u, v):
    a, b = np.array([x, y]), np.array([u, v])
    if d.contains(a) and not d.contains(b):
        q = d.project_to_boundary(a, b)
        assert abs(d.boundary_distance(q)) <= 1e-9
        # first crossing: the open segment before q stays inside
        for s in (0.25, 0.5, 0.9):
            assert d.boundary_distance(a + s * (q - a)) >= -1e-12


def test_three_dimensional_ball():
    d = Domain.ball([0.0, 0.0, 0.0], 2.0)
    assert d.contains([1.0, 1.0, 1.0])
    assert np.allclose(d.project_to_boundary([0, 0, 0], [0, 0, 3]), [0, 0, 2])
