import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfed.geometry import (
    Box,
    DimensionMismatchError,
    L2Ball,
    diameter,
    project,
    sample_point,
)


def ball(r=5.0, dim=2):
    return L2Ball(np.zeros(dim), r)


class TestProject:
    def test_inside_point_unchanged(self):
        out = project(ball(), [3.0, 4.0])
        assert np.array_equal(out, [3.0, 4.0])

    def test_radial_scaling_to_boundary(self):
        out = project(ball(), [6.0, 8.0])
        assert np.allclose(out, [3.0, 4.0], rtol=0, atol=1e-15)

    def test_box_per_coordinate_clamp(self):
        box = Box([0.0, 0.0], [1.0, 1.0])
        assert np.array_equal(project(box, [2.0, -1.0]), [1.0, 0.0])

    def test_dimension_mismatch_is_structured(self):
        with pytest.raises(DimensionMismatchError) as exc:
            project(ball(dim=3), [1.0, 2.0])
        assert exc.value.expected == 3
        assert exc.value.actual == 2

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            project(ball(), [np.nan, 0.0])
        with pytest.raises(ValueError):
            project(ball(), [np.inf, 0.0])


class TestDiameter:
    def test_mnist_scale_ball(self):
        assert diameter(L2Ball(np.zeros(3), 0.05)) == pytest.approx(0.1, rel=0)

    def test_box_pythagoras(self):
        assert diameter(Box([0.0, 0.0], [3.0, 4.0])) == pytest.approx(5.0, rel=0)

    def test_unit_ball(self):
        assert diameter(L2Ball(np.zeros(4), 1.0)) == 2.0


class TestValidation:
    def test_bad_radius(self):
        for r in (0.0, -1.0, np.nan):
            with pytest.raises(ValueError):
                L2Ball(np.zeros(2), r)

    def test_bad_box_bounds(self):
        with pytest.raises(ValueError):
            Box([0.0, 1.0], [1.0, 1.0])

    def test_box_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            Box([0.0], [1.0, 2.0])


@pytest.mark.parametrize("domain", [
    L2Ball(np.zeros(3), 1.7),
    L2Ball(np.array([0.3, -0.2, 0.1]), 1.7),
    Box(np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 2.5])),
], ids=["ball", "ball-offcenter", "box"])
class TestProjectionProperties:
    def test_idempotent(self, domain):
        # Origin-centered balls and boxes reproject within 1 ulp; an
        # off-center ball pays one extra rounding for the center shift.
        off_center = isinstance(domain, L2Ball) and np.any(domain.center != 0)
        ulps = 2 if off_center else 1
        rng = np.random.default_rng(11)
        for _ in range(1000):
            x = rng.normal(0, 3, size=3)
            p1 = project(domain, x)
            p2 = project(domain, p1)
            assert np.all(np.abs(p2 - p1) <= ulps * np.spacing(np.abs(p1)))

    def test_non_expansive(self, domain):
        rng = np.random.default_rng(12)
        for _ in range(10_000):
            x = rng.normal(0, 4, size=3)
            y = rng.normal(0, 4, size=3)
            lhs = np.linalg.norm(project(domain, x) - project(domain, y))
            rhs = np.linalg.norm(x - y)
            assert lhs <= rhs * (1 + 1e-12)

    def test_projection_optimality(self, domain):
        # <x - Px, y - Px> <= tol for every feasible y: Px is the nearest point.
        rng = np.random.default_rng(13)
        D = diameter(domain)
        for _ in range(1000):
            x = rng.normal(0, 4, size=3)
            y = sample_point(domain, rng)
            px = project(domain, x)
            inner = float((x - px) @ (y - px))
            assert inner <= 1e-9 * np.linalg.norm(x) * D

    def test_sample_point_feasible(self, domain):
        rng = np.random.default_rng(14)
        for _ in range(200):
            assert domain.contains(sample_point(domain, rng))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2))
def test_ball_projection_feasible_and_fixed_inside(entries):
    dom = ball(r=2.0)
    p = project(dom, entries)
    assert dom.contains(p, tol=1e-12)
    if np.linalg.norm(entries) <= 2.0:
        assert np.array_equal(p, np.asarray(entries))
