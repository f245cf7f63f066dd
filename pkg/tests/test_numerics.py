import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from witsenhausen_da.numerics import (
    GaussianDensity, GaussTransform, cross_validate_quadrature, expect_over_density,
    gauss_hermite_expect, gaussian_pdf, grid_convergence, grid_with_spacing, make_grid,
)


def test_grid_is_symmetric_with_exact_zero():
    g = make_grid(60.0, 3001)
    np.testing.assert_array_equal(g.points, -g.points[::-1])
    assert g.points[g.midpoint] == 0.0
    assert g.points[0] == -60.0 and g.points[-1] == 60.0
    assert g.spacing == pytest.approx(0.04)


@pytest.mark.parametrize("n", [2, 4, 1, 10.5])
def test_grid_rejects_even_or_tiny_counts(n):
    with pytest.raises(ValueError):
        make_grid(1.0, n)


def test_grid_with_spacing_covers_span():
    g = grid_with_spacing(7.3, 0.1)
    assert g.half_width >= 7.3
    assert g.spacing == pytest.approx(0.1)


def test_gaussian_pdf_normalised_and_validated():
    g = make_grid(50.0, 5001)
    d = GaussianDensity(0.0, 5.0)
    assert expect_over_density(np.ones(g.n_points), d, g) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        GaussianDensity(0.0, 0.0)
    with pytest.raises(ValueError):
        gaussian_pdf(np.array([np.nan]), d)


def test_moments_trapezoid_and_gauss_hermite():
    d = GaussianDensity(0.0, 5.0)
    g = make_grid(60.0, 3001)
    for f, exact in [(lambda x: x ** 2, 25.0), (lambda x: x ** 4, 3 * 625.0),
                     (np.abs, 5.0 * math.sqrt(2 / math.pi))]:
        trap, gh, gap = cross_validate_quadrature(f, d, g)
        if f is np.abs:
            # the kink at 0 makes both rules only low order
            assert trap == pytest.approx(exact, rel=1e-5)
        else:
            assert trap == pytest.approx(exact, rel=1e-9)
            assert gh == pytest.approx(exact, rel=1e-12)


def test_grid_convergence_reports_change():
    d = GaussianDensity(0.0, 1.0)
    coarse, fine, change = grid_convergence(
        lambda grid: expect_over_density(np.cos(grid.points), d, grid), make_grid(12.0, 241))
    assert change < 1e-12
    assert fine == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_gauss_hermite_expect_polynomial_exact():
    d = GaussianDensity(1.5, 2.0)
    assert gauss_hermite_expect(lambda t: t ** 3, d, 20) == pytest.approx(1.5 ** 3 + 3 * 1.5 * 4, rel=1e-12)


@pytest.fixture(scope="module")
def transform():
    return GaussTransform(grid_with_spacing(30.0, 0.05), 1.0)


def _direct(tr, table, c):
    y = tr.grid.points
    return np.array([np.sum(tr.weights * table * gaussian_pdf(y - ci, GaussianDensity())) for ci in c])


def test_transform_evaluate_matches_direct_sum(transform):
    rng = np.random.default_rng(0)
    y = transform.grid.points
    tables = np.stack([np.ones_like(y), np.tanh(y), np.sin(0.3 * y)])
    c = rng.uniform(-20, 20, 50)
    got = transform.evaluate(transform.forward(tables), c)
    for r in range(3):
        np.testing.assert_allclose(got[r], _direct(transform, tables[r], c), atol=1e-13)


def test_transform_derivatives_match_finite_differences(transform):
    y = transform.grid.points
    s = transform.forward([np.tanh(y)])
    c = np.array([-3.21, 0.0, 0.013, 7.777])
    g0, g1, g2 = transform.evaluate_derivatives(s, c)
    np.testing.assert_allclose(g0, transform.evaluate(s, c), atol=1e-15)
    h = 1e-5
    fd1 = (transform.evaluate(s, c + h) - transform.evaluate(s, c - h)) / (2 * h)
    H = 1e-3
    fd2 = (transform.evaluate(s, c + H) - 2 * transform.evaluate(s, c) + transform.evaluate(s, c - H)) / H ** 2
    np.testing.assert_allclose(g1, fd1, atol=1e-9)
    np.testing.assert_allclose(g2, fd2, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-25, 25), min_size=1, max_size=20))
def test_deposit_is_adjoint_of_evaluate(transform, c):
    """<deposit(c, w), v u> equals <w, evaluate(u)(c)>."""
    c = np.asarray(c)
    rng = np.random.default_rng(len(c))
    w = rng.uniform(0, 1, c.size)
    u = np.cos(0.2 * transform.grid.points)
    lhs = np.dot(transform.deposit(c, w)[0], transform.weights * u)
    rhs = np.dot(w, transform.evaluate(transform.forward([u]), c)[0])
    assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-14)
