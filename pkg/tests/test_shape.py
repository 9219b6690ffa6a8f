import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hporacle.shape import (element_basis_eval, embedding_1d, gauss_rule, mass_1d, restriction_1d, shape_1d,
                            shape_values, stiffness_1d)


def test_shape_examples():
    assert shape_1d(1, 1, 0.0) == (1.0, -1.0)
    v, d = shape_1d(3, 2, 0.5)
    assert v == pytest.approx(0.25) and d == pytest.approx(0.0, abs=1e-15)
    assert shape_1d(4, 3, 0.5)[0] == pytest.approx(0.0, abs=1e-15)


def test_shape_index_and_coordinate_errors():
    with pytest.raises(ValueError):
        shape_1d(0, 2, 0.5)
    with pytest.raises(ValueError):
        shape_1d(4, 2, 0.5)
    with pytest.raises(ValueError):
        shape_1d(1, 2, 1.5)


@pytest.mark.parametrize("p", range(1, 10))
def test_bubbles_vanish_at_endpoints(p):
    v, _ = shape_values(p, [0.0, 1.0])
    np.testing.assert_allclose(v[:2], [[1, 0], [0, 1]])
    np.testing.assert_allclose(v[2:], 0.0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.floats(0.01, 0.99))
def test_derivatives_match_finite_differences(p, xi):
    h = 1e-6
    _, d = shape_values(p, [xi])
    fd = (shape_values(p, [xi + h])[0] - shape_values(p, [xi - h])[0]) / (2 * h)
    np.testing.assert_allclose(d, fd, atol=1e-7)


def test_gauss_examples():
    r = gauss_rule(1)
    np.testing.assert_allclose((r.nodes, r.weights), ([0.5], [1.0]))
    r = gauss_rule(2)
    np.testing.assert_allclose(r.nodes, [0.5 - 1 / (2 * np.sqrt(3)), 0.5 + 1 / (2 * np.sqrt(3))])
    np.testing.assert_allclose(r.weights, [0.5, 0.5])
    r = gauss_rule(3)
    assert abs(r.weights @ r.nodes ** 4 - 0.2) < 1e-14


@pytest.mark.parametrize("n", range(1, 17))
def test_gauss_exactness_degree(n):
    r = gauss_rule(n)
    for k in range(2 * n):
        assert abs(r.weights @ r.nodes ** k - 1 / (k + 1)) < 1e-13


def test_gauss_size_bounds():
    for n in (0, 17):
        with pytest.raises(ValueError):
            gauss_rule(n)


def test_element_basis_examples():
    v, g = element_basis_eval((1, 1), 0.0, 0.0)
    np.testing.assert_allclose(v, [1, 0, 0, 0])
    assert g.shape == (4, 2)
    assert element_basis_eval((2, 2), 0.3, 0.7)[0].size == 9
    v, _ = element_basis_eval((3, 2), 0.3, 0.7)
    assert v.size == 12


def test_partition_of_unity_of_vertices():
    xi = np.linspace(0, 1, 7)
    v, d = shape_values(4, xi)
    np.testing.assert_allclose(v[0] + v[1], 1.0)
    np.testing.assert_allclose(d[0] + d[1], 0.0)


@pytest.mark.parametrize("p", [1, 2, 5, 9])
def test_mass_and_stiffness_against_fine_quadrature(p):
    r = gauss_rule(16)
    v, d = shape_values(p, r.nodes)
    np.testing.assert_allclose(mass_1d(p), (v * r.weights) @ v.T, atol=1e-14)
    np.testing.assert_allclose(stiffness_1d(p), (d * r.weights) @ d.T, atol=1e-13)


@pytest.mark.parametrize("q,p", [(1, 1), (2, 3), (4, 5), (3, 3)])
def test_restriction_reproduces_functions(q, p):
    s = np.linspace(0, 1, 11)
    vs, _ = shape_values(p, s)
    for half in (0, 1):
        R = restriction_1d(q, p, half)
        parent, _ = shape_values(q, 0.5 * (s + half))
        np.testing.assert_allclose(R.T @ vs, parent, atol=1e-13)
    E = embedding_1d(q, p)
    np.testing.assert_allclose(E.T @ shape_values(p, s)[0], shape_values(q, s)[0], atol=1e-15)
    with pytest.raises(ValueError):
        restriction_1d(p + 1, p, 0)
