from math import factorial

import numpy as np
import pytest

from libraries.errors import StructuralError
from libraries.quadrature import gauss_segment, quadrature_rule


def test_bubble_squared_integral():
    rule = quadrature_rule(6)
    l0, l1, l2 = rule.barycentric.T
    bubble = 27.0 * l0 * l1 * l2
    assert abs(np.sum(rule.weights * bubble**2) - 81.0 / 560.0) <= 1e-15


@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5, 6])
def test_monomials_are_integrated_exactly(degree):
    rule = quadrature_rule(degree)
    x, y = rule.points.T
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            assert np.sum(rule.weights * x**a * y**b) == pytest.approx(exact, abs=1e-14)


def test_weights_and_points():
    rule = quadrature_rule(4)
    assert np.sum(rule.weights) == pytest.approx(0.5, abs=1e-15)
    assert np.all(rule.barycentric >= 0.0)
    assert np.sum(rule.segment_weights) == pytest.approx(1.0, abs=1e-15)


def test_gauss_segment_exactness():
    t, w = gauss_segment(3)
    for k in range(6):
        assert np.sum(w * t**k) == pytest.approx(1.0 / (k + 1), abs=1e-15)


def test_unsupported_degree():
    with pytest.raises(StructuralError):
        quadrature_rule(7)
