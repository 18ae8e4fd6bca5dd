"""Quadrature rules on the reference triangle and the reference segment."""

from dataclasses import dataclass

import numpy as np

from libraries.errors import StructuralError

SUPPORTED_DEGREES = (1, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on the reference triangle and the unit segment.

    Triangle points are reference coordinates (xi, eta) on the triangle
    with vertices (0, 0), (1, 0), (0, 1); the weights sum to 1/2.
    Segment points lie in [0, 1]; the weights sum to 1.
    """

    degree: int
    points: np.ndarray
    weights: np.ndarray
    segment_points: np.ndarray
    segment_weights: np.ndarray

    @property
    def barycentric(self) -> np.ndarray:
        """Barycentric coordinates (lambda0, lambda1, lambda2) of the triangle points."""
        xi, eta = self.points[:, 0], self.points[:, 1]
        return np.column_stack([1.0 - xi - eta, xi, eta])


def gauss_segment(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule mapped to [0, 1].

    Args:
        n_points (int): Number of points.

    Returns:
        Points and weights on the unit segment.
    """
    x, w = np.polynomial.legendre.leggauss(n_points)
    return 0.5 * (x + 1.0), 0.5 * w


def quadrature_rule(degree: int) -> QuadratureRule:
    """Build a rule exact for polynomials up to ``degree``.

    The triangle rule is the collapsed (conical) product of Gauss-Legendre
    rules: x = u, y = v (1 - u), with the Jacobian (1 - u) folded into the
    weights. A polynomial of degree d becomes degree d + 1 in u and d in v.

    Args:
        degree (int): Requested exactness degree, 1 to 6.

    Returns:
        The quadrature rule.
    """
    if degree not in SUPPORTED_DEGREES:
        raise StructuralError(f"unsupported quadrature degree {degree}")
    n = (degree + 3) // 2
    u, wu = gauss_segment(n)
    v, wv = gauss_segment(n)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ww = np.outer(wu, wv) * (1.0 - uu)
    points = np.column_stack([uu.ravel(), (vv * (1.0 - uu)).ravel()])
    seg_x, seg_w = gauss_segment((degree + 2) // 2)
    return QuadratureRule(
        degree=degree,
        points=points,
        weights=ww.ravel(),
        segment_points=seg_x,
        segment_weights=seg_w,
    )
