"""Quadrature rules and the orthonormal triangle basis.

Oracles are independent of the implementation: closed-form Gauss nodes,
iterated-integral monomial values via numpy's 1D Gauss-Legendre rules,
and hand-derived k=1 basis polynomials.
"""

import math
from fractions import Fraction

import numpy as np
import numpy.testing as npt
import pytest

from aledg.basis_quadrature import (
    QuadratureError,
    REF_EDGE_LENGTHS,
    REF_EDGE_NORMALS,
    REF_EDGE_VERTEX_IDS,
    REF_PERIMETER,
    REF_VERTICES,
    SUPPORTED_ORDERS,
    basis,
    edge_gauss,
    edge_point,
    eval_basis,
    eval_basis_grad,
    lobatto,
    monomial_integral,
    volume_rule,
    zxs_rule,
)


def iterated_monomial_integral(a, b):
    """Integrate x^a y^b over the reference triangle with 1D Gauss rules.

    Inner integral in y is a degree-(b+1) polynomial of x after exact
    antidifferentiation, so a 30-point Gauss rule in x is far beyond
    exactness for every exponent pair used here.
    """
    x, w = np.polynomial.legendre.leggauss(30)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    inner = x ** a * (1.0 - x) ** (b + 1) / (b + 1)
    return float(w @ inner)


def triangle_barycentric(points):
    pts = np.atleast_2d(points)
    lam1 = pts[:, 0]
    lam2 = pts[:, 1]
    lam0 = 1.0 - lam1 - lam2
    return np.stack([lam0, lam1, lam2], axis=1)


# -- reference element ---------------------------------------------------------


def test_reference_edges_match_vertices():
    for e, (va, vb) in enumerate(REF_EDGE_VERTEX_IDS):
        length = np.linalg.norm(REF_VERTICES[vb] - REF_VERTICES[va])
        assert REF_EDGE_LENGTHS[e] == pytest.approx(length, rel=1e-15)
    assert REF_PERIMETER == pytest.approx(REF_EDGE_LENGTHS.sum(), rel=1e-15)


def test_reference_normals_are_outward_units():
    centroid = REF_VERTICES.mean(axis=0)
    for e, (va, vb) in enumerate(REF_EDGE_VERTEX_IDS):
        n = REF_EDGE_NORMALS[e]
        assert np.linalg.norm(n) == pytest.approx(1.0, rel=1e-15)
        tangent = REF_VERTICES[vb] - REF_VERTICES[va]
        assert abs(n @ tangent) < 1e-15
        midpoint = 0.5 * (REF_VERTICES[va] + REF_VERTICES[vb])
        assert n @ (midpoint - centroid) > 0.0


# -- monomial integrals --------------------------------------------------------


@pytest.mark.parametrize("a, b, exact", [
    (0, 0, Fraction(1, 2)),
    (1, 0, Fraction(1, 6)),
    (0, 1, Fraction(1, 6)),
    (1, 1, Fraction(1, 24)),
    (2, 0, Fraction(1, 12)),
    (0, 3, Fraction(1, 20)),
])
def test_monomial_integral_known_values(a, b, exact):
    # float return, correctly rounded from the exact rational
    assert monomial_integral(a, b) == float(exact)


@pytest.mark.parametrize("a", range(0, 7))
@pytest.mark.parametrize("b", range(0, 7))
def test_monomial_integral_against_iterated_quadrature(a, b):
    assert float(monomial_integral(a, b)) == pytest.approx(
        iterated_monomial_integral(a, b), rel=1e-13)


def test_monomial_integral_symmetry():
    assert monomial_integral(3, 5) == monomial_integral(5, 3)


# -- edge Gauss rules ----------------------------------------------------------


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_edge_gauss_basics(k):
    rule = edge_gauss(k)
    assert rule.tau.size == k + 1
    assert rule.sigma.sum() == pytest.approx(1.0, abs=1e-15)
    assert (rule.sigma > 0.0).all()
    assert (np.abs(rule.tau) < 0.5).all()


def test_edge_gauss_two_point_closed_form():
    rule = edge_gauss(1)
    npt.assert_allclose(np.sort(rule.tau),
                        [-0.5 / math.sqrt(3.0), 0.5 / math.sqrt(3.0)],
                        rtol=1e-15)
    npt.assert_allclose(rule.sigma, [0.5, 0.5], rtol=1e-15)


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_edge_gauss_bitwise_symmetry(k):
    rule = edge_gauss(k)
    assert np.array_equal(rule.tau, -rule.tau[::-1])
    assert np.array_equal(rule.sigma, rule.sigma[::-1])


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_edge_gauss_exactness_degree(k):
    rule = edge_gauss(k)
    for p in range(2 * k + 2):
        exact = Fraction(1, p + 1) * (Fraction(1, 2) ** (p + 1)
                                      - Fraction(-1, 2) ** (p + 1))
        got = rule.sigma @ rule.tau ** p
        assert got == pytest.approx(float(exact), abs=1e-16, rel=1e-14), p
    p = 2 * k + 2
    exact = 2.0 * 0.5 ** (p + 1) / (p + 1)
    assert abs(rule.sigma @ rule.tau ** p - exact) > 1e-6


@pytest.mark.parametrize("edge", [0, 1, 2])
def test_edge_point_lands_on_the_edge(edge):
    tau = np.linspace(-0.5, 0.5, 7)
    pts = edge_point(edge, tau)
    va, vb = REF_EDGE_VERTEX_IDS[edge]
    a, b = REF_VERTICES[va], REF_VERTICES[vb]
    # every point on the segment: p = a + s (b - a) with s in [0, 1]
    d = b - a
    s = ((pts - a) @ d) / (d @ d)
    npt.assert_allclose(pts, a + s[:, None] * d, atol=1e-14)
    assert (s > -1e-14).all() and (s < 1.0 + 1e-14).all()
    # tau = 0 is the midpoint
    npt.assert_allclose(edge_point(edge, np.array([0.0]))[0],
                        0.5 * (a + b), atol=1e-15)


def test_edge_trace_rule_integrates_line_integrals():
    # integral over edge e of x y ds, via |edge| * sum sigma f(point)
    rule = edge_gauss(2)
    pts = edge_point(0, rule.tau)          # hypotenuse x + y = 1
    got = REF_EDGE_LENGTHS[0] * (rule.sigma @ (pts[:, 0] * pts[:, 1]))
    # parametrize x = 1 - t, y = t, ds = sqrt(2) dt: integral = sqrt(2)/6
    assert got == pytest.approx(math.sqrt(2.0) / 6.0, rel=1e-14)


# -- Lobatto rules -------------------------------------------------------------


@pytest.mark.parametrize("n, nodes, weights", [
    (2, [-0.5, 0.5], [0.5, 0.5]),
    (3, [-0.5, 0.0, 0.5], [1 / 6, 2 / 3, 1 / 6]),
    (4, [-0.5, -0.5 / math.sqrt(5.0), 0.5 / math.sqrt(5.0), 0.5],
     [1 / 12, 5 / 12, 5 / 12, 1 / 12]),
    (5, [-0.5, -0.5 * math.sqrt(3.0 / 7.0), 0.0,
         0.5 * math.sqrt(3.0 / 7.0), 0.5],
     [1 / 20, 49 / 180, 16 / 45, 49 / 180, 1 / 20]),
])
def test_lobatto_closed_forms(n, nodes, weights):
    x, w = lobatto(n)
    npt.assert_allclose(x, nodes, atol=1e-15)
    npt.assert_allclose(w, weights, rtol=1e-14)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_lobatto_exactness_degree(n):
    x, w = lobatto(n)
    for p in range(2 * n - 2):
        exact = (0.5 ** (p + 1) - (-0.5) ** (p + 1)) / (p + 1)
        assert w @ x ** p == pytest.approx(exact, abs=1e-15), p


@pytest.mark.parametrize("n", [0, 1, 6])
def test_lobatto_untabulated_raises(n):
    with pytest.raises(QuadratureError):
        lobatto(n)


# -- volume rules --------------------------------------------------------------


@pytest.mark.parametrize("degree", range(0, 9))
def test_volume_rule_exact_for_monomials(degree):
    rule = volume_rule(degree)
    assert (rule.weights > 0.0).all()
    assert rule.weights.sum() == pytest.approx(0.5, rel=1e-14)
    lam = triangle_barycentric(rule.points)
    assert (lam > -1e-14).all()
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            got = rule.weights @ (rule.points[:, 0] ** a
                                  * rule.points[:, 1] ** b)
            assert got == pytest.approx(float(monomial_integral(a, b)),
                                        rel=1e-13, abs=1e-16), (a, b)


@pytest.mark.parametrize("degree", [-1, 9, 12])
def test_volume_rule_degree_range(degree):
    with pytest.raises(QuadratureError):
        volume_rule(degree)


# -- orthonormal basis ---------------------------------------------------------


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_basis_dimension_and_exponents(k):
    b = basis(k)
    r = (k + 1) * (k + 2) // 2
    assert b.r == r
    assert len(b.exponents) == r
    degrees = [a + c for a, c in b.exponents]
    assert max(degrees) == k
    assert sorted(degrees) == degrees          # graded ordering


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_basis_orthonormal(k):
    b = basis(k)
    rule = volume_rule(2 * k)
    phi = b.eval(rule.points)                  # (nq, r)
    gram = phi.T @ (rule.weights[:, None] * phi)
    npt.assert_allclose(gram, np.eye(b.r), atol=2e-14)


def test_basis_k1_closed_forms(rng):
    pts = rng.random((40, 2)) * 0.5            # inside the triangle
    phi = basis(1).eval(pts)
    x, y = pts[:, 0], pts[:, 1]
    npt.assert_allclose(phi[:, 0], math.sqrt(2.0), rtol=1e-14)
    npt.assert_allclose(phi[:, 1], 6.0 * x - 2.0, rtol=0, atol=1e-13)
    npt.assert_allclose(phi[:, 2], 2.0 * math.sqrt(3.0) * (x + 2.0 * y - 1.0),
                        rtol=0, atol=1e-13)


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_basis_gradient_matches_finite_differences(k, rng):
    b = basis(k)
    pts = 0.05 + rng.random((12, 2)) * 0.4
    grad = b.grad(pts)
    h = 1e-6
    for axis in range(2):
        dp = np.zeros(2)
        dp[axis] = h
        fd = (b.eval(pts + dp) - b.eval(pts - dp)) / (2.0 * h)
        npt.assert_allclose(grad[:, :, axis], fd, atol=5e-9 * 10 ** k)


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_basis_span_reproduces_monomials(k, rng):
    """Projection of any degree-k monomial onto the basis is exact."""
    b = basis(k)
    rule = volume_rule(2 * k)
    phi = b.eval(rule.points)
    check = rng.random((30, 2)) * 0.5
    phi_check = b.eval(check)
    for a, c in b.exponents:
        vals = rule.points[:, 0] ** a * rule.points[:, 1] ** c
        coeffs = phi.T @ (rule.weights * vals)
        npt.assert_allclose(phi_check @ coeffs,
                            check[:, 0] ** a * check[:, 1] ** c, atol=1e-13)


def test_eval_helpers_match_basis_methods(rng):
    pts = rng.random((9, 2)) * 0.5
    b = basis(2)
    npt.assert_allclose(eval_basis(2, pts), b.eval(pts), rtol=0, atol=0)
    npt.assert_allclose(eval_basis_grad(2, pts), b.grad(pts), rtol=0, atol=0)


@pytest.mark.parametrize("k", [0, 4, -1])
def test_basis_unsupported_order_raises(k):
    with pytest.raises(QuadratureError):
        basis(k)


# -- bound-checking point set --------------------------------------------------


ZXS_TABLE = {
    # k: (total points, edge points, interior points, sigma_hat, lobatto n)
    1: (6, 6, 0, Fraction(1, 3), 2),
    2: (18, 9, 9, Fraction(1, 9), 3),
    3: (36, 12, 24, Fraction(1, 18), 4),
}


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_zxs_rule_shape_and_weights(k):
    total, n_edge, n_int, sigma_hat, lob_n = ZXS_TABLE[k]
    rule = zxs_rule(k)
    assert rule.points.shape == (total, 2)
    assert rule.num_edge == n_edge
    assert rule.num_interior == n_int
    assert rule.lobatto_n == lob_n
    assert rule.sigma_hat == pytest.approx(float(sigma_hat), rel=1e-15)
    assert (rule.weights > 0.0).all()
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-13)
    lam = triangle_barycentric(rule.points)
    assert (lam > -1e-14).all()


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_zxs_rule_starts_with_edge_gauss_points(k):
    """First 3(k+1) points are the flux-quadrature points, bit for bit."""
    rule = zxs_rule(k)
    er = edge_gauss(k)
    expected = np.concatenate([edge_point(e, er.tau) for e in range(3)])
    assert np.array_equal(rule.points[:rule.num_edge], expected)


@pytest.mark.parametrize("k", SUPPORTED_ORDERS)
def test_zxs_rule_decomposes_cell_averages(k, rng):
    """sum_i w_i p(x_i) equals the exact average of p for p in P^k."""
    b = basis(k)
    for _ in range(5):
        coeff = rng.standard_normal(len(b.exponents))
        rule = zxs_rule(k)
        vals = np.zeros(rule.points.shape[0])
        exact = 0.0
        for (a, c), coef in zip(b.exponents, coeff):
            vals += coef * rule.points[:, 0] ** a * rule.points[:, 1] ** c
            exact += coef * 2.0 * float(monomial_integral(a, c))
        assert rule.weights @ vals == pytest.approx(exact, abs=1e-13)


def test_zxs_rule_unsupported_order_raises():
    with pytest.raises(QuadratureError):
        zxs_rule(4)
