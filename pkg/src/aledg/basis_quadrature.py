"""Reference-triangle basis functions and quadrature rules.

Everything in this module lives on the reference triangle

    K_ref = conv{(0,0), (1,0), (0,1)},   |K_ref| = 1/2.

Edges are numbered by the local vertex they face: edge ``e`` is opposite
vertex ``e`` and is traversed counter-clockwise along the boundary, so a
shared edge of two correctly oriented cells is traversed in opposite
directions by its two owners.  Edge quadrature lives on the symmetric
parameter interval [-1/2, 1/2] with weights that sum to one, so an edge
integral is ``length * sum(sigma_i * f(tau_i))``.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

# -- reference geometry -------------------------------------------------------

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

# (first, second) endpoint of each edge in counter-clockwise boundary order
REF_EDGE_VERTEX_IDS = ((1, 2), (2, 0), (0, 1))

REF_EDGE_LENGTHS = np.array([math.sqrt(2.0), 1.0, 1.0])

_SQ2 = 1.0 / math.sqrt(2.0)
REF_EDGE_NORMALS = np.array([[_SQ2, _SQ2], [-1.0, 0.0], [0.0, -1.0]])

REF_PERIMETER = 2.0 + math.sqrt(2.0)

SUPPORTED_ORDERS = (1, 2, 3)


class QuadratureError(ValueError):
    """Raised when a quadrature rule cannot be constructed as requested."""


# -- 1D rules -----------------------------------------------------------------


@dataclass(frozen=True)
class EdgeRule:
    """(k+1)-point Gauss rule on [-1/2, 1/2]; weights sum to 1."""

    tau: np.ndarray
    sigma: np.ndarray


@lru_cache(maxsize=None)
def edge_gauss(k):
    """Gauss-Legendre rule with k+1 points on [-1/2, 1/2].

    Exact for polynomial degree 2k+1.  Nodes are forced to be bitwise
    symmetric about 0 so that reversing the point order maps each node to
    exactly its mirror image (trace matching across shared edges relies
    on this).
    """
    if k < 0:
        raise QuadratureError(f"polynomial order must be >= 0, got {k}")
    x, w = roots_legendre(k + 1)
    x, w = 0.5 * x, 0.5 * w
    tau = 0.5 * (x - x[::-1])          # exact antisymmetry
    sigma = 0.5 * (w + w[::-1])        # exact symmetry
    tau.setflags(write=False)
    sigma.setflags(write=False)
    return EdgeRule(tau=tau, sigma=sigma)


def edge_point(edge, tau):
    """Reference coordinates of parameter(s) ``tau`` on the given edge.

    tau = -1/2 is the first endpoint, +1/2 the second (counter-clockwise
    orientation).  Returns an array of shape tau.shape + (2,).
    """
    a = REF_VERTICES[REF_EDGE_VERTEX_IDS[edge][0]]
    b = REF_VERTICES[REF_EDGE_VERTEX_IDS[edge][1]]
    t = np.asarray(tau)[..., None]
    return 0.5 * (a + b) + t * (b - a)


# Gauss-Lobatto rules on [-1/2, 1/2], weights summing to 1.  Only small
# point counts ever occur, so the classical closed forms are tabulated.
_LOBATTO = {
    2: ([-0.5, 0.5], [0.5, 0.5]),
    3: ([-0.5, 0.0, 0.5], [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]),
    4: (
        [-0.5, -0.5 / math.sqrt(5.0), 0.5 / math.sqrt(5.0), 0.5],
        [1.0 / 12.0, 5.0 / 12.0, 5.0 / 12.0, 1.0 / 12.0],
    ),
    5: (
        [-0.5, -0.5 * math.sqrt(3.0 / 7.0), 0.0, 0.5 * math.sqrt(3.0 / 7.0), 0.5],
        [0.05, 49.0 / 180.0, 16.0 / 45.0, 49.0 / 180.0, 0.05],
    ),
}


def lobatto(n):
    """n-point Gauss-Lobatto rule on [-1/2, 1/2] (weights sum to 1)."""
    if n not in _LOBATTO:
        raise QuadratureError(f"Gauss-Lobatto rule with {n} points not tabulated")
    x, w = _LOBATTO[n]
    return np.array(x), np.array(w)


# -- triangle volume quadrature ----------------------------------------------


@dataclass(frozen=True)
class VolumeRule:
    """Quadrature on K_ref with integration weights (sum = |K_ref| = 1/2)."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


_MAX_VOLUME_DEGREE = 8


@lru_cache(maxsize=None)
def volume_rule(degree):
    """Positive-weight rule on K_ref exact for total degree ``degree``.

    Conical product of a Gauss-Legendre rule in the collapsed coordinate
    with a Gauss-Jacobi(1,0) rule absorbing the 1-y Duffy factor:

        int_T f = int_0^1 int_0^1 f(u(1-y), y) (1-y) du dy.
    """
    if not 0 <= degree <= _MAX_VOLUME_DEGREE:
        raise QuadratureError(
            f"volume rule degree must be in [0, {_MAX_VOLUME_DEGREE}], got {degree}"
        )
    n = degree // 2 + 1
    xu, wu = roots_legendre(n)
    u = 0.5 * (xu + 1.0)
    wu = 0.5 * wu
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    y = 0.5 * (xj + 1.0)
    wy = 0.25 * wj
    uu, yy = np.meshgrid(u, y, indexing="ij")
    pts = np.column_stack([(uu * (1.0 - yy)).ravel(), yy.ravel()])
    wts = np.outer(wu, wy).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return VolumeRule(points=pts, weights=wts, degree=degree)


def monomial_integral(a, b):
    """Exact value of int_{K_ref} x^a y^b dx dy = a! b! / (a+b+2)!."""
    return float(Fraction(math.factorial(a) * math.factorial(b),
                          math.factorial(a + b + 2)))


# -- orthonormal modal basis --------------------------------------------------


def _monomial_exponents(k):
    return [(d - i, i) for d in range(k + 1) for i in range(d + 1)]


def _exact_orthonormal_coeffs(k):
    """Gram-Schmidt the monomials in exact rational arithmetic.

    Returns an (r, r) float matrix C with phi_m = sum_j C[m, j] * mono_j.
    Doing the elimination over Fraction keeps the only rounding in the
    final normalisation, so the numerical Gram matrix of the basis is the
    identity to machine precision.
    """
    monos = _monomial_exponents(k)
    r = len(monos)
    gram = [
        [
            Fraction(
                math.factorial(a + c) * math.factorial(b + d),
                math.factorial(a + b + c + d + 2),
            )
            for (c, d) in monos
        ]
        for (a, b) in monos
    ]

    def inner(u, v):
        return sum(ui * sum(gij * vj for gij, vj in zip(gi, v))
                   for ui, gi in zip(u, gram))

    basis_rows = []
    norms = []
    for i in range(r):
        w = [Fraction(0)] * r
        w[i] = Fraction(1)
        for q, nq in zip(basis_rows, norms):
            c = inner(w, q) / nq
            w = [wi - c * qi for wi, qi in zip(w, q)]
        basis_rows.append(w)
        norms.append(inner(w, w))

    C = np.array(
        [[float(wj) / math.sqrt(float(n)) for wj in w]
         for w, n in zip(basis_rows, norms)]
    )
    return C, monos


@dataclass(frozen=True)
class Basis:
    """Orthonormal modal basis of P_k on K_ref.

    phi_0 = sqrt(2) is the constant mode, so a cell average is
    sqrt(2) * c_0.  The Gram matrix under the exact L2 inner product on
    K_ref is the identity.
    """

    k: int
    r: int
    exponents: tuple
    coeffs: np.ndarray

    def eval(self, points):
        """Basis values at reference points; shape (npts, r)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        M = np.empty((pts.shape[0], self.r))
        for j, (a, b) in enumerate(self.exponents):
            M[:, j] = pts[:, 0] ** a * pts[:, 1] ** b
        return M @ self.coeffs.T

    def grad(self, points):
        """Basis gradients at reference points; shape (npts, r, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        npts = pts.shape[0]
        Dx = np.zeros((npts, self.r))
        Dy = np.zeros((npts, self.r))
        for j, (a, b) in enumerate(self.exponents):
            if a > 0:
                Dx[:, j] = a * pts[:, 0] ** (a - 1) * pts[:, 1] ** b
            if b > 0:
                Dy[:, j] = b * pts[:, 0] ** a * pts[:, 1] ** (b - 1)
        out = np.empty((npts, self.r, 2))
        out[:, :, 0] = Dx @ self.coeffs.T
        out[:, :, 1] = Dy @ self.coeffs.T
        return out


@lru_cache(maxsize=None)
def basis(k):
    """The orthonormal modal basis for polynomial order k (cached)."""
    if k not in SUPPORTED_ORDERS:
        raise QuadratureError(
            f"polynomial order must be one of {SUPPORTED_ORDERS}, got {k}"
        )
    C, monos = _exact_orthonormal_coeffs(k)
    C.setflags(write=False)
    return Basis(k=k, r=len(monos), exponents=tuple(monos), coeffs=C)


def eval_basis(k, points):
    """Values of the r = (k+1)(k+2)/2 basis functions at reference points."""
    return basis(k).eval(points)


def eval_basis_grad(k, points):
    """Reference-space gradients of the basis functions."""
    return basis(k).grad(points)


# -- bound-preserving point set ----------------------------------------------


@dataclass(frozen=True)
class ZXSRule:
    """Cell-average decomposition with positive weights and edge-Gauss rows.

    The first 3*(k+1) points are exactly the edge Gauss points (edge 0
    betas, edge 1 betas, edge 2 betas, bit-identical to
    ``edge_point(e, edge_gauss(k).tau)``), each carrying weight
    sigma_beta * sigma_hat.  The remainder lie strictly inside the
    triangle.  Weights are positive and sum to 1, and the weighted point
    values of any polynomial of degree <= k average to its cell mean.
    """

    k: int
    points: np.ndarray
    weights: np.ndarray
    sigma_hat: float
    lobatto_n: int
    num_edge: int

    @property
    def num_interior(self):
        return self.points.shape[0] - self.num_edge


def _zxs_candidate(k, n_lob):
    """Assemble the three-fold apex-map rule for a given Lobatto count."""
    er = edge_gauss(k)
    sigma_tilde = 1.0 / (n_lob * (n_lob - 1))
    sigma_hat = 2.0 / 3.0 * sigma_tilde

    pts = [edge_point(e, er.tau) for e in range(3)]
    wts = [er.sigma * sigma_hat for _ in range(3)]
    num_edge = 3 * (k + 1)

    v_nodes, v_wts = lobatto(n_lob)
    verts = REF_VERTICES
    interior_p, interior_w = [], []
    # one map per apex; the v = -1/2 row reproduces the opposite edge's
    # Gauss points (already emitted above) and the v = +1/2 row has zero
    # jacobian weight, so both are skipped here
    for apex in range(3):
        vj = verts[(apex + 1) % 3]
        vl = verts[(apex + 2) % 3]
        va = verts[apex]
        for g in range(1, n_lob - 1):
            s = 0.5 - v_nodes[g]
            base = (0.5 + v_nodes[g]) * va
            for b in range(k + 1):
                lam_j = 0.5 + er.tau[b]
                interior_p.append(base + s * (lam_j * vj + (1.0 - lam_j) * vl))
                interior_w.append((2.0 / 3.0) * er.sigma[b] * v_wts[g] * s)
    if interior_p:
        pts.append(np.array(interior_p))
        wts.append(np.array(interior_w))

    points = np.vstack(pts)
    weights = np.concatenate(wts)
    return ZXSRule(
        k=k,
        points=points,
        weights=weights,
        sigma_hat=sigma_hat,
        lobatto_n=n_lob,
        num_edge=num_edge,
    )


def _averages_exact(rule, k, tol=1e-12):
    """Check sum(w * mono) == cell mean of mono for all monomials of deg <= k."""
    x, y = rule.points[:, 0], rule.points[:, 1]
    for a, b in _monomial_exponents(k):
        approx = np.sum(rule.weights * x ** a * y ** b)
        exact = 2.0 * monomial_integral(a, b)
        if abs(approx - exact) > tol:
            return False
    return True


@lru_cache(maxsize=None)
def zxs_rule(k):
    """Bound-preserving decomposition of the cell average for order k.

    Starts from the smallest Lobatto count with formal 1D degree >= k and
    increases it until the assembled 2D rule actually reproduces cell
    means of all degree-k polynomials (the three-map construction loses
    exactness on odd degrees whose interior points sit on the mid-lines;
    k = 3 needs one extra Lobatto point).
    """
    if k not in SUPPORTED_ORDERS:
        raise QuadratureError(
            f"polynomial order must be one of {SUPPORTED_ORDERS}, got {k}"
        )
    n_lob = max(2, (k + 3 + 1) // 2)  # smallest n with 2n - 3 >= k
    while True:
        rule = _zxs_candidate(k, n_lob)
        if _averages_exact(rule, k):
            break
        n_lob += 1
        if n_lob > max(_LOBATTO):
            raise QuadratureError(
                f"no exact bound-preserving rule found for k={k}"
            )
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule
