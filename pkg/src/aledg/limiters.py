"""Bound-preserving and slope limiters for modal DG fields.

Both limiters act on reference-space modal coefficients and never touch
the constant mode, so cell averages (and hence conservation) are exact.
The bound-preserving limiter is the linear rescaling

    u~ = theta (u - ubar) + ubar,
    theta = min(|M - ubar| / |M_K - ubar|, |m - ubar| / |m_K - ubar|, 1),

with M_K, m_K the extrema over the positive-weight decomposition points
of the cell average; combined with the matching CFL condition it keeps
cell averages (and therefore the limited polynomial at those points)
inside the invariant interval [m, M].
"""

import math

import numpy as np

from .basis_quadrature import basis, zxs_rule


class LimiterError(RuntimeError):
    """Cell average violated the invariant bounds (CFL breach)."""


def cell_average(coeffs):
    """Cell averages of a modal field; shape (nc, nvars)."""
    return math.sqrt(2.0) * coeffs[:, 0, :]


def bound_preserving_limit(coeffs, values_table, bounds, avg_tol=1e-11):
    """Rescale each cell's deviation so point values stay in [m, M].

    ``values_table`` is the (npts, r) matrix of basis values at the
    decomposition points.  Cells already inside the bounds are returned
    bit-identical.  A cell average outside [m - avg_tol, M + avg_tol]
    raises LimiterError, since the scheme guarantees averages only under
    its CFL condition.
    """
    if coeffs.shape[-1] != 1:
        raise LimiterError("bound-preserving limiter applies to scalar fields")
    m, M = bounds
    avg = cell_average(coeffs)[:, 0]
    if avg.min() < m - avg_tol or avg.max() > M + avg_tol:
        bad = int(np.argmax(np.maximum(m - avg, avg - M)))
        raise LimiterError(
            f"cell {bad} average {avg[bad]:.15g} outside [{m}, {M}]; "
            "time step too large for the maximum principle"
        )
    vals = np.einsum("qm,cmv->cqv", values_table, coeffs)[..., 0]
    M_K = vals.max(axis=1)
    m_K = vals.min(axis=1)

    # theta = 1 whenever the cell already fits; 0/0 (flat cell) counts as fit
    up = np.where(M_K > M, (M - avg) / np.where(M_K > M, M_K - avg, 1.0), 1.0)
    dn = np.where(m_K < m, (avg - m) / np.where(m_K < m, avg - m_K, 1.0), 1.0)
    theta = np.minimum(np.minimum(up, dn), 1.0)
    theta = np.maximum(theta, 0.0)

    active = theta < 1.0
    if not active.any():
        return coeffs
    out = coeffs.copy()
    out[active, 1:, :] *= theta[active, None, None]
    return out


class BoundPreservingLimiter:
    """Stage postprocessor enforcing pointwise bounds for scalar laws."""

    def __init__(self, k, bounds):
        self.bounds = bounds
        self.table = basis(k).eval(zxs_rule(k).points)

    def __call__(self, coeffs):
        return bound_preserving_limit(coeffs, self.table, self.bounds)


# -- slope limiter ------------------------------------------------------------


def _minmod(a, b):
    agree = a * b > 0.0
    return np.where(agree, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


class SlopeLimiter:
    """TVB minmod limiter on edge-midpoint deviations of the linear part.

    For each cell the deviation of the linear modes at the three edge
    midpoints is compared (minmod) against the forward difference of
    neighbour cell averages; when limiting bites, the linear modes are
    rebuilt from the limited midpoint deviations (projected onto the
    zero-sum subspace a linear function must satisfy) and all higher
    modes are dropped.  Deviations below tvb_m * h^2 are left alone, so
    the limiter is inactive on smooth well-resolved data for a large
    TVB constant.  Cell averages are never modified.
    """

    def __init__(self, topology, k, tvb_m=50.0):
        self.topology = topology
        self.tvb = tvb_m * topology.h0 ** 2
        b = basis(k)
        mids = np.array([[0.5, 0.5], [0.0, 0.5], [0.5, 0.0]])
        full = b.eval(mids)                     # (3, r)
        self.L = full[:, 1:3]                   # linear modes at midpoints
        self.L_pinv = np.linalg.pinv(self.L)    # (2, 3)
        # neighbour averages: boundary edges fall back to the cell itself
        self.nbr = topology.nbr_cell.copy()
        own = np.arange(topology.num_cells)[:, None]
        self.nbr = np.where(self.nbr < 0, own, self.nbr)

    def __call__(self, coeffs):
        if coeffs.shape[-1] != 1:
            raise LimiterError("slope limiter applies to scalar fields")
        avg = cell_average(coeffs)[:, 0]
        delta = coeffs[:, 1:3, 0] @ self.L.T        # (nc, 3) midpoint deviations
        fwd = avg[self.nbr] - avg[:, None]
        limited = _minmod(delta, fwd)
        needs = (np.abs(delta) > self.tvb) & \
                (np.abs(limited - delta) > 1e-14 * np.maximum(1.0, np.abs(delta)))
        active = needs.any(axis=1)
        if not active.any():
            return coeffs
        out = coeffs.copy()
        d = np.where(needs[active], limited[active], delta[active])
        d = d - d.mean(axis=1, keepdims=True)   # zero-sum: realisable by a linear
        out[active, 1:3, 0] = d @ self.L_pinv.T
        out[active, 3:, :] = 0.0
        return out


def compose_limiters(*limiters):
    """Chain stage postprocessors (applied left to right); None entries skipped."""
    chain = [l for l in limiters if l is not None]
    if not chain:
        return None
    if len(chain) == 1:
        return chain[0]

    def apply(coeffs):
        for lim in chain:
            coeffs = lim(coeffs)
        return coeffs

    return apply
