"""Semi-discrete residual, conservation-law-exact RK stepping, time loop.

The unknowns are modal coefficient arrays of shape (num_cells, r, nvars)
with respect to the orthonormal reference basis.  The moving-mesh weak
form evolves jacobian-weighted coefficients,

    d/dt (J c_m) = G_m(u, t),

where G is the grid-relative DG residual.  A Shu-Osher Runge-Kutta
scheme is applied to the weighted quantity, carrying *staged jacobians*
along with the coefficients:

    J^{n,0} = det A(t_n),
    J^{n,i} = sum_j alpha_ij J^{n,j} + dt sum_j beta_ij Jdot(t_n + gamma_j dt),
    J^{n,i} c^{n,i} = sum_j alpha_ij J^{n,j} c^{n,j} + dt sum_j beta_ij G_j.

Because det A is quadratic in t within a step, any scheme of order >= 2
integrates it exactly, so constant states are preserved to roundoff and
J^{n,s} agrees with the geometric jacobian at t_{n+1}; forward Euler
does not, which is measurable as a constant-state defect.  The step ends
by rescaling coefficients to the geometric jacobian (a no-op up to
roundoff for order >= 2).
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .basis_quadrature import (
    REF_EDGE_LENGTHS,
    REF_PERIMETER,
    SUPPORTED_ORDERS,
    basis,
    edge_gauss,
    edge_point,
    volume_rule,
    zxs_rule,
)
from .mesh import MeshError, StepGeometry
from .physics import (
    Euler,
    ale_flux,
    lax_friedrichs,
    wave_speed_interval,
    wave_speed_states,
)


class SolverError(RuntimeError):
    """Configuration or runtime failure inside the stepping machinery."""


# -- Runge-Kutta schemes ------------------------------------------------------


@dataclass(frozen=True)
class RKScheme:
    """Shu-Osher tableau: stage i is a convex combination of states plus
    forward-Euler increments; ``gamma[j]`` is the time abscissa at which
    stage-j data (and geometry) is evaluated."""

    name: str
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    order: int

    @property
    def stages(self):
        return self.alpha.shape[0]

    def validate(self):
        s = self.stages
        if self.alpha.shape != (s, s) or self.beta.shape != (s, s):
            raise SolverError(f"{self.name}: tableau shape mismatch")
        if (self.alpha < 0).any() or (self.beta < 0).any():
            raise SolverError(f"{self.name}: negative tableau entry")
        rows = self.alpha.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-13:
            raise SolverError(f"{self.name}: alpha rows must sum to 1")
        if ((self.beta != 0) & (self.alpha == 0)).any():
            raise SolverError(f"{self.name}: beta_ij != 0 requires alpha_ij != 0")
        for i in range(s):
            if self.alpha[i, i + 1:].any() or self.beta[i, i + 1:].any():
                raise SolverError(f"{self.name}: tableau not lower triangular")
        if (self.gamma < -1e-13).any() or (self.gamma > 1.0 + 1e-13).any():
            raise SolverError(f"{self.name}: stage abscissa outside [0, 1]")
        if abs(self._final_abscissa() - 1.0) > 1e-12:
            raise SolverError(f"{self.name}: final abscissa != 1")
        return self

    def _final_abscissa(self):
        c = np.zeros(self.stages + 1)
        for i in range(1, self.stages + 1):
            c[i] = (self.alpha[i - 1] @ c[:self.stages]
                    + self.beta[i - 1].sum())
        return c[self.stages]


def _scheme(name, alpha_rows, beta_rows, order):
    s = len(alpha_rows)
    alpha = np.zeros((s, s))
    beta = np.zeros((s, s))
    for i, (ar, br) in enumerate(zip(alpha_rows, beta_rows)):
        alpha[i, :len(ar)] = ar
        beta[i, :len(br)] = br
    # stage abscissae from the tableau itself
    c = np.zeros(s + 1)
    for i in range(1, s + 1):
        c[i] = alpha[i - 1] @ c[:s] + beta[i - 1].sum()
    return RKScheme(name=name, alpha=alpha, beta=beta, gamma=c[:s].copy(),
                    order=order).validate()


def euler_fwd():
    """Forward Euler (order 1; does *not* preserve constants on moving meshes)."""
    return _scheme("euler_fwd", [[1.0]], [[1.0]], 1)


def tvdrk2():
    """Two-stage second-order TVD Runge-Kutta."""
    return _scheme("tvdrk2",
                   [[1.0], [0.5, 0.5]],
                   [[1.0], [0.0, 0.5]], 2)


def tvdrk3():
    """Three-stage third-order TVD Runge-Kutta."""
    return _scheme("tvdrk3",
                   [[1.0], [0.75, 0.25], [1.0 / 3.0, 0.0, 2.0 / 3.0]],
                   [[1.0], [0.0, 0.25], [0.0, 0.0, 2.0 / 3.0]], 3)


def ssprk54():
    """Five-stage fourth-order strong-stability-preserving Runge-Kutta."""
    return _scheme(
        "ssprk54",
        [
            [1.0],
            [0.444370493651235, 0.555629506348765],
            [0.620101851488403, 0.0, 0.379898148511597],
            [0.178079954393132, 0.0, 0.0, 0.821920045606868],
            [0.0, 0.0, 0.517231671970585, 0.096059710526147, 0.386708617503269],
        ],
        [
            [0.391752226571890],
            [0.0, 0.368410593050371],
            [0.0, 0.0, 0.251891774271694],
            [0.0, 0.0, 0.0, 0.544974750228521],
            [0.0, 0.0, 0.0, 0.063692468666290, 0.226007483236906],
        ],
        4,
    )


RK_SCHEMES = {
    "euler_fwd": euler_fwd,
    "tvdrk2": tvdrk2,
    "tvdrk3": tvdrk3,
    "ssprk54": ssprk54,
}


def rk_scheme(name):
    try:
        return RK_SCHEMES[name]()
    except KeyError:
        raise SolverError(
            f"unknown integrator {name!r}; choose from {sorted(RK_SCHEMES)}"
        ) from None


# -- spatial discretisation ---------------------------------------------------


class Discretization:
    """Precomputed basis/quadrature tables and adjacency for one mesh.

    ``bc_solution`` supplies exterior trace data on non-periodic
    boundary edges ((x, y, t) -> state).  ``lambda_mode`` selects the
    dissipation bound of the numerical flux: "local" uses the two trace
    states, "global" the closed-form bound over ``bounds = (m, M)``
    (scalar models only), which is what the cell-average maximum
    principle requires.
    """

    def __init__(self, topology, model, k, bc_solution=None,
                 lambda_mode="local", bounds=None):
        if k not in SUPPORTED_ORDERS:
            raise SolverError(f"polynomial order k={k} not supported "
                              f"(choose from {SUPPORTED_ORDERS})")
        if lambda_mode not in ("local", "global"):
            raise SolverError(f"unknown lambda_mode {lambda_mode!r}")
        if lambda_mode == "global" and bounds is None:
            raise SolverError("global lambda_mode needs explicit bounds (m, M)")
        if topology.bc == "dirichlet" and bc_solution is None:
            raise SolverError("dirichlet mesh needs a boundary solution")
        self.topology = topology
        self.model = model
        self.k = k
        self.nvars = model.nvars
        self.bc_solution = bc_solution
        self.lambda_mode = lambda_mode
        self.bounds = bounds

        b = basis(k)
        self.basis = b
        self.r = b.r

        vol = volume_rule(2 * k + 1)
        self.xi_vol = vol.points
        self.w_vol = vol.weights
        self.B_vol = b.eval(vol.points)                       # (nq, r)
        grad = b.grad(vol.points)                             # (nq, r, 2)
        self.GW_vol = grad * vol.weights[:, None, None]

        er = edge_gauss(k)
        self.edge_tau = er.tau
        self.edge_sigma = er.sigma
        self.xi_edge = np.stack([edge_point(e, er.tau) for e in range(3)])
        self.B_edge = np.stack([b.eval(self.xi_edge[e]) for e in range(3)])
        # neighbour trace table: their edge, reversed traversal
        B_rev = self.B_edge[:, ::-1, :]
        self.T_ext = [B_rev[topology.nbr_edge[:, e]] for e in range(3)]
        self.EW_edge = [
            self.B_edge[e] * (er.sigma * REF_EDGE_LENGTHS[e])[:, None]
            for e in range(3)
        ]

        self.zxs = zxs_rule(k)
        self.B_zxs = b.eval(self.zxs.points)

        err_rule = volume_rule(min(2 * k + 2, 8))
        self.xi_err = err_rule.points
        self.w_err = err_rule.weights
        self.B_err = b.eval(err_rule.points)

        # flattened all-edges tables (block index b = edge*nb + gauss point),
        # so one assembly pass covers the whole cell boundary
        nb = er.tau.size
        self.nb_edge = nb
        self.xi_edge_all = self.xi_edge.reshape(3 * nb, 2)
        self.B_edge_all = self.B_edge.reshape(3 * nb, self.r)
        self.EW_all_T = np.concatenate(self.EW_edge, axis=0).T   # (r, 3nb)
        self.GW_vol_T = np.ascontiguousarray(
            self.GW_vol.transpose(1, 0, 2).reshape(self.r, -1))  # (r, nq*2)
        self.ext_cell = np.repeat(topology.nbr_cell, nb, axis=1)  # (nc, 3nb)
        self.T_ext_all = np.concatenate(self.T_ext, axis=1)       # (nc, 3nb, r)
        self.bnd_mask_all = np.repeat(topology.boundary, nb, axis=1)
        self._has_boundary = bool(topology.boundary.any())

    # .. evaluation helpers ..................................................

    def values_at(self, coeffs, table):
        """Field values at tabulated reference points; (nc, npts, nvars)."""
        return np.matmul(table, coeffs)

    def cell_averages(self, coeffs):
        return math.sqrt(2.0) * coeffs[:, 0, :]

    def point_range(self, coeffs):
        """Global (min, max) over the bound-preserving points (scalars)."""
        vals = self.values_at(coeffs, self.B_zxs)
        return float(vals.min()), float(vals.max())

    def project(self, exact, stage_geom, t):
        """L2 projection of an exact solution at one time level.

        Orthonormality makes the projection a plain quadrature:
        c_m = sum_q w_q u(chi(xi_q), t) phi_m(xi_q) with a rule of
        degree 2k+2.
        """
        x = np.einsum("cde,qe->cqd", stage_geom.A, self.xi_err) \
            + stage_geom.v1[:, None, :]
        u = np.asarray(exact(x[..., 0], x[..., 1], t))
        return np.einsum("q,qm,cqv->cmv", self.w_err, self.B_err, u)

    # .. residual ............................................................

    def _edge_omega_all(self, stage):
        """Grid velocity at every boundary quadrature block; (nc, 3nb, 2)."""
        return (np.matmul(stage.Adot, self.xi_edge_all.T).swapaxes(1, 2)
                + stage.v1dot[:, None, :])

    def _edge_normals_all(self, stage):
        return np.repeat(stage.scaled_normals, self.nb_edge, axis=1)

    def _exterior_trace_all(self, coeffs, stage, t):
        u_ext = np.matmul(self.T_ext_all[:, :, None, :],
                          coeffs[self.ext_cell])[:, :, 0, :]
        if self._has_boundary:
            idx_c, idx_b = np.nonzero(self.bnd_mask_all)
            xi = self.xi_edge_all[idx_b]
            x = np.einsum("cde,ce->cd", stage.A[idx_c], xi) + stage.v1[idx_c]
            u_ext[idx_c, idx_b] = self.bc_solution(x[:, 0], x[:, 1], t)
        return u_ext

    def global_edge_lambda(self, stage):
        """Per-cell/edge interval dissipation bound at one stage time."""
        m, M = self.bounds
        omega = self._edge_omega_all(stage)
        n = self._edge_normals_all(stage)
        lam = wave_speed_interval(self.model, m, M, omega, n)
        return lam.reshape(-1, 3, self.nb_edge).max(axis=2)

    def residual(self, coeffs, stage, edge_lambda=None):
        """Grid-relative DG residual G at one stage; (nc, r, nvars).

        ``edge_lambda`` (nc, 3) overrides the local trace-based flux
        dissipation (used by the global-bound mode).
        """
        model = self.model
        t = stage.t

        u_vol = self.values_at(coeffs, self.B_vol)
        if isinstance(model, Euler):
            model.validate(u_vol)
        omega_vol = (np.matmul(stage.Adot, self.xi_vol.T).swapaxes(1, 2)
                     + stage.v1dot[:, None, :])
        g = ale_flux(model, omega_vol, u_vol)
        adjg = np.matmul(stage.adjA[:, None], g)              # (nc, q, d, v)
        nc = coeffs.shape[0]
        out = np.matmul(self.GW_vol_T, adjg.reshape(nc, -1, self.nvars))

        u_int = self.values_at(coeffs, self.B_edge_all)
        u_ext = self._exterior_trace_all(coeffs, stage, t)
        if isinstance(model, Euler):
            model.validate(u_int)
            model.validate(u_ext)
        omega = self._edge_omega_all(stage)
        n = self._edge_normals_all(stage)
        lam = None if edge_lambda is None else \
            np.repeat(edge_lambda, self.nb_edge, axis=1)
        ghat = lax_friedrichs(model, u_int, u_ext, omega, n, lam=lam)
        out -= np.matmul(self.EW_all_T, ghat)
        return out


# -- staged jacobians and stepping --------------------------------------------


def gcl_stage_jacobians(step_geom, scheme):
    """Staged jacobians J^{n,i} for one step; shape (stages + 1, nc).

    Row 0 is the geometric jacobian at t_n; each later row applies the
    Shu-Osher combination with exact stage-time values of d(det A)/dt.
    For schemes of order >= 2 the last row equals det A(t_{n+1}) to
    roundoff; for forward Euler it differs at O(dt^2) per step.
    """
    s = scheme.stages
    dt = step_geom.dt
    stage_times = step_geom.t_n + scheme.gamma * dt
    Jdot = np.stack([step_geom.jacobian_dot(t) for t in stage_times])
    J = np.empty((s + 1, step_geom.topology.num_cells))
    J[0] = step_geom.jacobian(step_geom.t_n)
    for i in range(1, s + 1):
        J[i] = scheme.alpha[i - 1, :i] @ J[:i] \
            + dt * (scheme.beta[i - 1, :i] @ Jdot[:i])
    return J


def rk_step(disc, coeffs, step_geom, scheme, stage_postprocess=None):
    """Advance one step [t_n, t_n + dt]; returns (coeffs, staged jacobians).

    ``stage_postprocess`` (e.g. a limiter) is applied to every stage
    state including the last one, before the final rescale to the
    geometric jacobian.
    """
    s = scheme.stages
    dt = step_geom.dt
    stage_times = step_geom.t_n + scheme.gamma * dt
    J = gcl_stage_jacobians(step_geom, scheme)

    stages_geo = [step_geom.at(t) for t in stage_times]
    lam = None
    C = [coeffs]
    G = []
    for i in range(1, s + 1):
        geo = stages_geo[i - 1]
        if disc.lambda_mode == "global":
            lam = disc.global_edge_lambda(geo)
        G.append(disc.residual(C[i - 1], geo, edge_lambda=lam))
        num = np.zeros_like(coeffs)
        for j in range(i):
            a = scheme.alpha[i - 1, j]
            b = scheme.beta[i - 1, j]
            if a != 0.0:
                num += a * J[j][:, None, None] * C[j]
            if b != 0.0:
                num += dt * b * G[j]
        Ci = num / J[i][:, None, None]
        if stage_postprocess is not None:
            Ci = stage_postprocess(Ci)
        C.append(Ci)

    J_geom = step_geom.jacobian(step_geom.t_np1)
    out = C[s] * (J[s] / J_geom)[:, None, None]
    return out, J


# -- time step selection ------------------------------------------------------


def _edge_lambda_bound(disc, stage, coeffs):
    """Per-cell/edge dissipation bound used by the CFL estimate."""
    model = disc.model
    omega = disc._edge_omega_all(stage)
    n = disc._edge_normals_all(stage)
    if isinstance(model, Euler):
        u_int = disc.values_at(coeffs, disc.B_edge_all)
        u_ext = disc._exterior_trace_all(coeffs, stage, stage.t)
        lam = wave_speed_states(model, u_int, u_ext, omega, n)
    else:
        if disc.bounds is not None:
            m, M = disc.bounds
        else:
            m, M = disc.point_range(coeffs)
        lam = wave_speed_interval(model, m, M, omega, n)
    return lam.reshape(-1, 3, disc.nb_edge).max(axis=2)


def compute_dt(disc, motion, coeffs, t_n, t_final, cfl_safety,
               prev_dt=None, dt_fixed=None, dt_max=None):
    """Admissible step size from the cell-average CFL condition.

    Per cell the condition reads

        dt * (sigma_hat |div omega| |K| + sum_e lambda_e l_e) <= cfl * sigma_hat * |K|_min,

    with |K|_min the minimum cell area over the step (conservative) and
    lambda the scaled-normal wave-speed bound.  The bound depends on the
    step geometry itself, so a short fixed-point iteration refines a
    trial dt; trial intervals that would invert a cell shrink the trial.
    """
    remaining = t_final - t_n
    if remaining <= 0:
        raise SolverError(f"no time left at t={t_n}")
    if dt_fixed is not None:
        return min(dt_fixed, remaining)

    sigma_hat = disc.zxs.sigma_hat
    topo = disc.topology
    dt_try = prev_dt * 1.15 if prev_dt else remaining
    dt_try = min(dt_try, remaining)

    for _ in range(40):
        step = StepGeometry(topo, motion, t_n, t_n + dt_try)
        if step.min_jacobian().min() <= 0.0:
            dt_try *= 0.5
            continue
        denom = np.zeros(topo.num_cells)
        for t_s in (t_n, t_n + dt_try):
            stage = step.at(t_s)
            lam = _edge_lambda_bound(disc, stage, coeffs)
            cell = (sigma_hat * np.abs(stage.Jdot) / 2.0
                    + lam @ REF_EDGE_LENGTHS)
            denom = np.maximum(denom, cell)
        area_min = step.min_jacobian() / 2.0
        with np.errstate(divide="ignore"):
            per_cell = np.where(denom > 0.0,
                                cfl_safety * sigma_hat * area_min / denom,
                                np.inf)
        dt_bound = float(per_cell.min())
        dt_bound = min(dt_bound, remaining if dt_max is None else dt_max,
                       remaining)
        if dt_bound >= 0.999 * dt_try:
            return min(dt_try, dt_bound)
        dt_try = dt_bound
    raise SolverError("time step selection did not settle")


# -- run driver ---------------------------------------------------------------


@dataclass
class RunResult:
    """Final state and per-run monitors of a single time integration."""

    coeffs: np.ndarray
    t: float
    steps: int
    disc: "Discretization"
    motion: object
    scheme: RKScheme
    mass_initial: np.ndarray = None
    mass_drift: float = 0.0
    l2_initial: float = 0.0
    l2_final: float = 0.0
    l2_max_growth: float = -math.inf
    bounds_margin: float = math.inf
    constant_deviation_linf: float = 0.0
    constant_deviation_l2: float = 0.0
    wall_time: float = 0.0
    history: list = field(default_factory=list)


def _mass(disc, coeffs, J):
    # sum_K |K| * mean = sum_K (J/2) sqrt(2) c_0, per variable
    return (J @ coeffs[:, 0, :]) / math.sqrt(2.0)


def _l2_norm_sq(coeffs, J):
    return float(np.einsum("c,cmv->", J, coeffs ** 2))


def run(topology, motion, model, initial, k, t_final, scheme,
        cfl_safety=0.3, bc_solution=None, lambda_mode="local", bounds=None,
        dt_fixed=None, stage_postprocess=None, record_history=False,
        monitor=None):
    """Project the initial state and march to t_final.

    ``monitor(step_index, t, coeffs, disc)`` is called after every
    accepted step.  Returns a RunResult with conservation/L2/bounds
    monitors filled in (bounds monitoring only for scalar models with
    known bounds).
    """
    t_start = time.perf_counter()
    if isinstance(scheme, str):
        scheme = rk_scheme(scheme)
    disc = Discretization(topology, model, k, bc_solution=bc_solution,
                          lambda_mode=lambda_mode, bounds=bounds)

    geo0 = StepGeometry(topology, motion, 0.0,
                        t_final if t_final > 0 else 1.0).at(0.0)
    coeffs = disc.project(initial, geo0, 0.0)

    result = RunResult(coeffs=coeffs, t=0.0, steps=0, disc=disc,
                       motion=motion, scheme=scheme)
    result.mass_initial = _mass(disc, coeffs, geo0.J)
    result.l2_initial = _l2_norm_sq(coeffs, geo0.J)
    result.l2_final = result.l2_initial

    t = 0.0
    steps = 0
    prev_dt = None
    while t < t_final - 1e-14 * max(1.0, t_final):
        dt = compute_dt(disc, motion, coeffs, t, t_final, cfl_safety,
                        prev_dt=prev_dt, dt_fixed=dt_fixed)
        step_geom = StepGeometry(topology, motion, t, t + dt)
        coeffs, _ = rk_step(disc, coeffs, step_geom, scheme,
                            stage_postprocess=stage_postprocess)
        t += dt
        prev_dt = dt
        steps += 1
        if steps > 10_000_000:
            raise SolverError("step limit exceeded")

        J = step_geom.jacobian(t)
        mass = _mass(disc, coeffs, J)
        result.mass_drift = max(result.mass_drift,
                                float(np.abs(mass - result.mass_initial).max()))
        l2 = _l2_norm_sq(coeffs, J)
        result.l2_final = l2
        result.l2_max_growth = max(result.l2_max_growth,
                                   l2 - result.l2_initial)
        if bounds is not None and model.nvars == 1:
            vals = disc.values_at(coeffs, disc.B_zxs)
            result.bounds_margin = min(
                result.bounds_margin,
                float(min(bounds[1] - vals.max(), vals.min() - bounds[0])),
            )
        if record_history:
            result.history.append((t, dt))
        if monitor is not None:
            monitor(steps, t, coeffs, disc)

    result.coeffs = coeffs
    result.t = t
    result.steps = steps
    result.wall_time = time.perf_counter() - t_start
    return result
