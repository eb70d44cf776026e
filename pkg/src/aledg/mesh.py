"""Moving triangular meshes: topology, motion laws, per-cell geometry.

A mesh is a fixed topology (vertices, positively oriented triangles,
edge adjacency) plus a motion law giving vertex positions at discrete
time levels.  Within a time step vertices travel along straight lines,
so each cell's reference map

    x = chi(xi, t) = A(t) xi + v1(t)

is affine with A linear in t, its jacobian J = det A quadratic in t, and
the grid velocity at a frozen reference point,

    omega(xi) = Adot xi + v1dot,

constant over the step.  All geometry needed by a solver stage is
assembled in bulk over cells by :class:`StepGeometry`.
"""

import math
from dataclasses import dataclass

import numpy as np

from .basis_quadrature import REF_EDGE_VERTEX_IDS, REF_VERTICES

T0_SINUSOIDAL = math.sqrt(125.0)


class MeshError(ValueError):
    """Invalid mesh construction or degenerate/inverted cell geometry."""


# -- topology -----------------------------------------------------------------


@dataclass(frozen=True)
class MeshTopology:
    """Criss-cross triangulation of a rectangle with edge adjacency.

    ``cells[c]`` lists three vertex ids in counter-clockwise order.  For
    cell c and local edge e (opposite local vertex e), ``nbr_cell[c, e]``
    is the adjacent cell (-1 on a non-periodic boundary), ``nbr_edge``
    its local edge there, and ``shift[c, e]`` the translation that moves
    the neighbour's physical edge points onto ours (nonzero only across
    a periodic seam).
    """

    vertices0: np.ndarray
    cells: np.ndarray
    nbr_cell: np.ndarray
    nbr_edge: np.ndarray
    shift: np.ndarray
    boundary: np.ndarray
    bc: str
    h0: float
    box: tuple

    @property
    def num_vertices(self):
        return self.vertices0.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]


def _grid_divisions(length, h0, axis):
    if h0 <= 0.0:
        raise MeshError(f"mesh size h0 must be positive, got {h0}")
    n = length / h0
    n_int = round(n)
    if n_int < 1 or abs(n - n_int) > 1e-9 * max(1.0, n):
        raise MeshError(
            f"{axis}-extent {length} is not an integer multiple of h0={h0}"
        )
    return n_int


def build_criss_mesh(box, h0, bc="periodic", split="ll-ur"):
    """Uniform criss mesh of the rectangle ``box = (xl, xr, yl, yr)``.

    Each h0 x h0 square is split along one diagonal into two positively
    oriented triangles; ``split`` picks the diagonal, ``"ll-ur"``
    (lower-left to upper-right, the default) or ``"ul-lr"``.  ``bc``
    selects ``"periodic"`` (edges on opposite sides of the box are
    glued, with translation shifts recorded) or ``"dirichlet"``
    (boundary edges are flagged and get exterior data from a prescribed
    solution).
    """
    xl, xr, yl, yr = box
    if bc not in ("periodic", "dirichlet"):
        raise MeshError(f"unknown boundary treatment {bc!r}")
    if split not in ("ll-ur", "ul-lr"):
        raise MeshError(f"unknown split pattern {split!r}")
    nx = _grid_divisions(xr - xl, h0, "x")
    ny = _grid_divisions(yr - yl, h0, "y")

    xs = xl + h0 * np.arange(nx + 1)
    ys = yl + h0 * np.arange(ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            a = vid(i, j)
            b = vid(i + 1, j)
            c = vid(i + 1, j + 1)
            d = vid(i, j + 1)
            if split == "ll-ur":
                cells.append((a, b, c))
                cells.append((a, c, d))
            else:
                cells.append((a, b, d))
                cells.append((b, c, d))
    cells = np.array(cells, dtype=np.int64)
    nc = cells.shape[0]

    # adjacency: key each edge by its midpoint in doubled index space,
    # which is unique per edge and identical for periodic partners after
    # wrapping (vertex-pair keys collide on 2-cell-wide periodic grids)
    def edge_key(va, vb):
        ja, ia = divmod(va, nx + 1)
        jb, ib = divmod(vb, nx + 1)
        mi, mj = ia + ib, ja + jb
        if bc == "periodic":
            mi, mj = mi % (2 * nx), mj % (2 * ny)
        return mi, mj

    edge_table = {}
    for c in range(nc):
        for e in range(3):
            la, lb = REF_EDGE_VERTEX_IDS[e]
            key = edge_key(cells[c, la], cells[c, lb])
            edge_table.setdefault(key, []).append((c, e))

    nbr_cell = np.full((nc, 3), -1, dtype=np.int64)
    nbr_edge = np.full((nc, 3), -1, dtype=np.int64)
    shift = np.zeros((nc, 3, 2))
    boundary = np.zeros((nc, 3), dtype=bool)
    for key, owners in edge_table.items():
        if len(owners) == 1:
            (c, e), = owners
            boundary[c, e] = True
            continue
        if len(owners) != 2:
            raise MeshError(f"edge shared by {len(owners)} cells")
        (c1, e1), (c2, e2) = owners
        for (ca, ea), (cb, eb) in (((c1, e1), (c2, e2)), ((c2, e2), (c1, e1))):
            nbr_cell[ca, ea] = cb
            nbr_edge[ca, ea] = eb
            pa = vertices[cells[ca, REF_EDGE_VERTEX_IDS[ea][0]]]
            qb = vertices[cells[cb, REF_EDGE_VERTEX_IDS[eb][1]]]
            # opposite traversal: our first endpoint is their second
            shift[ca, ea] = pa - qb
    if bc == "periodic" and boundary.any():
        raise MeshError("periodic mesh left unmatched edges")

    return MeshTopology(
        vertices0=vertices,
        cells=cells,
        nbr_cell=nbr_cell,
        nbr_edge=nbr_edge,
        shift=shift,
        boundary=boundary,
        bc=bc,
        h0=h0,
        box=tuple(box),
    )


# -- motion laws --------------------------------------------------------------


class MeshMotion:
    """Vertex positions at discrete time levels.

    ``coords(t)`` returns all vertex coordinates at level t; the solver
    interpolates linearly between the levels it chooses.  ``final_time``
    (if not None) bounds the valid range of t.
    """

    final_time = None

    def _check_time(self, t):
        if t < -1e-12 or (self.final_time is not None
                          and t > self.final_time + 1e-12):
            raise MeshError(
                f"time {t} outside motion range [0, {self.final_time}]"
            )

    def coords(self, t):
        raise NotImplementedError

    def vertex_position(self, vid, t):
        c = self.coords(t)
        if not 0 <= vid < c.shape[0]:
            raise MeshError(f"vertex id {vid} out of range [0, {c.shape[0]})")
        return c[vid]


class StaticMotion(MeshMotion):
    """No motion; every level returns the initial coordinates."""

    def __init__(self, coords0, final_time=None):
        self.coords0 = np.asarray(coords0, dtype=float)
        self.final_time = final_time

    def coords(self, t):
        self._check_time(t)
        return self.coords0


class SinusoidalMotion(MeshMotion):
    """Doubly periodic sinusoidal vertex oscillation, boundary fixed.

    With (X, Y) the initial position relative to the box and
    (Lx, Ly) the box extents,

        x(t) = X + ax sin(2 pi X / Lx) sin(2 pi Y / Ly) sin(2 pi t / t0)
        y(t) = Y + ay sin(2 pi X / Lx) sin(2 pi Y / Ly) sin(4 pi t / t0)

    The spatial factor vanishes on every box side, so the boundary (and
    any periodic seam copy) never moves and positivity of cell jacobians
    holds for the default amplitudes on the meshes used here.
    """

    def __init__(self, coords0, box, t0=T0_SINUSOIDAL, ax=0.3, ay=0.2,
                 final_time=None):
        self.coords0 = np.asarray(coords0, dtype=float)
        self.box = box
        self.t0 = t0
        self.ax = ax
        self.ay = ay
        self.final_time = final_time
        xl, xr, yl, yr = box
        self._spatial = (np.sin(2.0 * np.pi * (self.coords0[:, 0] - xl) / (xr - xl))
                         * np.sin(2.0 * np.pi * (self.coords0[:, 1] - yl) / (yr - yl)))

    def coords(self, t):
        self._check_time(t)
        out = self.coords0.copy()
        out[:, 0] += self.ax * self._spatial * math.sin(2.0 * np.pi * t / self.t0)
        out[:, 1] += self.ay * self._spatial * math.sin(4.0 * np.pi * t / self.t0)
        return out


class TwoMeshMotion(MeshMotion):
    """Linear interpolation between two meshes of the same topology."""

    def __init__(self, coords0, coords1, final_time):
        self.coords0 = np.asarray(coords0, dtype=float)
        self.coords1 = np.asarray(coords1, dtype=float)
        if self.coords0.shape != self.coords1.shape:
            raise MeshError("two-mesh motion endpoints differ in shape")
        if final_time is None or final_time <= 0:
            raise MeshError("two-mesh motion needs a positive final time")
        self.final_time = final_time

    def coords(self, t):
        self._check_time(t)
        w = t / self.final_time
        return self.coords0 + w * (self.coords1 - self.coords0)

    @property
    def max_speed(self):
        v = (self.coords1 - self.coords0) / self.final_time
        return float(np.sqrt((v ** 2).sum(axis=1)).max())


def vertex_position(motion, vid, t):
    """Position of one vertex at time level t (validates vid and t)."""
    return motion.vertex_position(vid, t)


# -- per-step geometry --------------------------------------------------------


@dataclass(frozen=True)
class StageGeometry:
    """All-cell affine-map data at one instant inside a step.

    ``scaled_normals[c, e] = adj(A_c)^T n_ref_e`` is the outward normal
    scaled so that its norm times the reference edge length equals the
    physical edge length; ``gcl_div = Jdot / J`` is the divergence of the
    grid velocity.
    """

    t: float
    A: np.ndarray
    Adot: np.ndarray
    v1: np.ndarray
    v1dot: np.ndarray
    J: np.ndarray
    Jdot: np.ndarray
    adjA: np.ndarray
    gcl_div: np.ndarray
    scaled_normals: np.ndarray

    def map_to_physical(self, xi):
        """Physical image of reference point(s) xi in every cell.

        A single point (2,) maps to (num_cells, 2); a batch (q, 2) maps
        to (num_cells, q, 2).
        """
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            return np.einsum("cde,e->cd", self.A, xi) + self.v1
        return np.einsum("cde,qe->cqd", self.A, xi) + self.v1[:, None, :]

    def grid_velocity(self, xi):
        """omega(xi) = Adot xi + v1dot in every cell (shapes as above)."""
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            return np.einsum("cde,e->cd", self.Adot, xi) + self.v1dot
        return np.einsum("cde,qe->cqd", self.Adot, xi) + self.v1dot[:, None, :]


def _det2(M):
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def _adj2(M):
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    out[..., 1, 1] = M[..., 0, 0]
    return out


# reference outward normals as rows, for scaled-normal assembly n = adj(A)^T n_ref
_REF_NORMAL_ROWS = np.array([[1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)],
                             [-1.0, 0.0], [0.0, -1.0]])


class StepGeometry:
    """Geometry of every cell over one step [t_n, t_np1].

    Vertex positions are sampled from the motion at the two step
    boundaries and interpolated linearly in between, which is exactly
    how the time discretisation defines the moving mesh.
    """

    def __init__(self, topology, motion, t_n, t_np1):
        if t_np1 <= t_n:
            raise MeshError(f"empty step [{t_n}, {t_np1}]")
        self.topology = topology
        self.t_n = t_n
        self.t_np1 = t_np1
        self.dt = t_np1 - t_n
        coords_n = motion.coords(t_n)
        coords_np1 = motion.coords(t_np1)
        cells = topology.cells
        self.Vn = coords_n[cells]                     # (nc, 3, 2)
        self.Vdot = (coords_np1[cells] - self.Vn) / self.dt
        self.coords_n = coords_n
        self.coords_np1 = coords_np1
        # J(t_n + s) = Jn + s Jdot_n + s^2 det(Adot)
        A_n = self._A_from(self.Vn)
        self._Adot = self._A_from(self.Vdot, is_velocity=True)
        self._Jn = _det2(A_n)
        self._Jdot_n = self._trace_adj_dot(A_n)
        self._Jquad = _det2(self._Adot)

    @staticmethod
    def _A_from(V, is_velocity=False):
        A = np.empty((V.shape[0], 2, 2))
        A[:, :, 0] = V[:, 1] - V[:, 0]
        A[:, :, 1] = V[:, 2] - V[:, 0]
        return A

    def _trace_adj_dot(self, A):
        adj = _adj2(A)
        Ad = self._Adot
        return (adj[:, 0, 0] * Ad[:, 0, 0] + adj[:, 0, 1] * Ad[:, 1, 0]
                + adj[:, 1, 0] * Ad[:, 0, 1] + adj[:, 1, 1] * Ad[:, 1, 1])

    def jacobian(self, t):
        """det A(t) for all cells (quadratic in t, evaluated exactly)."""
        s = t - self.t_n
        return self._Jn + s * self._Jdot_n + s * s * self._Jquad

    def jacobian_dot(self, t):
        """d/dt det A(t) = tr(adj(A(t)) Adot) for all cells."""
        s = t - self.t_n
        return self._Jdot_n + 2.0 * s * self._Jquad

    def min_jacobian(self):
        """Per-cell minimum of det A(t) over the whole step."""
        a, b, c = self._Jquad, self._Jdot_n, self._Jn
        ends = np.minimum(self.jacobian(self.t_n), self.jacobian(self.t_np1))
        curved = a != 0.0
        s_star = np.zeros_like(a)
        np.divide(-b, 2.0 * a, out=s_star, where=curved)
        vertex_val = np.array(c)
        np.subtract(c, b * b / np.where(curved, 4.0 * a, 1.0),
                    out=vertex_val, where=curved)
        inside = (a > 0.0) & (s_star > 0.0) & (s_star < self.dt)
        return np.where(inside, np.minimum(ends, vertex_val), ends)

    def at(self, t):
        """StageGeometry snapshot at time t in [t_n, t_np1]."""
        s = t - self.t_n
        V = self.Vn + s * self.Vdot
        A = self._A_from(V)
        J = _det2(A)
        if not (J > 0.0).all():
            bad = int(np.argmin(J))
            raise MeshError(
                f"inverted or degenerate cell {bad} at t={t}: J={J[bad]:.3e}"
            )
        adjA = _adj2(A)
        Jdot = self.jacobian_dot(t)
        normals = np.matmul(_REF_NORMAL_ROWS, adjA)
        return StageGeometry(
            t=t,
            A=A,
            Adot=self._Adot,
            v1=V[:, 0],
            v1dot=self.Vdot[:, 0],
            J=J,
            Jdot=Jdot,
            adjA=adjA,
            gcl_div=Jdot / J,
            scaled_normals=normals,
        )


@dataclass(frozen=True)
class CellGeometry:
    """Affine-map data of a single cell at one instant (see StageGeometry)."""

    cell: int
    t: float
    A: np.ndarray
    A_inv: np.ndarray
    Adot: np.ndarray
    v1: np.ndarray
    v1dot: np.ndarray
    J: float
    Jdot: float
    gcl_div: float
    scaled_normals: np.ndarray

    def map_to_physical(self, xi):
        """Physical position of reference point(s) xi."""
        return np.asarray(xi) @ self.A.T + self.v1

    def grid_velocity(self, xi):
        """omega(xi) = Adot xi + v1dot (time-constant within the step)."""
        return np.asarray(xi) @ self.Adot.T + self.v1dot


def cell_geometry(topology, motion, cell, t_n, t_np1, t):
    """Single-cell geometry at time t inside the step [t_n, t_np1]."""
    if not 0 <= cell < topology.num_cells:
        raise MeshError(f"cell id {cell} out of range [0, {topology.num_cells})")
    if not t_n <= t <= t_np1:
        raise MeshError(f"time {t} outside step [{t_n}, {t_np1}]")
    step = StepGeometry(topology, motion, t_n, t_np1)
    stage = step.at(t)
    return CellGeometry(
        cell=cell,
        t=t,
        A=stage.A[cell],
        A_inv=stage.adjA[cell] / stage.J[cell],
        Adot=stage.Adot[cell],
        v1=stage.v1[cell],
        v1dot=stage.v1dot[cell],
        J=float(stage.J[cell]),
        Jdot=float(stage.Jdot[cell]),
        gcl_div=float(stage.gcl_div[cell]),
        scaled_normals=stage.scaled_normals[cell],
    )


def stage_at(topology, motion, t, span=1e-3):
    """Instantaneous StageGeometry at time t (no stepping context).

    Builds a short step ending or starting at t, staying inside the
    motion's valid time range.
    """
    hi = motion.final_time
    if hi is None or t + span <= hi:
        return StepGeometry(topology, motion, t, t + span).at(t)
    if t - span >= 0.0:
        return StepGeometry(topology, motion, t - span, t).at(t)
    raise MeshError(f"cannot bracket t={t} within the motion range")


def scaled_edge_normal(geom, edge):
    """Scaled outward normal adj(A)^T n_ref of one edge of a cell."""
    return geom.scaled_normals[edge]


def map_to_physical(geom, xi):
    """Physical image of reference point(s) xi under a cell's affine map."""
    return geom.map_to_physical(xi)


# -- VTK output ---------------------------------------------------------------


def write_vtk(path, coords, cells, point_data=None, cell_data=None,
              title="aledg mesh"):
    """Write a legacy ASCII VTK unstructured grid of triangles.

    ``point_data``/``cell_data`` map field names to per-vertex/per-cell
    scalar arrays (or (n, 2) arrays, written as 3-vectors with z = 0).
    """
    coords = np.asarray(coords, dtype=float)
    cells = np.asarray(cells)
    nv, nc = coords.shape[0], cells.shape[0]
    with open(path, "w", encoding="ascii") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(title + "\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {nv} double\n")
        for x, y in coords:
            f.write(f"{x:.16g} {y:.16g} 0\n")
        f.write(f"CELLS {nc} {4 * nc}\n")
        for a, b, c in cells:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {nc}\n")
        for _ in range(nc):
            f.write("5\n")

        def write_fields(data, n):
            for name, arr in data.items():
                arr = np.asarray(arr, dtype=float)
                if arr.ndim == 1:
                    f.write(f"SCALARS {name} double 1\n")
                    f.write("LOOKUP_TABLE default\n")
                    for v in arr:
                        f.write(f"{v:.16g}\n")
                else:
                    f.write(f"VECTORS {name} double\n")
                    for vx, vy in arr:
                        f.write(f"{vx:.16g} {vy:.16g} 0\n")

        if point_data:
            f.write(f"POINT_DATA {nv}\n")
            write_fields(point_data, nv)
        if cell_data:
            f.write(f"CELL_DATA {nc}\n")
            write_fields(cell_data, nc)
