"""Taylor-Hood (P2 velocity, P1 pressure) elements on triangle meshes.

Velocity unknowns live at vertices and edge midpoints, components blocked as
[all x values, all y values]; pressure unknowns live at vertices. Saddle
systems carry one extra Lagrange multiplier row/column enforcing a zero mean
pressure. Volume terms use a six-point degree-4 triangle rule, boundary terms
a three-point Gauss rule per edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .errors import MeshError, SingularMatrixError
from .mesh import BoundaryTag, TriMesh, compute_normals

# degree-4 six-point rule on the reference triangle, weights sum to 1/2
_A1, _B1 = 0.445948490915965, 0.108103018168070
_A2, _B2 = 0.091576213509771, 0.816847572980459
_W1, _W2 = 0.111690794839005, 0.054975871827661
TRI_BARY = np.array([
    [1.0 - 2.0 * _A1, _A1, _A1],
    [_A1, 1.0 - 2.0 * _A1, _A1],
    [_A1, _A1, 1.0 - 2.0 * _A1],
    [1.0 - 2.0 * _A2, _A2, _A2],
    [_A2, 1.0 - 2.0 * _A2, _A2],
    [_A2, _A2, 1.0 - 2.0 * _A2],
])
TRI_WEIGHTS = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

# three-point Gauss rule on [0, 1], exact through degree 5
_G = np.sqrt(15.0) / 10.0
EDGE_POINTS = np.array([0.5 - _G, 0.5, 0.5 + _G])
EDGE_WEIGHTS = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


@dataclass(frozen=True)
class QuadratureRule:
    tri_bary: np.ndarray
    tri_weights: np.ndarray
    edge_points: np.ndarray
    edge_weights: np.ndarray


def default_rule() -> QuadratureRule:
    return QuadratureRule(TRI_BARY, TRI_WEIGHTS, EDGE_POINTS, EDGE_WEIGHTS)


def p2_values(lam: np.ndarray) -> np.ndarray:
    """P2 basis values at barycentric points lam (..., 3) -> (..., 6).

    Local order: three vertex functions, then the midside function opposite
    each vertex (edge 0 joins vertices 1 and 2, and so on).
    """
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                     4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1], axis=-1)


def p2_ref_grads(lam: np.ndarray) -> np.ndarray:
    """Reference-coordinate gradients of the P2 basis, shape (..., 6, 2)."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    z = np.zeros_like(l0)
    gx = np.stack([1 - 4 * l0, 4 * l1 - 1, z, 4 * l2, -4 * l2,
                   4 * (l0 - l1)], axis=-1)
    gy = np.stack([1 - 4 * l0, z, 4 * l2 - 1, 4 * l1, 4 * (l0 - l2),
                   -4 * l1], axis=-1)
    return np.stack([gx, gy], axis=-1)


def p1_values(lam: np.ndarray) -> np.ndarray:
    return np.asarray(lam)


_P1_REF_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def edge_trace_values(s: np.ndarray) -> np.ndarray:
    """P2 trace on an edge at parameters s in [0, 1]: values for the two end
    vertices and the midside node, shape (..., 3)."""
    s = np.asarray(s)
    return np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)],
                    axis=-1)


class TaylorHoodSpace:
    """Mesh-bound discretization tables.

    The space owns the edge enumeration (midside nodes are vertex count +
    edge index), per-triangle geometry factors, quadrature point coordinates,
    and physical basis gradients. Instances are immutable; geometry-only
    matrices (mass, stiffness, divergence, pressure load) are cached lazily.
    """

    def __init__(self, mesh: TriMesh, rule: QuadratureRule | None = None):
        self.mesh = mesh
        self.rule = rule or default_rule()
        tris = mesh.triangles

        pairs = np.concatenate([tris[:, [1, 2]], tris[:, [2, 0]],
                                tris[:, [0, 1]]])
        pairs = np.sort(pairs, axis=1)
        self.edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        self.tri_edges = inv.reshape(3, -1).T  # (n_t, 3), local edge k opp vertex k

        self.n_vertices = mesh.n_nodes
        self.n_edges = len(self.edges)
        self.n_p2 = self.n_vertices + self.n_edges
        self.n_u = 2 * self.n_p2
        self.n_p = self.n_vertices
        self.n_sys = self.n_u + self.n_p + 1

        mids = 0.5 * (mesh.nodes[self.edges[:, 0]] + mesh.nodes[self.edges[:, 1]])
        self.p2_coords = np.vstack([mesh.nodes, mids])
        self.tri_p2 = np.hstack([tris, self.n_vertices + self.tri_edges])

        p = mesh.nodes[tris]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        self.detJ = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv_jac = np.empty_like(jac)
        inv_jac[:, 0, 0] = jac[:, 1, 1]
        inv_jac[:, 0, 1] = -jac[:, 0, 1]
        inv_jac[:, 1, 0] = -jac[:, 1, 0]
        inv_jac[:, 1, 1] = jac[:, 0, 0]
        inv_jac /= self.detJ[:, None, None]
        self.inv_jac = inv_jac

        lam = self.rule.tri_bary
        self.qw = self.rule.tri_weights
        self.N = p2_values(lam)                       # (nq, 6)
        dN = p2_ref_grads(lam)                        # (nq, 6, 2)
        self.G = np.einsum("qib,tba->tqia", dN, inv_jac)
        xi = lam[:, 1:]                               # reference coordinates
        self.qpoints = (p[:, None, 0, :]
                        + np.einsum("tab,qb->tqa", jac, xi))
        self.P1 = p1_values(lam)                      # (nq, 3)
        self.gradP1 = np.einsum("ib,tba->tia", _P1_REF_GRADS, inv_jac)

        self._edge_index = {(int(a), int(b)): k
                            for k, (a, b) in enumerate(self.edges)}
        self._cache: dict = {}

    # -- DOF bookkeeping ------------------------------------------------------

    def velocity_dof(self, nodes, component):
        return component * self.n_p2 + np.asarray(nodes)

    def boundary_p2_nodes(self, tag: BoundaryTag) -> np.ndarray:
        """P2 node indices (vertices and midsides) on one tagged loop."""
        sel = self.mesh.boundary_tags == int(tag)
        edges = self.mesh.boundary_edges[sel]
        verts = np.unique(edges)
        mids = np.array([self.n_vertices
                         + self._edge_index[(min(int(a), int(b)),
                                             max(int(a), int(b)))]
                         for a, b in edges], dtype=np.int64)
        return np.concatenate([verts, np.sort(mids)])

    def velocity_dofs(self, tag: BoundaryTag) -> np.ndarray:
        nodes = self.boundary_p2_nodes(tag)
        return np.concatenate([nodes, self.n_p2 + nodes])

    def all_boundary_tags(self):
        return [BoundaryTag(int(t))
                for t in np.unique(self.mesh.boundary_tags)]

    # -- field helpers ---------------------------------------------------------

    def interpolate_velocity(self, fn, t: float | None = None) -> np.ndarray:
        vals = np.asarray(fn(self.p2_coords, t) if t is not None
                          else fn(self.p2_coords), dtype=float)
        if vals.shape != (self.n_p2, 2):
            raise ValueError("velocity function must return an (n, 2) array")
        return np.concatenate([vals[:, 0], vals[:, 1]])

    def vertex_velocity(self, u: np.ndarray) -> np.ndarray:
        return np.stack([u[:self.n_vertices],
                         u[self.n_p2:self.n_p2 + self.n_vertices]], axis=-1)

    def velocity_at_qpoints(self, u: np.ndarray) -> np.ndarray:
        loc = np.stack([u[self.tri_p2], u[self.n_p2 + self.tri_p2]], axis=-1)
        return np.einsum("qi,tia->tqa", self.N, loc)

    def velocity_grad_at_qpoints(self, u: np.ndarray) -> np.ndarray:
        """D_ab = du_a/dx_b at quadrature points, shape (n_t, nq, 2, 2)."""
        loc = np.stack([u[self.tri_p2], u[self.n_p2 + self.tri_p2]], axis=-1)
        return np.einsum("tqib,tia->tqab", self.G, loc)

    def pressure_at_qpoints(self, p: np.ndarray) -> np.ndarray:
        return np.einsum("qi,ti->tq", self.P1, p[self.mesh.triangles])

    def integrate(self, values: np.ndarray) -> float:
        """Integrate per-quadrature-point scalars (n_t, nq) over the mesh."""
        return float(np.einsum("q,tq,t->", self.qw, values, self.detJ))

    def boundary_trace(self, tag: BoundaryTag):
        """Per tagged edge: P2 trace node triple (a, b, midside), length, and
        outward (out of the fluid) unit normal."""
        key = ("trace", int(tag))
        if key not in self._cache:
            nf = compute_normals(self.mesh, tag)
            mids = np.array([self.n_vertices
                             + self._edge_index[(min(int(a), int(b)),
                                                 max(int(a), int(b)))]
                             for a, b in nf.edges], dtype=np.int64)
            trace_nodes = np.column_stack([nf.edges, mids])
            self._cache[key] = (trace_nodes, nf.edge_lengths, nf.edge_normals)
        return self._cache[key]

    # -- cached geometry matrices ----------------------------------------------

    @property
    def mass(self) -> sps.csr_matrix:
        if "mass" not in self._cache:
            self._cache["mass"] = assemble_mass(self)
        return self._cache["mass"]

    @property
    def stiffness(self) -> sps.csr_matrix:
        if "stiffness" not in self._cache:
            self._cache["stiffness"] = assemble_stiffness(self)
        return self._cache["stiffness"]

    @property
    def divergence(self) -> sps.csr_matrix:
        if "divergence" not in self._cache:
            self._cache["divergence"] = assemble_divergence(self)
        return self._cache["divergence"]

    @property
    def pressure_load(self) -> np.ndarray:
        if "pload" not in self._cache:
            self._cache["pload"] = assemble_pressure_load(self)
        return self._cache["pload"]


# -- assembly -------------------------------------------------------------------


def _scatter_vector_blocks(space: TaylorHoodSpace, blocks) -> sps.csr_matrix:
    """Assemble per-element blocks given as a list of (b, c, elem) entries,
    elem shaped (n_t, 6, 6) coupling velocity component b (test) with c
    (trial)."""
    n = space.n_u
    tp = space.tri_p2
    rows_base = np.repeat(tp, 6, axis=1).ravel()
    cols_base = np.tile(tp, (1, 6)).ravel()
    rows, cols, data = [], [], []
    for b, c, elem in blocks:
        rows.append(b * space.n_p2 + rows_base)
        cols.append(c * space.n_p2 + cols_base)
        data.append(elem.ravel())
    A = sps.coo_matrix((np.concatenate(data),
                        (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n, n))
    return A.tocsr()


def assemble_mass(space: TaylorHoodSpace) -> sps.csr_matrix:
    """Vector P2 mass matrix, block diagonal over components."""
    m_ref = np.einsum("q,qi,qj->ij", space.qw, space.N, space.N)
    elem = space.detJ[:, None, None] * m_ref[None, :, :]
    return _scatter_vector_blocks(space, [(0, 0, elem), (1, 1, elem)])


def assemble_stiffness(space: TaylorHoodSpace) -> sps.csr_matrix:
    """Vector P2 stiffness (integral of Du : Dv), block diagonal."""
    elem = np.einsum("q,tqia,tqja,t->tij", space.qw, space.G, space.G,
                     space.detJ)
    return _scatter_vector_blocks(space, [(0, 0, elem), (1, 1, elem)])


@dataclass
class ConvectionMatrices:
    """Linearization blocks of the convective term at a given wind w.

    transport          : entries of the (w . grad)u form, block diagonal
    gradient_coupling  : entries of the (u . grad)w reaction form
    transposed_gradient: entries of the transposed-gradient form pairing the
                         adjoint variable against Dw^T, i.e. the transpose of
                         gradient_coupling
    """

    transport: sps.csr_matrix
    gradient_coupling: sps.csr_matrix

    @property
    def transposed_gradient(self) -> sps.csr_matrix:
        return self.gradient_coupling.transpose().tocsr()


def assemble_convection(space: TaylorHoodSpace,
                        wind: np.ndarray) -> ConvectionMatrices:
    windL = np.stack([wind[space.tri_p2], wind[space.n_p2 + space.tri_p2]],
                     axis=-1)                                  # (n_t, 6, 2)
    wq = np.einsum("qi,tia->tqa", space.N, windL)              # (n_t, nq, 2)
    ce = np.einsum("q,qi,tqa,tqja,t->tij", space.qw, space.N, wq, space.G,
                   space.detJ)
    transport = _scatter_vector_blocks(space, [(0, 0, ce), (1, 1, ce)])

    grad_w = np.einsum("tqic,tib->tqbc", space.G, windL)       # (n_t, nq, 2, 2)
    re = np.einsum("q,qi,qj,tqbc,t->tbcij", space.qw, space.N, space.N,
                   grad_w, space.detJ)
    blocks = [(b, c, re[:, b, c]) for b in range(2) for c in range(2)]
    coupling = _scatter_vector_blocks(space, blocks)
    return ConvectionMatrices(transport=transport, gradient_coupling=coupling)


def assemble_divergence(space: TaylorHoodSpace) -> sps.csr_matrix:
    """Pressure-velocity coupling with entries -(q_i, div phi_j)."""
    be = -np.einsum("q,qi,tqjc,t->tcij", space.qw, space.P1, space.G,
                    space.detJ)
    tris = space.mesh.triangles
    rows_base = np.repeat(tris, 6, axis=1).ravel()
    cols_base = np.tile(space.tri_p2, (1, 3)).ravel()
    rows, cols, data = [], [], []
    for c in range(2):
        rows.append(rows_base)
        cols.append(c * space.n_p2 + cols_base)
        data.append(be[:, c].ravel())
    B = sps.coo_matrix((np.concatenate(data),
                        (np.concatenate(rows), np.concatenate(cols))),
                       shape=(space.n_p, space.n_u))
    return B.tocsr()


def assemble_pressure_load(space: TaylorHoodSpace) -> np.ndarray:
    """Vector of integrals of each P1 pressure basis function."""
    elem = np.einsum("q,qi,t->ti", space.qw, space.P1, space.detJ)
    out = np.zeros(space.n_p)
    np.add.at(out, space.mesh.triangles.ravel(), elem.ravel())
    return out


def assemble_velocity_load(space: TaylorHoodSpace, fn, t: float | None = None,
                           values: np.ndarray | None = None) -> np.ndarray:
    """Load vector (f, phi_i) from a callable f(points[, t]) or from values
    already evaluated at the quadrature points, shape (n_t, nq, 2)."""
    if values is None:
        pts = space.qpoints.reshape(-1, 2)
        vals = np.asarray(fn(pts, t) if t is not None else fn(pts),
                          dtype=float)
        values = vals.reshape(space.qpoints.shape)
    elem = np.einsum("q,qi,tqa,t->tia", space.qw, space.N, values, space.detJ)
    out = np.zeros(space.n_u)
    for c in range(2):
        np.add.at(out, c * space.n_p2 + space.tri_p2.ravel(),
                  elem[:, :, c].ravel())
    return out


def build_saddle(space: TaylorHoodSpace, a_uu: sps.spmatrix,
                 rhs_u: np.ndarray,
                 rhs_p: np.ndarray | None = None) -> tuple[sps.csr_matrix,
                                                           np.ndarray]:
    """Full saddle system [[A, B^T, 0], [B, 0, m], [0, m^T, 0]] with the zero
    mean pressure multiplier."""
    B = space.divergence
    m = sps.csr_matrix(space.pressure_load[:, None])
    A = sps.bmat([[a_uu, B.T, None],
                  [B, None, m],
                  [None, m.T, None]], format="csr")
    b = np.zeros(space.n_sys)
    b[:space.n_u] = rhs_u
    if rhs_p is not None:
        b[space.n_u:space.n_u + space.n_p] = rhs_p
    return A, b


def apply_dirichlet(A: sps.spmatrix, b: np.ndarray, dofs: np.ndarray,
                    values: np.ndarray) -> tuple[sps.csr_matrix, np.ndarray]:
    """Symmetric elimination: move known columns to the right side, blank the
    constrained rows and columns, place a unit diagonal."""
    n = A.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    constrained = np.zeros(n, dtype=bool)
    constrained[dofs] = True
    val_of = np.zeros(n)
    val_of[dofs] = values

    coo = A.tocoo()
    b = np.array(b, dtype=float, copy=True)
    move = constrained[coo.col] & ~constrained[coo.row]
    np.subtract.at(b, coo.row[move], coo.data[move] * val_of[coo.col[move]])
    keep = ~constrained[coo.row] & ~constrained[coo.col]
    rows = np.concatenate([coo.row[keep], dofs])
    cols = np.concatenate([coo.col[keep], dofs])
    data = np.concatenate([coo.data[keep], np.ones(len(dofs))])
    b[dofs] = values
    A2 = sps.coo_matrix((data, (rows, cols)), shape=A.shape).tocsr()
    return A2, b


class _BorderedLU:
    """Exact solver for a system whose last row/column is a dense border.

    Factoring the full matrix directly is ruinous: the dense mean-constraint
    row causes massive LU fill-in.  Instead the leading block K is factored
    with a single diagonal entry added at one border-coupled index (which
    removes the constant-pressure kernel without touching the assembled
    system), and the border unknowns are recovered exactly from a 2x2 solve.
    """

    def __init__(self, A: sps.csr_matrix):
        n = A.shape[0] - 1
        if n < 1:
            raise ValueError("not bordered")
        A_csc = A.tocsc()
        self.c = A_csc[:, n].toarray().ravel()[:n]
        self.r = A[n, :].toarray().ravel()[:n]
        if not (np.any(self.c) and np.any(self.r)):
            raise ValueError("empty border")
        K = A_csc[:, :n][:n, :].tocsc()
        self.k = int(np.argmax(np.abs(self.c)))
        diag = np.abs(K.diagonal())
        self.sigma = float(diag.max()) if diag.size and diag.max() > 0 else 1.0
        shift = sps.csc_matrix(([self.sigma], ([self.k], [self.k])),
                               shape=(n, n))
        self.lu = splu((K + shift).tocsc(),
                       options=dict(SymmetricMode=True, DiagPivotThresh=1e-3))
        self.zc = self.lu.solve(self.c)
        ek = np.zeros(n)
        ek[self.k] = 1.0
        self.zd = self.lu.solve(ek)
        self.n = n

    def solve(self, b: np.ndarray) -> np.ndarray:
        b0, beta = b[:self.n], float(b[self.n])
        z0 = self.lu.solve(b0)
        k, sig = self.k, self.sigma
        # unknowns: s = x_k, lam = multiplier; exact elimination of the shift
        M2 = np.array([[1.0 - sig * self.zd[k], self.zc[k]],
                       [sig * float(self.r @ self.zd), -float(self.r @ self.zc)]])
        rhs2 = np.array([z0[k], beta - float(self.r @ z0)])
        det = np.linalg.det(M2)
        if not np.isfinite(det) or abs(det) < 1e-300:
            raise ValueError("degenerate border recovery")
        s, lam = np.linalg.solve(M2, rhs2)
        x = z0 - lam * self.zc + sig * s * self.zd
        return np.concatenate([x, [lam]])


class _PlainLU:
    def __init__(self, A: sps.csr_matrix):
        self.lu = splu(A.tocsc())

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(b)


def solve_saddle(A: sps.spmatrix, b: np.ndarray,
                 rtol: float = 1e-10) -> np.ndarray:
    """Direct solve of the saddle system with a residual check and one
    refinement step. Uses the bordered elimination when the trailing
    mean-constraint row/column is present, falling back to a plain sparse LU."""
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return np.zeros(A.shape[0])
    A = A.tocsr()
    solver = None
    try:
        solver = _BorderedLU(A)
        x = solver.solve(b)
        if not np.all(np.isfinite(x)):
            solver = None
    except (ValueError, RuntimeError):
        solver = None
    if solver is None:
        try:
            solver = _PlainLU(A)
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from exc
        x = solver.solve(b)
    r = b - A @ x
    if np.linalg.norm(r) > rtol * nb:
        x = x + solver.solve(r)
        r = b - A @ x
        if np.linalg.norm(r) > rtol * nb:
            raise SingularMatrixError(
                f"direct solve residual {np.linalg.norm(r) / nb:.3e} exceeds "
                f"{rtol:.1e}")
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("non-finite entries in solution")
    return x


def is_symmetric(A: sps.spmatrix, tol: float = 1e-12) -> bool:
    d = (A - A.T).tocoo()
    if d.nnz == 0:
        return True
    scale = max(1.0, float(np.abs(A.data).max()) if A.nnz else 1.0)
    return bool(np.max(np.abs(d.data)) <= tol * scale)


def boundary_flux(space: TaylorHoodSpace, u: np.ndarray) -> float:
    """Net outflow of a velocity field through the whole boundary."""
    total = 0.0
    s = EDGE_POINTS
    tr = edge_trace_values(s)                        # (3 pts, 3 nodes)
    for tag in space.all_boundary_tags():
        trace_nodes, lengths, normals = space.boundary_trace(tag)
        ux = u[trace_nodes]                          # (m, 3)
        uy = u[space.n_p2 + trace_nodes]
        ux_q = ux @ tr.T                             # (m, 3 pts)
        uy_q = uy @ tr.T
        un = ux_q * normals[:, 0, None] + uy_q * normals[:, 1, None]
        total += float(np.sum(lengths * (un @ EDGE_WEIGHTS)))
    return total


# -- point location and sampling --------------------------------------------------


class PointLocator:
    """Locate arbitrary points in a triangulation and evaluate P2 fields.

    Uses a centroid KD-tree with a small candidate sweep; points that fall in
    no triangle can optionally be clamped to the nearest candidate element
    (barycentric coordinates clipped and renormalized).
    """

    def __init__(self, space: TaylorHoodSpace):
        self.space = space
        mesh = space.mesh
        p = mesh.nodes[mesh.triangles]
        self._p0 = p[:, 0]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv[:, 1, 1] = jac[:, 0, 0]
        self._inv = inv / det[:, None, None]
        self._tree = cKDTree(p.mean(axis=1))
        self.n_t = mesh.n_triangles

    def _bary(self, pts: np.ndarray, tris: np.ndarray) -> np.ndarray:
        d = pts - self._p0[tris]
        xi = np.einsum("nab,nb->na", self._inv[tris], d)
        return np.stack([1.0 - xi[:, 0] - xi[:, 1], xi[:, 0], xi[:, 1]],
                        axis=-1)

    def locate(self, pts: np.ndarray, tol: float = 1e-10):
        """Containing triangle and barycentric coordinates per point; the
        triangle index is -1 where no triangle contains the point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        tri_out = np.full(n, -1, dtype=np.int64)
        lam_out = np.zeros((n, 3))
        todo = np.arange(n)
        for k in (4, 16, 64):
            if len(todo) == 0:
                break
            k = min(k, self.n_t)
            _, cand = self._tree.query(pts[todo], k=k)
            cand = np.atleast_2d(cand)
            still = np.ones(len(todo), dtype=bool)
            for col in range(cand.shape[1]):
                if not still.any():
                    break
                rows = np.where(still)[0]
                tris = cand[rows, col]
                lam = self._bary(pts[todo[rows]], tris)
                ok = lam.min(axis=1) >= -tol
                hit = rows[ok]
                tri_out[todo[hit]] = tris[ok]
                lam_out[todo[hit]] = lam[ok]
                still[hit] = False
            todo = todo[still]
            if k == self.n_t:
                break
        return tri_out, lam_out

    def locate_clamped(self, pts: np.ndarray, tol: float = 1e-10):
        """Like locate, but unresolved points are assigned the candidate
        triangle they violate least, with clipped barycentric coordinates."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tri, lam = self.locate(pts, tol)
        missing = np.where(tri < 0)[0]
        if len(missing):
            k = min(32, self.n_t)
            _, cand = self._tree.query(pts[missing], k=k)
            cand = np.atleast_2d(cand)
            best_tri = np.full(len(missing), -1, dtype=np.int64)
            best_lam = np.zeros((len(missing), 3))
            best_score = np.full(len(missing), -np.inf)
            for col in range(cand.shape[1]):
                tris = cand[:, col]
                cl = self._bary(pts[missing], tris)
                score = cl.min(axis=1)
                better = score > best_score
                best_score[better] = score[better]
                best_tri[better] = tris[better]
                best_lam[better] = cl[better]
            best_lam = np.clip(best_lam, 0.0, None)
            best_lam /= best_lam.sum(axis=1, keepdims=True)
            tri[missing] = best_tri
            lam[missing] = best_lam
        return tri, lam

    def eval_velocity(self, u: np.ndarray, tri: np.ndarray,
                      lam: np.ndarray) -> np.ndarray:
        space = self.space
        N = p2_values(lam)
        nodes = space.tri_p2[tri]
        ux = np.einsum("ni,ni->n", N, u[nodes])
        uy = np.einsum("ni,ni->n", N, u[space.n_p2 + nodes])
        return np.stack([ux, uy], axis=-1)
