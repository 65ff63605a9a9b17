"""Tensor-product finite elements on hexahedra: Q1/Q2 spaces, Gauss
quadrature, kinematics (F, J), scalar-operator assembly and the iterative
linear solvers used throughout (CG for the transmembrane-potential system,
GMRES elsewhere).

Geometry is always trilinear (from the 8 cell corners); Q2 fields are
therefore subparametric.  Assembly is single-threaded and deterministic.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import HEX_CORNERS, FACE_AXIS


class InvertedElementError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, msg, residual=None, iterations=None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


def gauss_1d(n):
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def gauss_3d(n):
    x, w = gauss_1d(n)
    pts = np.array([[a, b, c] for c in x for b in x for a in x])
    wts = np.array([wa * wb * wc for wc in w for wb in w for wa in w])
    return pts, wts


def lagrange_1d(degree, x):
    """Values and derivatives of the Lagrange basis on equispaced nodes of
    [0, 1] at the points x."""
    nodes = np.linspace(0.0, 1.0, degree + 1)
    x = np.asarray(x, dtype=float)
    n = degree + 1
    vals = np.ones((x.size, n))
    ders = np.zeros((x.size, n))
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            vals[:, i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
        for k in range(n):
            if k == i:
                continue
            term = np.ones_like(x) / (nodes[i] - nodes[k])
            for j in range(n):
                if j in (i, k):
                    continue
                term *= (x - nodes[j]) / (nodes[i] - nodes[j])
            ders[:, i] += term
    return vals, ders


def shape_functions(degree, ref_pts):
    """Tensor-product Lagrange shape values/gradients at reference points.

    Local dof ordering runs the first reference axis fastest:
    dof(a, b, c) = a + (degree+1) b + (degree+1)^2 c.
    Returns N (npts, nloc) and dN (npts, nloc, 3).
    """
    ref_pts = np.atleast_2d(ref_pts)
    va, da = lagrange_1d(degree, ref_pts[:, 0])
    vb, db = lagrange_1d(degree, ref_pts[:, 1])
    vc, dc = lagrange_1d(degree, ref_pts[:, 2])
    n1 = degree + 1
    npts = ref_pts.shape[0]
    nloc = n1 ** 3
    N = np.empty((npts, nloc))
    dN = np.empty((npts, nloc, 3))
    for c in range(n1):
        for b in range(n1):
            for a in range(n1):
                i = a + n1 * b + n1 * n1 * c
                N[:, i] = va[:, a] * vb[:, b] * vc[:, c]
                dN[:, i, 0] = da[:, a] * vb[:, b] * vc[:, c]
                dN[:, i, 1] = va[:, a] * db[:, b] * vc[:, c]
                dN[:, i, 2] = va[:, a] * vb[:, b] * dc[:, c]
    return N, dN


def trilinear_shapes(ref_pts):
    """Trilinear geometry shape functions in the corner ordering of
    geometry.HEX_CORNERS."""
    ref_pts = np.atleast_2d(ref_pts)
    t = ref_pts[:, None, :]
    c = HEX_CORNERS[None, :, :]
    w = np.where(c > 0.5, t, 1.0 - t)
    N = w[:, :, 0] * w[:, :, 1] * w[:, :, 2]
    s = np.where(c > 0.5, 1.0, -1.0)
    dN = np.empty((ref_pts.shape[0], 8, 3))
    dN[:, :, 0] = s[:, :, 0] * w[:, :, 1] * w[:, :, 2]
    dN[:, :, 1] = w[:, :, 0] * s[:, :, 1] * w[:, :, 2]
    dN[:, :, 2] = w[:, :, 0] * w[:, :, 1] * s[:, :, 2]
    return N, dN


def geometry_at(corner_xyz, ref_pts):
    """Geometric Jacobian dx/dxi at reference points of each cell.

    corner_xyz : (nc, 8, 3); returns J (nc, npts, 3, 3) and detJ (nc, npts).
    """
    _, dNg = trilinear_shapes(ref_pts)
    J = np.einsum("cka,qkd->cqad", corner_xyz, dNg)
    detJ = np.linalg.det(J)
    return J, detJ


def geometry_jacobians(mesh, n_gauss=2, coords=None):
    pts, _ = gauss_3d(n_gauss)
    xyz = (coords if coords is not None else mesh.vertices)[mesh.cells]
    return geometry_at(xyz, pts)


class FeSpace:
    """Continuous Q_r space (r in {1, 2}) on a hexahedral mesh.

    Global dofs are identified geometrically: per-cell lattice points are
    computed by a canonical corner-weighted sum so shared faces and edges
    produce bit-identical coordinates, then deduplicated in first-encounter
    order (deterministic numbering).
    """

    def __init__(self, mesh, degree, quad_points=None):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.mesh = mesh
        self.degree = degree
        n1 = degree + 1
        self.n_local = n1 ** 3

        lattice = np.array([[a / degree, b / degree, c / degree]
                            for c in range(n1) for b in range(n1)
                            for a in range(n1)])
        self.local_nodes = lattice
        Ng, _ = trilinear_shapes(lattice)

        cells = mesh.cells
        xyz = mesh.cell_coords()
        dof_id = {}
        dof_points = []
        dof_map = np.empty((mesh.n_cells, self.n_local), dtype=np.int64)
        for c in range(mesh.n_cells):
            order = np.argsort(cells[c], kind="stable")
            for m in range(self.n_local):
                p = np.zeros(3)
                for o in order:
                    wgt = Ng[m, o]
                    if wgt != 0.0:
                        p = p + wgt * xyz[c, o]
                key = p.tobytes()
                gid = dof_id.get(key)
                if gid is None:
                    gid = len(dof_points)
                    dof_id[key] = gid
                    dof_points.append(p)
                dof_map[c, m] = gid
        self.dof_map = dof_map
        self.dof_points = np.array(dof_points)
        self.n_dofs = len(dof_points)

        nq = quad_points if quad_points is not None else degree + 1
        self.qp_ref, self.qp_w = gauss_3d(nq)
        self.N, self.dN = shape_functions(degree, self.qp_ref)

    def eval_basis(self, ref_pts):
        return shape_functions(self.degree, ref_pts)

    def geometry(self, coords=None):
        """(J, detJ, Jinv) of the geometric map at the quadrature points."""
        xyz = (coords if coords is not None else self.mesh.vertices)[self.mesh.cells]
        J, detJ = geometry_at(xyz, self.qp_ref)
        return J, detJ, np.linalg.inv(J)

    def phys_grads(self, coords=None):
        """Physical shape gradients at quadrature points: (nc, nq, nloc, 3),
        plus detJ (nc, nq).  The reference-coordinate result is cached."""
        if coords is None and getattr(self, "_grad_cache", None) is not None:
            return self._grad_cache
        J, detJ, Jinv = self.geometry(coords)
        g = np.einsum("qid,cqdj->cqij", self.dN, Jinv)
        if coords is None:
            self._grad_cache = (g, detJ)
        return g, detJ

    def quadrature_points(self, coords=None):
        """Physical coordinates of all quadrature points, (nc, nq, 3)."""
        xyz = (coords if coords is not None else self.mesh.vertices)[self.mesh.cells]
        Ng, _ = trilinear_shapes(self.qp_ref)
        return np.einsum("qk,cka->cqa", Ng, xyz)

    def interpolate(self, fn):
        """Nodal interpolation of a callable fn(points) -> values."""
        return np.asarray(fn(self.dof_points))

    def at_quadrature(self, values):
        """Evaluate a dof vector (scalar (n,) or vector (n, m)) at the
        quadrature points: (nc, nq) or (nc, nq, m)."""
        v = np.asarray(values)[self.dof_map]
        if v.ndim == 2:
            return np.einsum("qi,ci->cq", self.N, v)
        return np.einsum("qi,cim->cqm", self.N, v)


class Field:
    """Dof vector on a space; values (n_dofs,) or (n_dofs, ncomp)."""

    def __init__(self, space, values=None, ncomp=None, units=""):
        self.space = space
        if values is None:
            shape = (space.n_dofs,) if not ncomp or ncomp == 1 else (space.n_dofs, ncomp)
            values = np.zeros(shape)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[0] != space.n_dofs:
            raise ValueError("field length does not match dof count")
        self.units = units

    @property
    def ncomp(self):
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def copy(self):
        return Field(self.space, self.values.copy(), units=self.units)


def _scatter(space, elem, shape=None):
    """Assemble per-cell element matrices elem (nc, nloc, nloc) into CSR.
    The sparsity pattern per space is computed once and reused."""
    n = space.n_dofs if shape is None else shape
    cache = getattr(space, "_scatter_cache", None)
    if cache is None or cache[0] != n:
        dm = space.dof_map
        rows = np.repeat(dm, dm.shape[1], axis=1).ravel()
        cols = np.tile(dm, (1, dm.shape[1])).ravel()
        keys = rows.astype(np.int64) * n + cols
        uniq, inv = np.unique(keys, return_inverse=True)
        proto = sp.csr_matrix((np.zeros(uniq.size), (uniq // n, uniq % n)),
                              shape=(n, n))
        proto.sort_indices()
        cache = (n, inv, uniq.size, proto)
        space._scatter_cache = cache
    _, inv, nslots, proto = cache
    A = proto.copy()
    A.data[:] = np.bincount(inv, weights=elem.ravel(), minlength=nslots)
    return A


def assemble_mass(space, coefficient=None, coords=None):
    """Mass matrix M_ij = int coeff phi_j phi_i.  coefficient may be None
    (unity), a scalar, or a nodal dof vector on the same space (interpolated
    at the quadrature points -- symmetric ICI form)."""
    _, detJ = space.phys_grads(coords)
    w = space.qp_w[None, :] * detJ
    if coefficient is not None:
        c = np.asarray(coefficient, dtype=float)
        if c.ndim == 0:
            w = w * float(c)
        else:
            w = w * space.at_quadrature(c)
    elem = np.einsum("cq,qi,qj->cij", w, space.N, space.N)
    return _scatter(space, elem)


def assemble_stiffness(space, tensor=None, coords=None):
    """Stiffness K_ij = int (D grad phi_j) . grad phi_i, with D a per-
    quadrature-point 3x3 tensor (nc, nq, 3, 3), a scalar, or None (identity:
    the plain Laplacian)."""
    g, detJ = space.phys_grads(coords)
    w = space.qp_w[None, :] * detJ
    if tensor is None:
        elem = np.einsum("cq,cqid,cqjd->cij", w, g, g)
    elif np.ndim(tensor) == 0:
        elem = float(tensor) * np.einsum("cq,cqid,cqjd->cij", w, g, g)
    else:
        Dg = np.einsum("cqde,cqje->cqjd", tensor, g)
        elem = np.einsum("cq,cqid,cqjd->cij", w, g, Dg)
    return _scatter(space, elem)


def lumped_mass(space, coords=None):
    """Row-sum lumped mass vector (used for nodal averaging)."""
    M = assemble_mass(space, coords=coords)
    return np.asarray(M.sum(axis=1)).ravel()


def compute_deformation(space, d_values, ref_pts=None, coords=None):
    """Deformation gradient F = I + grad d and J = det F at reference points
    (default: the space's quadrature points) of every cell.

    d_values : (n_dofs, 3) displacement dof vector on `space`.
    Raises InvertedElementError if J <= 0 anywhere.
    """
    d = np.asarray(d_values)
    if ref_pts is None:
        # cached physical gradients at the default quadrature points
        g, _ = space.phys_grads(coords)
    else:
        _, dN = space.eval_basis(ref_pts)
        xyz = (coords if coords is not None
               else space.mesh.vertices)[space.mesh.cells]
        Jg, _ = geometry_at(xyz, np.atleast_2d(ref_pts))
        Jginv = np.linalg.inv(Jg)
        g = np.einsum("qid,cqdj->cqij", dN, Jginv)
    dloc = d[space.dof_map]
    gradd = np.einsum("cqij,cia->cqaj", g, dloc)
    F = gradd + np.eye(3)[None, None, :, :]
    J = np.linalg.det(F)
    if np.any(J <= 0.0):
        c, q = np.unravel_index(np.argmin(J), J.shape)
        raise InvertedElementError(
            f"J = {J[c, q]:.3e} <= 0 at cell {c}, point {q}")
    return F, J


def facet_ref_points(face, pts2d):
    """Map 2D points on [0,1]^2 to 3D reference coordinates of a local face,
    plus the outward reference normal and in-face tangent axes."""
    ax, val = FACE_AXIS[face]
    free = [a for a in range(3) if a != ax]
    ref = np.empty((pts2d.shape[0], 3))
    ref[:, ax] = float(val)
    ref[:, free[0]] = pts2d[:, 0]
    ref[:, free[1]] = pts2d[:, 1]
    normal = np.zeros(3)
    normal[ax] = 1.0 if val == 1 else -1.0
    return ref, normal, free


def facet_quadrature(mesh, facets, n_gauss=2, coords=None):
    """Surface quadrature for a list of (cell, local_face).

    Returns a dict with, for each facet row: cell ids, reference points
    (nf, nq, 3), physical points, outward area vectors a_q (area-weighted,
    so that sum_q a_q = int_facet N dGamma), and scalar weights |a_q|.
    """
    x1, w1 = gauss_1d(n_gauss)
    pts2d = np.array([[a, b] for b in x1 for a in x1])
    w2d = np.array([wa * wb for wb in w1 for wa in w1])
    verts = coords if coords is not None else mesh.vertices
    cells = np.array([c for c, _ in facets], dtype=np.int64)
    nf = len(facets)
    nq = pts2d.shape[0]
    ref = np.empty((nf, nq, 3))
    area_vec = np.empty((nf, nq, 3))
    phys = np.empty((nf, nq, 3))
    for k, (c, f) in enumerate(facets):
        r3, nrm, _ = facet_ref_points(f, pts2d)
        ref[k] = r3
        xyz = verts[mesh.cells[c]][None, :, :]
        Jg, detJg = geometry_at(xyz, r3)
        Jinv = np.linalg.inv(Jg[0])
        # Nanson applied to the reference map: area vector = det(Jg) Jg^-T N
        av = detJg[0][:, None] * np.einsum("qdj,d->qj", Jinv, nrm)
        area_vec[k] = av * w2d[:, None]
        Ng, _ = trilinear_shapes(r3)
        phys[k] = Ng @ verts[mesh.cells[c]]
    return {"cells": cells, "ref": ref, "points": phys,
            "area_vectors": area_vec, "weights": np.linalg.norm(area_vec, axis=2)}


class _Counter:
    def __init__(self):
        self.n = 0

    def __call__(self, _):
        self.n += 1


def solve_cg(A, b, abs_tol=1e-10, maxiter=None, precond="jacobi"):
    """Conjugate gradients with an absolute residual tolerance.  Returns
    (x, iterations).  Default Jacobi preconditioning."""
    n = A.shape[0]
    if maxiter is None:
        maxiter = max(1000, 10 * n)
    M = None
    if precond == "jacobi":
        d = A.diagonal()
        d = np.where(np.abs(d) > 0, d, 1.0)
        M = spla.LinearOperator(A.shape, matvec=lambda x: x / d)
    cnt = _Counter()
    x, info = spla.cg(A, b, rtol=0.0, atol=abs_tol, maxiter=maxiter,
                      M=M, callback=cnt)
    res = float(np.linalg.norm(A @ x - b))
    if info != 0 or res > abs_tol * 1.001:
        raise SolverError(f"CG did not converge: residual {res:.3e}",
                          residual=res, iterations=cnt.n)
    return x, cnt.n


def make_ilu_preconditioner(A):
    ilu = spla.spilu(sp.csc_matrix(A), drop_tol=1e-6, fill_factor=20)
    return spla.LinearOperator(A.shape, matvec=ilu.solve)


def solve_gmres(A, b, abs_tol=1e-8, restart=200, maxiter=None, M=None):
    """GMRES with an absolute residual tolerance; ILU preconditioning by
    default.  Returns (x, iterations)."""
    n = A.shape[0]
    if maxiter is None:
        maxiter = max(50, (10 * n) // restart + 1)
    if M is None:
        try:
            M = make_ilu_preconditioner(A)
        except RuntimeError:
            M = None
    cnt = _Counter()
    x, info = spla.gmres(A, b, rtol=0.0, atol=abs_tol, restart=restart,
                         maxiter=maxiter, M=M, callback=cnt,
                         callback_type="legacy")
    res = float(np.linalg.norm(A @ x - b))
    if res > abs_tol * 1.001:
        raise SolverError(f"GMRES did not converge: residual {res:.3e}",
                          residual=res, iterations=cnt.n)
    return x, cnt.n


def vertex_dofs(space):
    """Global dof id of every mesh vertex (corner lattice nodes of the
    cells; valid for Q1 and Q2)."""
    deg = space.degree
    n1 = deg + 1
    corner_lattice = [int(deg * x + n1 * deg * y + n1 * n1 * deg * z)
                      for x, y, z in HEX_CORNERS]
    vmap = np.full(space.mesh.n_vertices, -1, dtype=np.int64)
    for c in range(space.mesh.n_cells):
        for k, lat in enumerate(corner_lattice):
            vmap[space.mesh.cells[c][k]] = space.dof_map[c, lat]
    if np.any(vmap < 0):
        raise ValueError("mesh has vertices not referenced by any cell")
    return vmap
