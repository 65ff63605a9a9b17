"""Idealized left-ventricle hexahedral meshes: generation, octree refinement,
boundary tagging, rule-based fiber frames and text serialization.

The ventricle is a truncated prolate-spheroid shell with long axis along z,
apex at the bottom (z < 0) and a flat basal plane at z = h_base.  All
coordinates are stored in meters; generator inputs are in millimeters.
"""

import numpy as np

ENDO = "ENDO"
EPI = "EPI"
BASE = "BASE"
VALID_TAGS = (ENDO, EPI, BASE)

# Reference cell is [0,1]^3 with trilinear corners ordered
#   v0=(0,0,0) v1=(1,0,0) v2=(1,1,0) v3=(0,1,0) and v4..v7 at zeta=1.
HEX_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)

# Local faces: (fixed axis, fixed value, corner ids), outward reference normal
# is -e_axis for value 0 and +e_axis for value 1.
FACE_AXIS = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]
FACE_VERTS = [
    [0, 3, 7, 4],  # xi = 0
    [1, 2, 6, 5],  # xi = 1
    [0, 1, 5, 4],  # eta = 0
    [3, 2, 6, 7],  # eta = 1
    [0, 1, 2, 3],  # zeta = 0
    [4, 5, 6, 7],  # zeta = 1
]


class MeshGenerationError(RuntimeError):
    pass


class MeshFormatError(RuntimeError):
    pass


class UnsupportedMeshError(RuntimeError):
    pass


class HexMesh:
    """Hexahedral mesh with tagged boundary facets.

    vertices : (nv, 3) float array, meters
    cells    : (nc, 8) int array, trilinear corner ordering (see HEX_CORNERS)
    boundary_facets : list of (cell, local_face, tag)
    level    : refinement depth (0 for a generated mesh)
    geom     : dict of generating parameters (meters) for idealized meshes,
               None for meshes without an analytic parametrization
    """

    def __init__(self, vertices, cells, boundary_facets, level=0, geom=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        if self.cells.size == 0:
            raise MeshFormatError("mesh has no cells")
        self.boundary_facets = [(int(c), int(f), str(t)) for c, f, t in boundary_facets]
        for c, f, t in self.boundary_facets:
            if t not in VALID_TAGS:
                raise MeshFormatError(f"invalid boundary tag {t!r}")
        self.level = int(level)
        self.geom = dict(geom) if geom is not None else None

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    def cell_coords(self):
        """(nc, 8, 3) corner coordinates per cell."""
        return self.vertices[self.cells]

    def mean_diameter(self):
        """Mesh size h: mean over cells of the maximum corner distance."""
        xc = self.cell_coords()
        d = np.linalg.norm(xc[:, :, None, :] - xc[:, None, :, :], axis=-1)
        return float(d.reshape(self.n_cells, -1).max(axis=1).mean())

    def facets_by_tag(self, tag):
        return [(c, f) for c, f, t in self.boundary_facets if t == tag]

    def check_jacobians(self):
        """Raise if any cell has a nonpositive geometric Jacobian at the
        2x2x2 Gauss points."""
        from . import fem
        detj = fem.geometry_jacobians(self, n_gauss=2)[1]
        bad = np.where((detj <= 0.0).any(axis=1))[0]
        if bad.size:
            raise MeshGenerationError(f"nonpositive Jacobian in cell {bad[0]}")


class NestedMeshes:
    """A coarse mesh and its octree refinement.

    parent_map : (n_fine,) int array of coarse cell ids
    child_index: (n_fine,) int array in [0, 8**k)
    level_maps : per refinement level, (parents, octants) arrays mapping the
                 cells of that level to the previous (coarser) level
    """

    def __init__(self, coarse, fine, parent_map, child_index, level_maps):
        self.coarse = coarse
        self.fine = fine
        self.parent_map = np.asarray(parent_map, dtype=np.int64)
        self.child_index = np.asarray(child_index, dtype=np.int64)
        self.level_maps = level_maps

    @property
    def depth(self):
        return len(self.level_maps)


def _lv_point(lam, phi, u, geom):
    """Point on the interpolated spheroid surface at transmural coordinate
    lam in [0,1], azimuth phi and colatitude-like angle u (0 at apex)."""
    a = geom["r_endo_short"] + lam * geom["wall_thickness"]
    c = geom["r_endo_long"] + lam * geom["wall_thickness"]
    return np.array([a * np.sin(u) * np.cos(phi),
                     a * np.sin(u) * np.sin(phi),
                     -c * np.cos(u)])


def _u_max(lam, geom):
    c = geom["r_endo_long"] + lam * geom["wall_thickness"]
    return float(np.arccos(-geom["base_truncation_height"] / c))


def generate_idealized_lv(geom, resolution):
    """Generate a truncated prolate-spheroid left-ventricle shell.

    geom keys (mm): r_endo_short, r_endo_long, wall_thickness,
    base_truncation_height.  resolution keys: n_transmural,
    n_circumferential, n_longitudinal.

    The apex is closed with collapsed-node hexahedra (the two bottom and the
    two top inner corners of each apex cell coincide), which keeps the
    endocardium watertight while all interior Gauss points retain a positive
    Jacobian.
    """
    g = {k: float(geom[k]) * 1e-3 for k in
         ("r_endo_short", "r_endo_long", "wall_thickness",
          "base_truncation_height")}
    nt = int(resolution["n_transmural"])
    nc = int(resolution["n_circumferential"])
    nl = int(resolution["n_longitudinal"])
    if min(nt, nc, nl) < 1:
        raise MeshGenerationError("all resolution counts must be positive")
    if nc < 3:
        raise MeshGenerationError("n_circumferential must be at least 3")
    if g["r_endo_short"] <= 0 or g["r_endo_long"] <= 0 or g["wall_thickness"] <= 0:
        raise MeshGenerationError("radii and wall thickness must be positive")
    if g["wall_thickness"] >= g["r_endo_short"]:
        raise MeshGenerationError(
            "wall_thickness must be smaller than the short endocardial radius")
    if not (-g["r_endo_long"] < g["base_truncation_height"] < g["r_endo_long"]):
        raise MeshGenerationError(
            "base_truncation_height must lie strictly inside the long radius")

    lams = np.linspace(0.0, 1.0, nt + 1)
    phis = 2.0 * np.pi * np.arange(nc) / nc

    # Vertex ids: apex vertices (one per transmural level) come first, then
    # the regular (k, i, j) lattice for rings j = 1..nl.
    verts = [_lv_point(lam, 0.0, 0.0, g) for lam in lams]

    def vid(k, i, j):
        if j == 0:
            return k
        return (nt + 1) + (((j - 1) * nc + (i % nc)) * (nt + 1)) + k

    for j in range(1, nl + 1):
        for i in range(nc):
            for k in range(nt + 1):
                umax = _u_max(lams[k], g)
                verts.append(_lv_point(lams[k], phis[i], umax * j / nl, g))
    vertices = np.array(verts)

    cells = []
    facets = []
    for j in range(nl):
        for i in range(nc):
            for k in range(nt):
                # local axes: xi -> phi, eta -> u, zeta -> lambda
                conn = [vid(k, i, j), vid(k, i + 1, j),
                        vid(k, i + 1, j + 1), vid(k, i, j + 1),
                        vid(k + 1, i, j), vid(k + 1, i + 1, j),
                        vid(k + 1, i + 1, j + 1), vid(k + 1, i, j + 1)]
                cid = len(cells)
                cells.append(conn)
                if k == 0:
                    facets.append((cid, 4, ENDO))
                if k == nt - 1:
                    facets.append((cid, 5, EPI))
                if j == nl - 1:
                    facets.append((cid, 3, BASE))

    mesh = HexMesh(vertices, cells, facets, level=0, geom=g)
    mesh.check_jacobians()
    return mesh


def _canonical_point(corner_ids, corner_xyz, weights):
    """Deterministic weighted corner sum: accumulate in order of increasing
    global vertex id so shared faces produce bit-identical points regardless
    of which neighboring cell computes them."""
    order = np.argsort(corner_ids, kind="stable")
    p = np.zeros(3)
    for o in order:
        if weights[o] != 0.0:
            p = p + weights[o] * corner_xyz[o]
    return p


def _split_once(mesh):
    """Uniform octree split of every cell into 8 children."""
    cell_ids = mesh.cells
    cell_xyz = mesh.cell_coords()
    nq = mesh.n_cells

    # 3x3x3 lattice of child corner points per parent cell, reference
    # coordinates in {0, 1/2, 1}^3.
    lattice_ref = np.array([[a / 2.0, b / 2.0, c / 2.0]
                            for c in range(3) for b in range(3) for a in range(3)])

    def lat(a, b, c):
        return c * 9 + b * 3 + a

    # trilinear weights of the 8 parent corners at each lattice point
    w = np.ones((27, 8))
    for ax in range(3):
        t = lattice_ref[:, ax][:, None]
        w *= np.where(HEX_CORNERS[None, :, ax] > 0.5, t, 1.0 - t)

    point_id = {}
    new_vertices = []
    lattice_gids = np.empty((nq, 27), dtype=np.int64)
    for q in range(nq):
        for m in range(27):
            p = _canonical_point(cell_ids[q], cell_xyz[q], w[m])
            key = p.tobytes()
            gid = point_id.get(key)
            if gid is None:
                gid = len(new_vertices)
                point_id[key] = gid
                new_vertices.append(p)
            lattice_gids[q, m] = gid

    new_cells = []
    parents = []
    octants = []
    for q in range(nq):
        for oc in range(2):
            for ob in range(2):
                for oa in range(2):
                    conn = [lattice_gids[q, lat(oa + d[0], ob + d[1], oc + d[2])]
                            for d in HEX_CORNERS.astype(int)]
                    new_cells.append(conn)
                    parents.append(q)
                    octants.append(oa + 2 * ob + 4 * oc)
    parents = np.array(parents, dtype=np.int64)
    octants = np.array(octants, dtype=np.int64)

    # child cell lookup: parent cell q, octant o -> fine cell id
    child_of = np.full((nq, 8), -1, dtype=np.int64)
    child_of[parents, octants] = np.arange(len(new_cells))

    new_facets = []
    for c, f, t in mesh.boundary_facets:
        ax, val = FACE_AXIS[f]
        for o in range(8):
            if (o >> ax) & 1 == val:
                new_facets.append((int(child_of[c, o]), f, t))

    fine = HexMesh(np.array(new_vertices), new_cells, new_facets,
                   level=mesh.level + 1, geom=mesh.geom)
    return fine, parents, octants


def refine_octree(mesh, k):
    """Refine `mesh` k >= 1 times, splitting each cell into 8 children per
    level.  Boundary tags are inherited by the children of tagged facets and
    coarse vertices are reproduced bit-exactly on the fine mesh."""
    if k < 1:
        raise ValueError("refinement depth k must be >= 1")
    fine = mesh
    level_maps = []
    for _ in range(k):
        fine, parents, octants = _split_once(fine)
        level_maps.append((parents, octants))

    # Compose the per-level maps into fine -> coarsest; the child index packs
    # one octree digit per level, most significant digit from the first split.
    parent_map = np.arange(fine.n_cells, dtype=np.int64)
    child_index = np.zeros(fine.n_cells, dtype=np.int64)
    shift = 1
    for parents, octants in reversed(level_maps):
        child_index = child_index + shift * octants[parent_map]
        parent_map = parents[parent_map]
        shift *= 8
    return NestedMeshes(mesh, fine, parent_map, child_index, level_maps)


class FiberFrame:
    """Orthonormal fiber/sheet/normal triplets at a set of points.

    f0, s0, n0 : (n, 3) unit vectors with det[f0|s0|n0] = +1
    """

    def __init__(self, f0, s0, n0):
        self.f0 = np.asarray(f0, dtype=float)
        self.s0 = np.asarray(s0, dtype=float)
        self.n0 = np.asarray(n0, dtype=float)


def transmural_coordinate(points, geom):
    """lambda in [0,1] (0 at ENDO, 1 at EPI) from the spheroidal
    parametrization, solved per point by bisection on the level function."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
    z2 = pts[:, 2] ** 2

    def level(lam):
        a = geom["r_endo_short"] + lam * geom["wall_thickness"]
        c = geom["r_endo_long"] + lam * geom["wall_thickness"]
        return r2 / a ** 2 + z2 / c ** 2 - 1.0

    lo = np.zeros(pts.shape[0])
    hi = np.ones(pts.shape[0])
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pos = level(mid) > 0.0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return np.clip(0.5 * (lo + hi), 0.0, 1.0)


def generate_fibers(mesh, points, alpha_endo=60.0, alpha_epi=-60.0,
                    beta_endo=-20.0, beta_epi=20.0):
    """Rule-based fiber frames at arbitrary points of an idealized mesh.

    The helix angle interpolates linearly across the wall,
    alpha(lam) = alpha_endo (1 - lam) + alpha_epi lam, applied in the local
    (circumferential, longitudinal, transmural) basis; the sheet angle beta
    interpolates likewise.  Angles in degrees.
    """
    if mesh.geom is None:
        raise UnsupportedMeshError(
            "fiber generation requires an idealized mesh with an analytic "
            "transmural parametrization")
    g = mesh.geom
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lam = transmural_coordinate(pts, g)
    a = g["r_endo_short"] + lam * g["wall_thickness"]
    c = g["r_endo_long"] + lam * g["wall_thickness"]

    phi = np.arctan2(pts[:, 1], pts[:, 0])
    cosu = np.clip(-pts[:, 2] / c, -1.0, 1.0)
    u = np.arccos(cosu)

    e_c = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=1)
    e_l = np.stack([a * np.cos(u) * np.cos(phi),
                    a * np.cos(u) * np.sin(phi),
                    c * np.sin(u)], axis=1)
    e_l /= np.linalg.norm(e_l, axis=1, keepdims=True)
    e_t = np.cross(e_c, e_l)

    alpha = np.deg2rad(alpha_endo * (1.0 - lam) + alpha_epi * lam)
    beta = np.deg2rad(beta_endo * (1.0 - lam) + beta_epi * lam)

    f0 = np.cos(alpha)[:, None] * e_c + np.sin(alpha)[:, None] * e_l
    g0 = -np.sin(alpha)[:, None] * e_c + np.cos(alpha)[:, None] * e_l
    s0 = np.cos(beta)[:, None] * e_t + np.sin(beta)[:, None] * g0
    n0 = np.cross(f0, s0)
    return FiberFrame(f0, s0, n0)


def write_mesh(mesh, path):
    """Line-oriented text format with sections VERTICES (id x y z),
    CELLS (id v0..v7) and FACETS (cell local_face tag); optional LEVEL and
    GEOM sections carry the refinement depth and the idealized-geometry
    parameters."""
    with open(path, "w") as fh:
        fh.write("VERTICES %d\n" % mesh.n_vertices)
        for i, p in enumerate(mesh.vertices):
            fh.write("%d %s %s %s\n" % (i, repr(float(p[0])), repr(float(p[1])),
                                        repr(float(p[2]))))
        fh.write("CELLS %d\n" % mesh.n_cells)
        for i, conn in enumerate(mesh.cells):
            fh.write("%d %s\n" % (i, " ".join(str(v) for v in conn)))
        fh.write("FACETS %d\n" % len(mesh.boundary_facets))
        for c, f, t in mesh.boundary_facets:
            fh.write("%d %d %s\n" % (c, f, t))
        fh.write("LEVEL %d\n" % mesh.level)
        if mesh.geom is not None:
            fh.write("GEOM %d\n" % len(mesh.geom))
            for k in sorted(mesh.geom):
                fh.write("%s %s\n" % (k, repr(float(mesh.geom[k]))))


def read_mesh(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    pos = 0

    def fail(msg):
        raise MeshFormatError(f"{path}:{pos}: {msg}")

    def expect_section(name):
        nonlocal pos
        if pos >= len(lines):
            fail(f"expected section {name}")
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != name:
            fail(f"expected section header '{name} <count>'")
        pos += 1
        return int(parts[1])

    nv = expect_section("VERTICES")
    vertices = np.empty((nv, 3))
    for i in range(nv):
        parts = lines[pos].split()
        if len(parts) != 4 or int(parts[0]) != i:
            fail("malformed vertex record")
        vertices[i] = [float(x) for x in parts[1:]]
        pos += 1

    ncl = expect_section("CELLS")
    if ncl == 0:
        fail("empty cell list")
    cells = np.empty((ncl, 8), dtype=np.int64)
    for i in range(ncl):
        parts = lines[pos].split()
        if len(parts) != 9 or int(parts[0]) != i:
            fail("malformed cell record")
        cells[i] = [int(v) for v in parts[1:]]
        pos += 1

    nf = expect_section("FACETS")
    facets = []
    for _ in range(nf):
        parts = lines[pos].split()
        if len(parts) != 3:
            fail("malformed facet record")
        if parts[2] not in VALID_TAGS:
            fail(f"invalid facet tag {parts[2]!r}")
        facets.append((int(parts[0]), int(parts[1]), parts[2]))
        pos += 1

    level = 0
    geom = None
    while pos < len(lines) and lines[pos].strip():
        parts = lines[pos].split()
        if parts[0] == "LEVEL":
            level = int(parts[1])
            pos += 1
        elif parts[0] == "GEOM":
            n = int(parts[1])
            pos += 1
            geom = {}
            for _ in range(n):
                k, v = lines[pos].split()
                geom[k] = float(v)
                pos += 1
        else:
            fail(f"unknown section {parts[0]!r}")

    return HexMesh(vertices, cells, facets, level=level, geom=geom)
