"""Transfer of finite-element fields between the nested fine and coarse
meshes (and between different polynomial degrees) by exact pointwise
evaluation.

Point location never searches: the octree parent/child maps of the nested
hierarchy give the owning cell directly, and reference coordinates follow
from the per-level octant path (exact halving arithmetic, no iteration).
"""

import numpy as np

REF_EPS = 1e-10


class TransferError(RuntimeError):
    pass


def dof_owner_cells(space):
    """Lowest cell id containing each dof (deterministic tie-breaking for
    dofs shared between cells), plus the local node index in that cell."""
    n = space.n_dofs
    owner = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    nc, nloc = space.dof_map.shape
    cell_ids = np.repeat(np.arange(nc, dtype=np.int64), nloc)
    np.minimum.at(owner, space.dof_map.ravel(), cell_ids)
    local = np.empty(n, dtype=np.int64)
    for c in range(nc):
        mask = owner[space.dof_map[c]] == c
        local[space.dof_map[c][mask]] = np.nonzero(mask)[0]
    return owner, local


def _child_lookup(level_maps):
    """Per refinement level, array child_of[cell, octant] -> finer cell."""
    lookups = []
    for parents, octants in level_maps:
        n_par = parents.max() + 1
        child_of = np.full((n_par, 8), -1, dtype=np.int64)
        child_of[parents, octants] = np.arange(parents.shape[0])
        lookups.append(child_of)
    return lookups


def _descend(nested, coarse_cells, ref):
    """Octree descent: (coarse cell, ref in coarse cell) -> (fine cell, ref
    in fine cell).  Points exactly on an octant face go to the low octant."""
    cells = np.asarray(coarse_cells, dtype=np.int64).copy()
    ref = np.array(ref, dtype=float)
    for child_of in _child_lookup(nested.level_maps):
        # strict inequality: points exactly on a split plane stay in the
        # low octant (deterministic lowest-cell ownership)
        octant_bits = ref > 0.5
        oct_idx = (octant_bits[:, 0].astype(np.int64)
                   + 2 * octant_bits[:, 1].astype(np.int64)
                   + 4 * octant_bits[:, 2].astype(np.int64))
        cells = child_of[cells, oct_idx]
        if np.any(cells < 0):
            raise TransferError("broken octree hierarchy during descent")
        ref = 2.0 * ref - octant_bits.astype(float)
    return cells, ref


def _ascend(nested, fine_cells, ref):
    """Inverse of _descend: (fine cell, ref in fine cell) -> (coarse cell,
    ref in coarse cell) by composing the octant offsets."""
    cells = np.asarray(fine_cells, dtype=np.int64).copy()
    ref = np.array(ref, dtype=float)
    for parents, octants in reversed(nested.level_maps):
        o = octants[cells]
        off = np.stack([(o >> 0) & 1, (o >> 1) & 1, (o >> 2) & 1],
                       axis=1).astype(float)
        ref = 0.5 * (ref + off)
        cells = parents[cells]
    return cells, ref


class TransferOperator:
    """Precomputed evaluation of a source FE space at fixed target points.

    Immutable after construction; `apply` is exact pointwise evaluation and
    therefore linear and reproduction-exact for fields in the source space.
    """

    def __init__(self, source_space, cells, ref, n_target_dofs=None,
                 target_dof_ids=None):
        if np.any(ref < -REF_EPS) or np.any(ref > 1.0 + REF_EPS):
            raise TransferError("target point outside its source cell")
        self.source = source_space
        self.cells = np.asarray(cells, dtype=np.int64)
        self.ref = np.clip(ref, 0.0, 1.0)
        self.shape_values, _ = source_space.eval_basis(self.ref)
        self.dofs = source_space.dof_map[self.cells]
        self.n_target_dofs = n_target_dofs
        self.target_dof_ids = target_dof_ids
        self.apply_count = 0

    @property
    def n_points(self):
        return self.cells.shape[0]

    def apply(self, values):
        """Evaluate a source dof vector (scalar (n,) or vector (n, m)) at
        every target point."""
        v = np.asarray(values, dtype=float)
        if v.shape[0] != self.source.n_dofs:
            raise TransferError("field does not live on the source space")
        self.apply_count += 1
        vloc = v[self.dofs]
        if v.ndim == 1:
            out = np.einsum("pi,pi->p", self.shape_values, vloc)
        else:
            out = np.einsum("pi,pim->pm", self.shape_values, vloc)
        if self.n_target_dofs is not None:
            full = np.zeros((self.n_target_dofs,) + out.shape[1:])
            full[self.target_dof_ids] = out
            return full
        return out


def build_transfer(source_space, target, nested):
    """Build a transfer operator from `source_space` onto the dof points of
    a target FeSpace (same physical domain, the other member of `nested`) or
    onto explicit (points_ref, cells) quadrature targets of that mesh.

    Direction (restriction vs prolongation) is inferred from which member of
    the nested pair carries the source space.
    """
    src_mesh = source_space.mesh
    if src_mesh is nested.coarse:
        direction = "coarse_to_fine"
    elif src_mesh is nested.fine:
        direction = "fine_to_coarse"
    else:
        raise TransferError("source space does not live on the nested pair")

    if hasattr(target, "dof_map"):  # a FeSpace
        owner, local = dof_owner_cells(target)
        tcells = owner
        tref = target.local_nodes[local]
        n_tdofs = target.n_dofs
        tids = np.arange(n_tdofs)
    else:
        tcells, tref = target
        tcells = np.asarray(tcells, dtype=np.int64)
        tref = np.asarray(tref, dtype=float)
        n_tdofs = None
        tids = None

    if direction == "coarse_to_fine":
        cells, ref = _ascend(nested, tcells, tref)
    else:
        cells, ref = _descend(nested, tcells, tref)
    return TransferOperator(source_space, cells, ref,
                            n_target_dofs=n_tdofs, target_dof_ids=tids)


def build_quadrature_transfer(source_space, target_space, nested):
    """Transfer onto all quadrature points of the target space; apply()
    then returns values shaped like (nc_target * nq, ...) in cell-major
    order."""
    nc = target_space.mesh.n_cells
    nq = target_space.qp_ref.shape[0]
    cells = np.repeat(np.arange(nc, dtype=np.int64), nq)
    ref = np.tile(target_space.qp_ref, (nc, 1))
    return build_transfer(source_space, (cells, ref), nested)


def transfer_calcium(op, z_values, calcium_index):
    """Restrict the calcium component of the ionic state to the operator's
    targets (pointwise evaluation, exact on nested meshes)."""
    z = np.asarray(z_values)
    return op.apply(z[:, calcium_index] if z.ndim > 1 else z)
