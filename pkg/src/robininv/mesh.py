"""Structured simplicial meshes of thin-slab domains.

The volume domain is the box [0, L] x [0, L] x [0, H] (or [0, L] x [0, H]
in the fast 2-D variant).  A tensor grid of boxes is subdivided into
simplices with the Kuhn corner-to-corner pattern: every box is split along
its main diagonal into 6 tetrahedra (3-D) or 2 triangles (2-D), so meshes
at the same resolution are conforming and every simplex has positive
volume.  Node numbering is lexicographic with the first axis fastest,
which makes construction bit-reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

TOP = 0
BOTTOM = 1
SIDE = 2

TAG_NAMES = {TOP: "top", BOTTOM: "bottom", SIDE: "side"}

# Axis permutations defining the Kuhn subdivision of a box; listed in
# lexicographic order so the cell array layout is deterministic.
_PERMS_3D = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


class OutOfDomainError(ValueError):
    """A point lies outside the mesh beyond the location tolerance."""


@dataclass(frozen=True)
class SlabMesh:
    """Simplicial mesh with tagged boundary facets and a bottom-surface trace.

    Attributes:
        dim: spatial dimension (1, 2 or 3; 1 only occurs for extracted
            bottom meshes of the 2-D slab variant).
        nodes: (n_nodes, dim) coordinates.
        cells: (n_cells, dim + 1) node indices, positively oriented.
        boundary_facets: (n_facets, dim) node indices of boundary facets,
            each stored with sorted node indices.
        facet_tags: (n_facets,) values in {TOP, BOTTOM, SIDE}.
        bottom_trace: (n_bottom,) volume node index of each bottom-surface
            node, in lexicographic bottom-surface order.
        resolution: boxes per axis, e.g. (nx, ny, nz).
        lengths: axis lengths, e.g. (L, L, H).
    """

    dim: int
    nodes: np.ndarray
    cells: np.ndarray
    boundary_facets: np.ndarray
    facet_tags: np.ndarray
    bottom_trace: np.ndarray
    resolution: tuple
    lengths: tuple

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def cells_per_box(self):
        return {1: 1, 2: 2, 3: 6}[self.dim]

    def facets_with_tag(self, tag):
        return self.boundary_facets[self.facet_tags == tag]

    def nodes_with_tag(self, tag):
        """Sorted unique node indices appearing in facets with ``tag``."""
        return np.unique(self.facets_with_tag(tag))

    def fingerprint(self):
        return "slab:dim={},res={},lengths={}".format(
            self.dim, tuple(self.resolution), tuple(float(v) for v in self.lengths)
        )


def _parity(perm):
    inversions = sum(
        1 for a, b in itertools.combinations(range(len(perm)), 2) if perm[a] > perm[b]
    )
    return -1 if inversions % 2 else 1


def _tensor_nodes(axes):
    grids = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel(order="F") for g in grids])


def _box_bases(res, strides):
    grids = np.meshgrid(*[np.arange(r) for r in res], indexing="ij")
    base = sum(g.ravel(order="F") * s for g, s in zip(grids, strides))
    return base.astype(np.int64)


def _kuhn_cells_3d(nx, ny, nz):
    strides = (1, nx + 1, (nx + 1) * (ny + 1))
    base = _box_bases((nx, ny, nz), strides)
    per_perm = []
    for perm in _PERMS_3D:
        offs = [0]
        for axis in perm:
            offs.append(offs[-1] + strides[axis])
        verts = [base + o for o in offs]
        if _parity(perm) < 0:
            verts[2], verts[3] = verts[3], verts[2]
        per_perm.append(np.stack(verts, axis=1))
    # box-major layout: cells 6*b .. 6*b+5 belong to box b
    return np.stack(per_perm, axis=1).reshape(-1, 4)

def _kuhn_cells_2d(nx, nz):
    strides = (1, nx + 1)
    base = _box_bases((nx, nz), strides)
    tri0 = np.stack([base, base + 1, base + 1 + strides[1]], axis=1)
    tri1 = np.stack([base, base + 1 + strides[1], base + strides[1]], axis=1)
    return np.stack([tri0, tri1], axis=1).reshape(-1, 3)


def _boundary_facets(cells):
    d = cells.shape[1] - 1
    omit = [[j for j in range(d + 1) if j != i] for i in range(d + 1)]
    faces = cells[:, omit].reshape(-1, d)
    faces = np.sort(faces, axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    return uniq[counts == 1]


def _tag_facets(nodes, facets, lengths):
    coords = nodes[facets]
    scale = max(lengths)
    tol = 1e-12 * scale
    last = coords[..., -1]
    height = lengths[-1]
    tags = np.full(facets.shape[0], -1, dtype=np.int8)
    tags[np.all(np.abs(last) <= tol, axis=-1)] = BOTTOM
    tags[np.all(np.abs(last - height) <= tol, axis=-1)] = TOP
    untagged = tags == -1
    for axis in range(coords.shape[-1] - 1):
        vals = coords[..., axis]
        on_plane = np.all(np.abs(vals) <= tol, axis=-1) | np.all(
            np.abs(vals - lengths[axis]) <= tol, axis=-1
        )
        tags[untagged & on_plane] = SIDE
    if np.any(tags == -1):
        raise RuntimeError("boundary facet not on any box face; mesh is inconsistent")
    return tags


def _build(axes, lengths, cells):
    nodes = _tensor_nodes(axes)
    facets = _boundary_facets(cells)
    tags = _tag_facets(nodes, facets, lengths)
    tol = 1e-12 * max(lengths)
    bottom_trace = np.flatnonzero(np.abs(nodes[:, -1]) <= tol)
    return SlabMesh(
        dim=nodes.shape[1],
        nodes=nodes,
        cells=np.ascontiguousarray(cells),
        boundary_facets=facets,
        facet_tags=tags,
        bottom_trace=bottom_trace,
        resolution=tuple(len(a) - 1 for a in axes),
        lengths=tuple(float(v) for v in lengths),
    )


def build_slab_mesh(nx, ny, nz, length, height, dim=3):
    """Mesh the slab [0,L]^(dim-1) x [0,H] with nx(,ny),nz boxes per axis.

    In 3-D every box becomes 6 tetrahedra, in 2-D every box becomes 2
    triangles.  ``ny`` is ignored when ``dim == 2``.
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    counts = (nx, ny, nz) if dim == 3 else (nx, nz)
    if any(int(c) != c or c < 1 for c in counts):
        raise ValueError(f"box counts must be positive integers, got {counts}")
    if length <= 0 or height <= 0:
        raise ValueError(f"lengths must be positive, got L={length}, H={height}")
    if dim == 3:
        axes = (
            np.linspace(0.0, length, nx + 1),
            np.linspace(0.0, length, ny + 1),
            np.linspace(0.0, height, nz + 1),
        )
        return _build(axes, (length, length, height), _kuhn_cells_3d(nx, ny, nz))
    axes = (np.linspace(0.0, length, nx + 1), np.linspace(0.0, height, nz + 1))
    return _build(axes, (length, height), _kuhn_cells_2d(nx, nz))


def extract_bottom_mesh(mesh):
    """Surface mesh of the BOTTOM facets, numbered consistently with
    ``mesh.bottom_trace`` and projected to the first dim-1 coordinates."""
    trace = mesh.bottom_trace
    inverse = np.full(mesh.n_nodes, -1, dtype=np.int64)
    inverse[trace] = np.arange(trace.size)
    nodes = np.ascontiguousarray(mesh.nodes[trace][:, :-1])
    cells = inverse[mesh.facets_with_tag(BOTTOM)]
    if np.any(cells < 0):
        raise RuntimeError("bottom facet references a node off the bottom surface")
    cells = _orient_positive(nodes, cells)
    d = mesh.dim - 1
    if d >= 2:
        facets = _boundary_facets(cells)
        lengths = mesh.lengths[:-1]
        tags = _tag_facets(nodes, facets, lengths)
    else:
        facets = _boundary_facets(cells).reshape(-1, 1)
        lengths = mesh.lengths[:-1]
        tags = np.where(
            np.abs(nodes[facets[:, 0], 0]) <= 1e-12 * lengths[0], BOTTOM, TOP
        ).astype(np.int8)
    tol = 1e-12 * max(lengths)
    bottom_trace = np.flatnonzero(np.abs(nodes[:, -1]) <= tol)
    return SlabMesh(
        dim=d,
        nodes=nodes,
        cells=cells,
        boundary_facets=facets,
        facet_tags=tags,
        bottom_trace=bottom_trace,
        resolution=tuple(mesh.resolution[:-1]),
        lengths=tuple(lengths),
    )


def _orient_positive(nodes, cells):
    cells = np.array(cells, dtype=np.int64, copy=True)
    if cells.shape[1] == 1:
        return cells
    coords = nodes[cells]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    if cells.shape[1] == 2:
        dets = edges[:, 0, 0]
    else:
        dets = np.linalg.det(edges)
    flip = dets < 0
    cells[flip, -2], cells[flip, -1] = cells[flip, -1].copy(), cells[flip, -2].copy()
    return cells


def cell_volumes(mesh):
    coords = mesh.nodes[mesh.cells]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    d = mesh.dim
    if d == 1:
        dets = edges[:, 0, 0]
    else:
        dets = np.linalg.det(edges)
    return dets / _factorial(d)


def _factorial(d):
    out = 1
    for k in range(2, d + 1):
        out *= k
    return out


def locate_point(mesh, point, tol=1e-12):
    """Find (cell index, barycentric coords) of ``point``.

    Uses the tensor-grid structure to land in the right box and tests that
    box's simplices; neighbouring boxes are scanned as a roundoff fallback.
    Raises :class:`OutOfDomainError` when the point is outside the domain
    beyond ``tol`` (relative to the largest axis length).
    """
    point = np.asarray(point, dtype=float)
    lengths = np.asarray(mesh.lengths)
    res = np.asarray(mesh.resolution)
    abs_tol = tol * max(1.0, lengths.max())
    if np.any(point < -abs_tol) or np.any(point > lengths + abs_tol):
        raise OutOfDomainError(f"point {point.tolist()} outside domain {mesh.lengths}")
    clamped = np.minimum(np.maximum(point, 0.0), lengths)
    spacing = lengths / res
    ijk = np.minimum((clamped / spacing).astype(np.int64), res - 1)
    found = _scan_box(mesh, ijk, clamped, 1e-10)
    if found is not None:
        return found
    for shift in itertools.product((-1, 0, 1), repeat=mesh.dim):
        nb = ijk + np.array(shift)
        if np.any(nb < 0) or np.any(nb >= res):
            continue
        found = _scan_box(mesh, nb, clamped, 1e-8)
        if found is not None:
            return found
    raise OutOfDomainError(f"point {point.tolist()} not located in any cell")


def _scan_box(mesh, ijk, point, bary_tol):
    box = 0
    stride = 1
    for axis in range(mesh.dim):
        box += int(ijk[axis]) * stride
        stride *= mesh.resolution[axis]
    cpb = mesh.cells_per_box
    best = None
    for c in range(box * cpb, (box + 1) * cpb):
        coords = mesh.nodes[mesh.cells[c]]
        A = (coords[1:] - coords[0]).T
        try:
            rest = np.linalg.solve(A, point - coords[0])
        except np.linalg.LinAlgError:  # pragma: no cover - positive volumes
            continue
        lam = np.concatenate(([1.0 - rest.sum()], rest))
        low = lam.min()
        if low >= -bary_tol and (best is None or low > best[2]):
            best = (c, lam, low)
    if best is None:
        return None
    return best[0], best[1]


def export_mesh(mesh, path):
    """Write the plain-text mesh format.

    Header ``dim n_nodes n_cells``, then one node per line (%.17g), then
    cell node tuples, then facet records ``node_indices tag``.
    """
    lines = [f"{mesh.dim} {mesh.n_nodes} {mesh.n_cells}"]
    for row in mesh.nodes:
        lines.append(" ".join("%.17g" % v for v in row))
    for cell in mesh.cells:
        lines.append(" ".join(str(int(v)) for v in cell))
    for facet, tag in zip(mesh.boundary_facets, mesh.facet_tags):
        lines.append(
            " ".join(str(int(v)) for v in facet) + " " + TAG_NAMES[int(tag)]
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def validate_mesh(mesh, rel_tol=1e-12):
    """Raise if the mesh violates its structural invariants."""
    vols = cell_volumes(mesh)
    if np.any(vols <= 0):
        raise RuntimeError("non-positive simplex volume")
    target = float(np.prod(mesh.lengths))
    if abs(vols.sum() - target) > rel_tol * target:
        raise RuntimeError(
            f"cell volumes sum to {vols.sum()!r}, expected {target!r}"
        )
    if np.any(mesh.facet_tags < 0) or np.any(mesh.facet_tags > 2):
        raise RuntimeError("facet tag out of range")
    uniq = np.unique(np.sort(mesh.boundary_facets, axis=1), axis=0)
    if uniq.shape[0] != mesh.boundary_facets.shape[0]:
        raise RuntimeError("duplicate boundary facet")
    trace = mesh.bottom_trace
    if np.unique(trace).size != trace.size:
        raise RuntimeError("bottom_trace is not injective")
    tol = 1e-12 * max(mesh.lengths)
    on_bottom = np.flatnonzero(np.abs(mesh.nodes[:, -1]) <= tol)
    if not np.array_equal(np.sort(trace), on_bottom):
        raise RuntimeError("bottom_trace does not cover the bottom nodes")
