"""Hybrid FD/FE decomposition: structured grid, tetrahedral region, node sets.

The whole domain carries a structured grid. A sub-box of that grid is
triangulated by a Kuhn split (six tetrahedra per cell) and forms the FE
region. Its outermost ``overlap`` cell layers are shared with the grid:
nodes on the FE boundary receive grid values, nodes on the inner overlap
boundary send FE values back to the grid, and nodes between the two are
computed by both schemes.

Node universe
-------------
Grid nodes are numbered in C order ``(i, j, k) -> (i*ny + j)*nz + k``.
FE vertices that coincide with grid nodes come first in the FE numbering;
vertices created by refinement get universe ids ``n_grid + extra``.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

IN, OUT, OVERLAP = 0, 1, 2
REGION_NAMES = {IN: "IN", OUT: "OUT", OVERLAP: "OVERLAP"}

_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("boxes are three-dimensional")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"empty box {lo} - {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, a: float, b: float) -> "Box":
        return cls((a, a, a), (b, b, b))

    def contains(self, other: "Box", tol: float = 0.0) -> bool:
        return all(self.lo[d] <= other.lo[d] + tol and other.hi[d] <= self.hi[d] + tol
                   for d in range(3))


def _snap(value: float, origin: float, h: float, what: str) -> int:
    q = (value - origin) / h
    n = int(round(q))
    if abs(q - n) > 1e-6:
        raise ValueError(f"{what} = {value} is not on the grid (offset {q:.6g} cells)")
    return n


@dataclass(frozen=True, eq=False)
class FdGrid:
    """Structured node grid covering the whole domain.

    Parameters
    ----------
    origin : ndarray, shape (3,)
    spacing : ndarray, shape (3,)
    shape : tuple of int
        Node counts per axis.
    fem_lo, fem_hi : tuple of int
        Node indices of the FE box corners.
    overlap : int
        Number of shared cell layers.
    """

    origin: np.ndarray
    spacing: np.ndarray
    shape: tuple
    fem_lo: tuple
    fem_hi: tuple
    overlap: int = 2

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def inner_lo(self) -> tuple:
        return tuple(a + self.overlap for a in self.fem_lo)

    @property
    def inner_hi(self) -> tuple:
        return tuple(b - self.overlap for b in self.fem_hi)

    def axes(self) -> list:
        return [self.origin[d] + self.spacing[d] * np.arange(self.shape[d])
                for d in range(3)]

    def multi_index(self) -> np.ndarray:
        """Integer ``(i, j, k)`` of every node, shape ``(n, 3)``."""
        idx = np.indices(self.shape).reshape(3, -1).T
        return idx

    @cached_property
    def coords(self) -> np.ndarray:
        return self.origin + self.multi_index() * self.spacing

    def ravel(self, i, j, k):
        return np.ravel_multi_index((i, j, k), self.shape)

    def face_nodes(self, axis: int, side: int) -> np.ndarray:
        """Grid nodes on the outer face ``x_axis = min`` (side 0) or max."""
        mi = self.multi_index()
        target = 0 if side == 0 else self.shape[axis] - 1
        return np.flatnonzero(mi[:, axis] == target)

    def face_weights(self, axis: int) -> np.ndarray:
        """Trapezoid area weight of each node of a face normal to ``axis``, length ``n_nodes``.

        Non-face nodes get the value they would have if projected; callers
        index with `face_nodes`.
        """
        others = [d for d in range(3) if d != axis]
        w = np.ones(self.n_nodes)
        mi = self.multi_index()
        for d in others:
            t = np.where((mi[:, d] == 0) | (mi[:, d] == self.shape[d] - 1), 0.5, 1.0)
            w *= self.spacing[d] * t
        return w


@dataclass(frozen=True, eq=False)
class FeMesh:
    """Tetrahedral mesh of the FE box.

    Parameters
    ----------
    vertices : ndarray, shape (nv, 3)
    tets : ndarray of int, shape (ne, 4)
        Positively oriented.
    region : ndarray of int8, shape (ne,)
        `IN`, `OUT` or `OVERLAP`.
    parent : ndarray of int, shape (ne,)
        Index of the ancestor element in the previous mesh level.
    marks : ndarray of int, shape (ne,)
        How many times the element's lineage was marked for refinement.
    grid_node : ndarray of int, shape (nv,)
        Coincident grid node, or -1 for vertices created by refinement.
    """

    vertices: np.ndarray
    tets: np.ndarray
    region: np.ndarray
    parent: np.ndarray
    marks: np.ndarray
    grid_node: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.tets)

    @cached_property
    def _jacobians(self) -> np.ndarray:
        x = self.vertices[self.tets]
        return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        return np.linalg.det(self._jacobians) / 6.0

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the barycentric basis functions, shape ``(ne, 4, 3)``."""
        vol = self.signed_volumes
        if np.any(np.abs(vol) <= 1e-14 * np.max(np.abs(vol))):
            raise ValueError("degenerate element (zero volume)")
        inv = np.linalg.inv(self._jacobians)  # rows are grads of lambda_1..3
        g = np.empty((self.n_elements, 4, 3))
        g[:, 1:, :] = inv
        g[:, 0, :] = -inv.sum(axis=1)
        return g

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        x = self.vertices[self.tets]
        return np.stack([np.linalg.norm(x[:, b] - x[:, a], axis=1) for a, b in _EDGES], axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Mesh function h_K: longest edge of each element."""
        return self.edge_lengths.max(axis=1)

    @property
    def min_edge(self) -> float:
        return float(self.edge_lengths.min())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    def boundary_faces(self) -> np.ndarray:
        """Faces belonging to exactly one tetrahedron, shape ``(nf, 3)``."""
        counts = face_counts(self.tets)
        return np.array(sorted(f for f, c in counts.items() if c == 1), dtype=np.int64).reshape(-1, 3)


def face_counts(tets) -> dict:
    counts: dict = defaultdict(int)
    for t in np.asarray(tets).tolist():
        for f in _FACES:
            counts[tuple(sorted(t[i] for i in f))] += 1
    return counts


def min_dihedral_angles(fe: FeMesh) -> np.ndarray:
    """Smallest dihedral angle of every element, in degrees."""
    g = fe.gradients
    n = g / np.linalg.norm(g, axis=2, keepdims=True)
    worst = np.full(fe.n_elements, np.inf)
    for a, b in _EDGES:
        # the dihedral angle at the edge opposite faces a and b
        cosang = -np.einsum("ij,ij->i", n[:, a], n[:, b])
        ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
        worst = np.minimum(worst, ang)
    return worst


@dataclass(frozen=True, eq=False)
class NodeClassification:
    """Coupling node sets over the node universe.

    ``omega_o``      grid nodes on the FE box boundary (grid sends to FE)
    ``omega_diamond`` grid nodes on the inner overlap boundary (FE sends to grid)
    ``omega_star``   other FE nodes (strictly inside the FE box)
    ``omega_plus``   remaining grid-only interior nodes
    ``omega_x``      nodes on the outer boundary

    The ``*_fe`` / ``*_fd`` arrays are aligned partner pairs. ``shared_*``
    lists the nodes strictly between the two overlap boundaries, which both
    schemes compute.
    """

    omega_o: np.ndarray
    omega_diamond: np.ndarray
    omega_star: np.ndarray
    omega_plus: np.ndarray
    omega_x: np.ndarray
    o_fd: np.ndarray
    o_fe: np.ndarray
    diamond_fd: np.ndarray
    diamond_fe: np.ndarray
    shared_fd: np.ndarray
    shared_fe: np.ndarray
    fd_update: np.ndarray
    hole: np.ndarray

    def sizes(self) -> dict:
        return {"o": len(self.omega_o), "diamond": len(self.omega_diamond),
                "star": len(self.omega_star), "plus": len(self.omega_plus),
                "x": len(self.omega_x)}


@dataclass(frozen=True, eq=False)
class HybridMesh:
    fd: FdGrid
    fe: FeMesh
    classes: NodeClassification
    level: int = 0
    in_box: Box | None = None

    @property
    def n_nodes(self) -> int:
        """Total distinct nodes (grid nodes plus refinement vertices)."""
        return self.fd.n_nodes + int(np.sum(self.fe.grid_node < 0))

    @cached_property
    def in_elements(self) -> np.ndarray:
        return np.flatnonzero(self.fe.region == IN)

    @cached_property
    def in_nodes(self) -> np.ndarray:
        """FE vertices touched by IN elements."""
        return np.unique(self.fe.tets[self.in_elements])


def _kuhn_tets(ncell) -> np.ndarray:
    """Kuhn split of a structured block of ``ncell`` cells, local node ids."""
    nn = tuple(n + 1 for n in ncell)
    ci = np.indices(ncell).reshape(3, -1).T
    tets = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, dtype=int)]
        for a in perm:
            step = path[-1].copy()
            step[a] = 1
            path.append(step)
        verts = [np.ravel_multi_index(tuple((ci + p).T), nn) for p in path]
        tets.append(np.stack(verts, axis=1))
    # interleave so that the 6 tets of a cell are contiguous
    return np.stack(tets, axis=1).reshape(-1, 4), np.repeat(ci, 6, axis=0)


def _classify(fd: FdGrid, fe: FeMesh) -> NodeClassification:
    mi = fd.multi_index()
    shape = np.array(fd.shape)
    lo, hi = np.array(fd.fem_lo), np.array(fd.fem_hi)
    ilo, ihi = np.array(fd.inner_lo), np.array(fd.inner_hi)

    outer = np.any((mi == 0) | (mi == shape - 1), axis=1)
    in_fem = np.all((mi >= lo) & (mi <= hi), axis=1)
    strict_fem = np.all((mi > lo) & (mi < hi), axis=1)
    on_fem_bd = in_fem & ~strict_fem
    in_inner = np.all((mi >= ilo) & (mi <= ihi), axis=1)
    strict_inner = np.all((mi > ilo) & (mi < ihi), axis=1)
    on_inner_bd = in_inner & ~strict_inner

    x_set = outer
    o_set = on_fem_bd & ~x_set
    d_set = on_inner_bd & ~x_set & ~o_set
    star_grid = strict_fem & ~d_set
    plus_set = ~(x_set | o_set | d_set | star_grid)

    # FE vertex lookup for grid nodes
    fe_of_grid = np.full(fd.n_nodes, -1, dtype=np.int64)
    gmask = fe.grid_node >= 0
    fe_of_grid[fe.grid_node[gmask]] = np.flatnonzero(gmask)

    n_grid = fd.n_nodes
    extra = np.flatnonzero(fe.grid_node < 0)
    star = np.concatenate([np.flatnonzero(star_grid), n_grid + np.arange(len(extra))])

    o_fd = np.flatnonzero(o_set)
    d_fd = np.flatnonzero(d_set)
    shared = strict_fem & ~in_inner
    shared_fd = np.flatnonzero(shared)
    hole = np.flatnonzero(strict_inner)
    fd_update = np.flatnonzero(~strict_inner & ~on_inner_bd)
    return NodeClassification(
        omega_o=o_fd, omega_diamond=d_fd, omega_star=star,
        omega_plus=np.flatnonzero(plus_set), omega_x=np.flatnonzero(x_set),
        o_fd=o_fd, o_fe=fe_of_grid[o_fd],
        diamond_fd=d_fd, diamond_fe=fe_of_grid[d_fd],
        shared_fd=shared_fd, shared_fe=fe_of_grid[shared_fd],
        fd_update=fd_update, hole=hole,
    )


def build_hybrid(omega_box: Box, fem_box: Box, spacing, in_box: Box | None = None,
                 phantom=None, overlap: int = 2, out_layers: int = 1) -> HybridMesh:
    """Build the hybrid decomposition.

    Parameters
    ----------
    omega_box : Box
        Whole domain; must be an integer number of cells per axis.
    fem_box : Box
        FE region, aligned with the grid, at least two cells from the outer
        boundary.
    spacing : sequence of 3 floats
    in_box : Box, optional
        Region of unknown coefficients. Defaults to the FE box shrunk by
        ``overlap + out_layers`` cells. It must not reach into the overlap.
    phantom : VoxelPhantom, optional
        If given, its extent must fit inside the FE box.
    overlap : int
        Shared cell layers, at least 2.
    out_layers : int
        Default thickness of the OUT shell around IN, in cells.
    """
    h = np.asarray(spacing, dtype=float).reshape(3)
    if np.any(h <= 0):
        raise ValueError("spacing must be positive")
    if overlap < 2:
        raise ValueError("overlap must be at least two cell layers")
    if not omega_box.contains(fem_box):
        raise ValueError("boxes not nested: fem_box must lie inside omega_box")
    origin = np.array(omega_box.lo)
    ncell = tuple(_snap(omega_box.hi[d], origin[d], h[d], "omega_box.hi") for d in range(3))
    flo = tuple(_snap(fem_box.lo[d], origin[d], h[d], "fem_box.lo") for d in range(3))
    fhi = tuple(_snap(fem_box.hi[d], origin[d], h[d], "fem_box.hi") for d in range(3))
    for d in range(3):
        if flo[d] < 2 or ncell[d] - fhi[d] < 2:
            raise ValueError("insufficient overlap clearance: fem_box needs >= 2 grid "
                             "layers to the outer boundary")
        if fhi[d] - flo[d] < 2 * overlap + 1:
            raise ValueError("fem_box too thin for the overlap layers")
    fd = FdGrid(origin, h, tuple(n + 1 for n in ncell), flo, fhi, overlap)

    fcell = tuple(fhi[d] - flo[d] for d in range(3))
    if in_box is None:
        shrink = overlap + out_layers
        if any(n - 2 * shrink < 1 for n in fcell):
            raise ValueError("fem_box too small for the default IN box")
        ilo = tuple(flo[d] + shrink for d in range(3))
        ihi = tuple(fhi[d] - shrink for d in range(3))
        in_box = Box(tuple(origin + np.array(ilo) * h), tuple(origin + np.array(ihi) * h))
    else:
        if not fem_box.contains(in_box):
            raise ValueError("boxes not nested: in_box must lie inside fem_box")
        ilo = tuple(int(math.floor((in_box.lo[d] - origin[d]) / h[d] + 1e-9)) for d in range(3))
        ihi = tuple(int(math.ceil((in_box.hi[d] - origin[d]) / h[d] - 1e-9)) for d in range(3))
        for d in range(3):
            if ilo[d] < flo[d] + overlap or ihi[d] > fhi[d] - overlap:
                raise ValueError("in_box reaches into the overlap layers")
    if phantom is not None:
        ext_lo = np.array(phantom.origin)
        ext_hi = ext_lo + np.array(phantom.dims) * np.array(phantom.spacing)
        if np.any(ext_lo < np.array(fem_box.lo) - 1e-9 * h) or np.any(
                ext_hi > np.array(fem_box.hi) + np.array(phantom.spacing) + 1e-9):
            raise ValueError("phantom extent does not fit inside fem_box")

    local_tets, cell_of = _kuhn_tets(fcell)
    nn = tuple(n + 1 for n in fcell)
    local_idx = np.indices(nn).reshape(3, -1).T
    vertices = origin + (local_idx + np.array(flo)) * h
    grid_node = fd.ravel(*(local_idx + np.array(flo)).T)

    abs_cell = cell_of + np.array(flo)
    is_overlap = np.any((cell_of < overlap) | (cell_of >= np.array(fcell) - overlap), axis=1)
    is_in = np.all((abs_cell >= np.array(ilo)) & (abs_cell < np.array(ihi)), axis=1)
    region = np.where(is_overlap, OVERLAP, np.where(is_in, IN, OUT)).astype(np.int8)

    tets = local_tets.astype(np.int64)
    fe0 = FeMesh(vertices, tets, region, np.arange(len(tets)), np.zeros(len(tets), np.int16),
                 grid_node.astype(np.int64))
    neg = fe0.signed_volumes < 0
    if np.any(neg):
        tets = tets.copy()
        tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    fe = FeMesh(vertices, tets, region, np.arange(len(tets)), np.zeros(len(tets), np.int16),
                grid_node.astype(np.int64))
    return HybridMesh(fd, fe, _classify(fd, fe), 0, in_box)


def cfl_timestep(mesh: HybridMesh, safety: float = 1.0, c: float = 1.0) -> float:
    """Explicit time step bound ``safety * min(h_FE, h_FD) / (sqrt(3) c)``."""
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    hmin = min(mesh.fe.min_edge, float(np.min(mesh.fd.spacing)))
    return safety * hmin / (math.sqrt(3.0) * c)


def time_grid(T: float, tau_max: float) -> tuple[int, float]:
    """Number of steps and step size: ``N = ceil(T / tau_max)``, ``tau = T / N``."""
    if T <= 0 or tau_max <= 0:
        raise ValueError("T and tau must be positive")
    n = int(math.ceil(T / tau_max - 1e-9))
    return n, T / n


class RefinementError(RuntimeError):
    pass


class _OverlapReached(Exception):
    def __init__(self, origin):
        self.origin = origin


def _bisect(vertices: list, tets: list, region, marked, length_scale: float):
    """Longest-edge bisection of ``marked`` with conformity closure.

    Returns new vertex list, tet list and per-new-tet (source index,
    marked flag). Raises `_OverlapReached` if closure needs to split an
    OVERLAP element.
    """
    alive: dict[int, tuple] = {i: tuple(t) for i, t in enumerate(tets)}
    source = {i: i for i in alive}
    hit = {i: False for i in alive}
    edge_tets: dict = defaultdict(set)
    for i, t in alive.items():
        for a, b in _EDGES:
            edge_tets[(min(t[a], t[b]), max(t[a], t[b]))].add(i)
    mid: dict = {}
    verts = list(vertices)
    scale2 = length_scale * length_scale
    next_id = len(tets)
    queue = deque((int(t), int(t)) for t in marked)
    for t in marked:
        hit[int(t)] = True

    def longest(t):
        best = None
        for a, b in _EDGES:
            u, v = min(t[a], t[b]), max(t[a], t[b])
            d = verts[v] - verts[u]
            key = (round(float(d @ d) / scale2, 9), -u, -v)
            if best is None or key > best[0]:
                best = (key, u, v)
        return best[1], best[2]

    while queue:
        tid, origin = queue.popleft()
        t = alive.get(tid)
        if t is None:
            continue
        if region[source[tid]] == OVERLAP:
            raise _OverlapReached(origin)
        u, v = longest(t)
        m = mid.get((u, v))
        if m is None:
            m = len(verts)
            verts.append(0.5 * (verts[u] + verts[v]))
            mid[(u, v)] = m
        del alive[tid]
        for a, b in _EDGES:
            edge_tets[(min(t[a], t[b]), max(t[a], t[b]))].discard(tid)
        children = (tuple(m if x == v else x for x in t), tuple(m if x == u else x for x in t))
        for ch in children:
            cid = next_id
            next_id += 1
            alive[cid] = ch
            source[cid] = source[tid]
            hit[cid] = hit[tid]
            needs = False
            for a, b in _EDGES:
                e = (min(ch[a], ch[b]), max(ch[a], ch[b]))
                edge_tets[e].add(cid)
                if e in mid:
                    needs = True
            if needs:
                queue.append((cid, origin))
        for other in sorted(edge_tets.get((u, v), ())):
            queue.append((other, origin))
    order = sorted(alive)
    return verts, [alive[i] for i in order], [source[i] for i in order], [hit[i] for i in order]


def refine_local(mesh: HybridMesh, marked, max_marks: int | None = None) -> HybridMesh:
    """Bisect marked elements along their longest edge, keeping the mesh conforming.

    Ties between equally long edges are broken by global vertex ids, so
    neighbouring elements agree on the split. Marked elements whose
    closure would have to split the overlap are dropped.

    Parameters
    ----------
    mesh : HybridMesh
    marked : array-like of int
        Element indices; must not contain OVERLAP elements.
    max_marks : int, optional
        Skip elements already marked this many times.

    Returns
    -------
    HybridMesh
        New mesh with ``level + 1``. ``fe.parent`` indexes ``mesh.fe``.
    """
    fe = mesh.fe
    marked = np.unique(np.asarray(marked, dtype=np.int64).ravel())
    if marked.size and (marked.min() < 0 or marked.max() >= fe.n_elements):
        raise IndexError("marked element index out of range")
    if np.any(fe.region[marked] == OVERLAP):
        raise ValueError("marked set includes OVERLAP elements")
    if max_marks is not None:
        marked = marked[fe.marks[marked] < max_marks]

    scale = float(np.min(mesh.fd.spacing))
    todo = list(marked)
    while True:
        try:
            verts, tets, src, hit = _bisect(list(fe.vertices), fe.tets.tolist(), fe.region,
                                            todo, scale)
            break
        except _OverlapReached as exc:
            todo = [t for t in todo if t != exc.origin]
    src = np.asarray(src, dtype=np.int64)
    tets_arr = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    vertices = np.asarray(verts, dtype=float).reshape(-1, 3)
    grid_node = np.concatenate([fe.grid_node,
                                np.full(len(vertices) - fe.n_vertices, -1, dtype=np.int64)])
    marks = fe.marks[src] + np.asarray(hit, dtype=np.int16)
    new_fe = FeMesh(vertices, tets_arr, fe.region[src].copy(), src, marks.astype(np.int16),
                    grid_node)
    if np.any(new_fe.signed_volumes <= 0):
        raise RefinementError("refinement produced a non-positive element")
    return HybridMesh(mesh.fd, new_fe, _classify(mesh.fd, new_fe), mesh.level + 1, mesh.in_box)


def refine_uniform(mesh: HybridMesh, times: int = 1, regions=(IN,)) -> HybridMesh:
    """Bisect every element of the given regions ``times`` times."""
    for _ in range(int(times)):
        marked = np.flatnonzero(np.isin(mesh.fe.region, regions))
        mesh = refine_local(mesh, marked)
    return mesh


def is_conforming(fe: FeMesh) -> bool:
    """True if no face is shared by more than two elements and every single face lies
    on the FE box boundary."""
    counts = face_counts(fe.tets)
    lo = fe.vertices.min(axis=0)
    hi = fe.vertices.max(axis=0)
    tol = 1e-9 * float(np.max(hi - lo))
    for f, c in counts.items():
        if c > 2:
            return False
        if c == 1:
            x = fe.vertices[list(f)]
            on = np.any(np.all(np.abs(x - lo) < tol, axis=0) | np.all(np.abs(x - hi) < tol, axis=0))
            if not on:
                return False
    return True


def element_ancestry(mesh_sequence) -> np.ndarray:
    """Compose parent maps of successive meshes into indices on the first mesh."""
    anc = np.arange(mesh_sequence[0].fe.n_elements)
    for m in mesh_sequence[1:]:
        anc = anc[m.fe.parent]
    return anc
