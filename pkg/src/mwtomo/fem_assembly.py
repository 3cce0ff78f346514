"""P1 assembly of the stabilised Maxwell operators with lumped masses.

Fields are vector valued with three components per vertex, flattened
node-major: dof ``3*i + a`` is component ``a`` at vertex ``i``. Matrix rows
are test functions and columns trial functions, so a forward step applies
``G @ u`` and the adjoint applies ``G.T``.

Two weak forms are provided.

``"undivided"`` (used by the solver)
    The equation is tested as written, so ``eps`` multiplies the
    second time derivative and the divergence penalty:
    ``M = lump(eps)``, ``G1 = (grad, grad)``, ``G2 = (eps div, div)``,
    ``G3 = (div, div)``, with piecewise constant coefficients.
``"divided"``
    The equation is divided by ``eps`` before testing, and the P1
    interpolate of ``eps`` is evaluated at quadrature points:
    ``M1`` carries weight ``1 + tau c^2 mu0 sigma/(2 eps)``, ``M2`` weight
    ``sigma/(2 eps)``, ``G1 = (1/eps grad, grad)``,
    ``G2 = (1/eps div(eps phi_i), div phi_j)`` and
    ``G3 = (1/eps div, div)``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .mesh import IN, FeMesh

FORMS = ("undivided", "divided")


@dataclass(frozen=True)
class Constants:
    """Dimensionless physical constants."""

    c: float = 1.0
    eps0: float = 1.0
    mu0: float = 1.0


# quadrature ---------------------------------------------------------------

def tet_quadrature(n: int = 3):
    """Collapsed Gauss-Jacobi rule on the reference tetrahedron.

    Parameters
    ----------
    n : int
        Points per direction; exact for polynomials of degree ``2n - 1``.

    Returns
    -------
    bary : ndarray, shape (n**3, 4)
        Barycentric coordinates of the points.
    weights : ndarray, shape (n**3,)
        Positive weights summing to 1 (fraction of the element volume).
    """
    x0, w0 = roots_jacobi(n, 2.0, 0.0)
    x1, w1 = roots_jacobi(n, 1.0, 0.0)
    x2, w2 = roots_jacobi(n, 0.0, 0.0)
    # map from [-1, 1] to [0, 1]
    a, wa = (x0 + 1) / 2, w0 / 8
    b, wb = (x1 + 1) / 2, w1 / 4
    c, wc = (x2 + 1) / 2, w2 / 2
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = wa[:, None, None] * wb[None, :, None] * wc[None, None, :]
    # Duffy map from the unit cube to the unit simplex
    x = A
    y = (1 - A) * B
    z = (1 - A) * (1 - B) * C
    bary = np.stack([1 - x - y - z, x, y, z], axis=-1).reshape(-1, 4)
    weights = W.ravel() * 6.0
    return bary, weights


def triangle_quadrature(n: int = 3):
    """Collapsed Gauss-Jacobi rule on the reference triangle (weights sum to 1)."""
    x0, w0 = roots_jacobi(n, 1.0, 0.0)
    x1, w1 = roots_jacobi(n, 0.0, 0.0)
    a, wa = (x0 + 1) / 2, w0 / 4
    b, wb = (x1 + 1) / 2, w1 / 2
    A, B = np.meshgrid(a, b, indexing="ij")
    W = (wa[:, None] * wb[None, :]).ravel() * 2.0
    x = A.ravel()
    y = ((1 - A) * B).ravel()
    return np.stack([1 - x - y, x, y], axis=-1), W


# coefficients -------------------------------------------------------------

def p0_to_p1(eps_p0, mesh: FeMesh, bounds=(1.0, 10.0)) -> np.ndarray:
    """Volume-weighted average of element values at each vertex, clamped to ``bounds``."""
    eps_p0 = np.asarray(eps_p0, dtype=float)
    vol = mesh.volumes
    num = np.bincount(mesh.tets.ravel(), weights=np.repeat(vol * eps_p0, 4),
                      minlength=mesh.n_vertices)
    den = np.bincount(mesh.tets.ravel(), weights=np.repeat(vol, 4), minlength=mesh.n_vertices)
    return np.clip(num / den, bounds[0], bounds[1])


@dataclass(frozen=True, eq=False)
class CoefficientPair:
    """Piecewise constant permittivity (the control) and known conductivity.

    Parameters
    ----------
    eps_p0, sigma_p0 : ndarray, shape (ne,)
    region : ndarray, shape (ne,)
        Element regions; values outside IN must be ``eps = 1``,
        ``sigma = 0``.
    mesh : FeMesh
    bounds : (d1, d2)
    """

    mesh: FeMesh
    eps_p0: np.ndarray
    sigma_p0: np.ndarray
    bounds: tuple = (10.0, 10.0)

    def __post_init__(self):
        ne = self.mesh.n_elements
        eps = np.broadcast_to(np.asarray(self.eps_p0, dtype=float), (ne,)).copy()
        sig = np.broadcast_to(np.asarray(self.sigma_p0, dtype=float), (ne,)).copy()
        d1, d2 = self.bounds
        tol = 1e-12
        if np.any(eps < 1 - tol) or np.any(eps > d1 + tol):
            raise ValueError(f"eps_p0 outside [1, {d1}]")
        if np.any(sig < -tol) or np.any(sig > d2 + tol):
            raise ValueError(f"sigma_p0 outside [0, {d2}]")
        outside = self.mesh.region != IN
        if np.any(eps[outside] != 1.0) or np.any(sig[outside] != 0.0):
            raise ValueError("eps must be 1 and sigma 0 outside the IN region")
        eps.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "eps_p0", eps)
        object.__setattr__(self, "sigma_p0", sig)

    @classmethod
    def free_space(cls, mesh: FeMesh, bounds=(10.0, 10.0)) -> "CoefficientPair":
        ne = mesh.n_elements
        return cls(mesh, np.ones(ne), np.zeros(ne), bounds)

    @classmethod
    def from_function(cls, mesh: FeMesh, eps_fn, sigma_fn=None, bounds=(10.0, 10.0)):
        """Sample ``eps_fn(x)`` (and ``sigma_fn``) at IN element centroids."""
        inside = mesh.region == IN
        eps = np.ones(mesh.n_elements)
        sig = np.zeros(mesh.n_elements)
        xc = mesh.centroids[inside]
        eps[inside] = eps_fn(xc)
        if sigma_fn is not None:
            sig[inside] = sigma_fn(xc)
        return cls(mesh, eps, sig, bounds)

    def with_eps(self, eps_p0) -> "CoefficientPair":
        return CoefficientPair(self.mesh, eps_p0, self.sigma_p0, self.bounds)

    @cached_property
    def eps_p1(self) -> np.ndarray:
        return p0_to_p1(self.eps_p0, self.mesh, (1.0, self.bounds[0]))


# assembly -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AssembledOperators:
    """Lumped masses (length ``3*nv``) and sparse operators (``3nv x 3nv``).

    The FE update with these operators is
    ``M1 u+ = 2 M u - (M - tau c^2 mu0 M2) u- - tau^2 c^2 (G1 + eps0 G2 - G3) u + tau^2 c^2 F``.
    """

    M: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    G1: sp.csr_matrix
    G2: sp.csr_matrix
    G3: sp.csr_matrix
    tau: float
    constants: Constants
    form: str

    @cached_property
    def M1_prev(self) -> np.ndarray:
        """Coefficient of the oldest level: ``M - tau c^2 mu0 M2``."""
        c = self.constants
        return self.M - self.tau * c.c ** 2 * c.mu0 * self.M2

    @cached_property
    def B(self) -> sp.csr_matrix:
        """Spatial operator ``G1 + eps0 G2 - G3`` (without the ``c^2`` factor)."""
        return (self.G1 + self.constants.eps0 * self.G2 - self.G3).tocsr()

    @cached_property
    def BT(self) -> sp.csr_matrix:
        return self.B.T.tocsr()

    def triplets(self) -> dict:
        """Coordinate triplets of every operator, keyed by name."""
        out = {}
        for name in ("G1", "G2", "G3"):
            coo = getattr(self, name).tocoo()
            out[name] = np.column_stack([coo.row, coo.col, coo.data])
        for name in ("M", "M1", "M2"):
            d = getattr(self, name)
            idx = np.arange(len(d))
            out[name] = np.column_stack([idx, idx, d])
        return out


def dump_operators(ops: AssembledOperators, directory) -> list:
    """Write ``row col value`` ASCII triplet files, one per operator."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, arr in ops.triplets().items():
        p = directory / f"{name}.txt"
        np.savetxt(p, arr, fmt=["%d", "%d", "%.17g"], header="row col value")
        paths.append(p)
    return paths


def _scalar_to_vector(rows, cols, vals, nv) -> sp.csr_matrix:
    """Expand scalar entries to the identity block ``delta_ab`` in 3-component dofs."""
    r = (3 * rows[:, None] + np.arange(3)).ravel()
    c = (3 * cols[:, None] + np.arange(3)).ravel()
    v = np.repeat(vals, 3)
    return sp.coo_matrix((v, (r, c)), shape=(3 * nv, 3 * nv)).tocsr()


def _block_matrix(coef_ijab, tets, nv) -> sp.csr_matrix:
    """Assemble element blocks ``coef[e, j, b, i, a]`` at row ``(j, b)``, column ``(i, a)``."""
    ne = tets.shape[0]
    jb = (3 * tets[:, :, None] + np.arange(3)).reshape(ne, 12)
    rows = np.broadcast_to(jb[:, :, None], (ne, 12, 12))
    cols = np.broadcast_to(jb[:, None, :], (ne, 12, 12))
    vals = coef_ijab.reshape(ne, 12, 12)
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(3 * nv, 3 * nv)).tocsr()


class _Pattern:
    """Shared sparsity of all operators on one mesh.

    ``A`` maps element coefficients to the data array of
    ``sum_K c_K |K| (d_a phi_i d_b phi_j)``, so coefficient-weighted
    divergence operators are one sparse product.
    """

    def __init__(self, mesh: FeMesh):
        tets, nv, ne = mesh.tets, mesh.n_vertices, mesh.n_elements
        grads, vol = mesh.gradients, mesh.volumes
        n = 3 * nv
        jb = (3 * tets[:, :, None] + np.arange(3)).reshape(ne, 12)
        rows = np.broadcast_to(jb[:, :, None], (ne, 12, 12)).ravel()
        cols = np.broadcast_to(jb[:, None, :], (ne, 12, 12)).ravel()
        keys = rows.astype(np.int64) * n + cols
        uniq, inv = np.unique(keys, return_inverse=True)
        self.shape = (n, n)
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int32)
        dd = vol[:, None, None, None, None] * np.einsum("eia,ejb->ejbia", grads, grads)
        elem = np.repeat(np.arange(ne), 144)
        self.A = sp.csr_matrix((dd.ravel(), (inv, elem)), shape=(len(uniq), ne))
        self.g3 = self.A @ np.ones(ne)
        gg = vol[:, None, None] * np.einsum("eia,eja->eij", grads, grads)
        r = (3 * np.repeat(tets, 4, axis=1).ravel()[:, None] + np.arange(3)).ravel()
        c = (3 * np.tile(tets, (1, 4)).ravel()[:, None] + np.arange(3)).ravel()
        pos = np.searchsorted(uniq, r.astype(np.int64) * n + c)
        self.g1 = np.bincount(pos, weights=np.repeat(gg.ravel(), 3), minlength=len(uniq))

    def matrix(self, data) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


_PATTERNS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _pattern(mesh: FeMesh) -> _Pattern:
    pat = _PATTERNS.get(mesh)
    if pat is None:
        pat = _Pattern(mesh)
        _PATTERNS[mesh] = pat
    return pat


def _lump(values_e4, tets, nv) -> np.ndarray:
    m = np.bincount(tets.ravel(), weights=values_e4.ravel(), minlength=nv)
    return np.repeat(m, 3)


def assemble(mesh: FeMesh, coeff: CoefficientPair, tau: float,
             constants: Constants = Constants(), form: str = "divided",
             quad_order: int = 3) -> AssembledOperators:
    """Assemble lumped masses and the stiffness/divergence operators.

    Parameters
    ----------
    mesh : FeMesh
    coeff : CoefficientPair
    tau : float
        Time step; enters ``M1``.
    constants : Constants
    form : {"divided", "undivided"}
        See the module docstring.
    quad_order : int
        Points per direction of the collapsed rule (degree ``2n - 1``).

    Returns
    -------
    AssembledOperators
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    vol = mesh.volumes
    if np.any(vol <= 1e-14 * vol.max()):
        raise ValueError("degenerate element (zero volume)")
    grads = mesh.gradients  # (ne, 4, 3)
    tets = mesh.tets
    nv = mesh.n_vertices
    ne = mesh.n_elements
    cst = constants
    damp = tau * cst.c ** 2 * cst.mu0
    sig = coeff.sigma_p0

    B = None
    if form == "undivided":
        pat = _pattern(mesh)
        eps = coeff.eps_p0
        quarter = np.repeat((vol / 4.0)[:, None], 4, axis=1)
        M = _lump(eps[:, None] * quarter, tets, nv)
        M2 = _lump(0.5 * sig[:, None] * quarter, tets, nv)
        M1 = M + damp * M2
        G1 = pat.matrix(pat.g1)
        G3 = pat.matrix(pat.g3)
        g2 = pat.A @ eps
        G2 = pat.matrix(g2)
        B = pat.matrix(pat.g1 + cst.eps0 * g2 - pat.g3)
    else:
        gg = np.einsum("eia,eja->eij", grads, grads)          # grad phi_i . grad phi_j
        dd = np.einsum("eia,ejb->ejbia", grads, grads)        # d_a phi_i  d_b phi_j
        rows = np.repeat(tets, 4, axis=1).ravel()
        cols = np.tile(tets, (1, 4)).ravel()
        bary, wq = tet_quadrature(quad_order)
        eps_n = coeff.eps_p1
        eps_q = eps_n[tets] @ bary.T                    # (ne, nq)
        inv_q = 1.0 / eps_q
        I0 = vol * (inv_q @ wq)                         # int 1/eps
        Ii = vol[:, None] * ((inv_q * wq) @ bary)       # int phi_i/eps, (ne, 4)
        quarter = np.repeat((vol / 4.0)[:, None], 4, axis=1)
        M = _lump(quarter, tets, nv)
        M2 = _lump(0.5 * sig[:, None] * Ii, tets, nv)
        M1 = M + damp * M2
        K = (I0[:, None, None] * gg).transpose(0, 2, 1).ravel()
        G1 = _scalar_to_vector(rows, cols, K, nv)
        G3 = _block_matrix(I0[:, None, None, None, None] * dd, tets, nv)
        grad_eps = np.einsum("ei,eia->ea", eps_n[tets], grads)    # (ne, 3)
        # (1/eps) d_a(eps phi_i) d_b phi_j = d_a phi_i d_b phi_j + phi_i d_a eps / eps d_b phi_j
        extra = np.einsum("ei,ea,ejb->ejbia", Ii, grad_eps, grads)
        G2 = _block_matrix(vol[:, None, None, None, None] * dd + extra, tets, nv)
    if np.any(M <= 0):
        raise ValueError("non-positive lumped mass")
    ops = AssembledOperators(M, M1, M2, G1, G2, G3, float(tau), cst, form)
    if B is not None:
        ops.__dict__["B"] = B
    return ops


def boundary_load(mesh: FeMesh, g, coeff: CoefficientPair | None = None,
                  quad_order: int = 3) -> np.ndarray:
    """Surface load ``F_j = int_{dOmega_FEM} (g / eps) phi_j``.

    Parameters
    ----------
    mesh : FeMesh
    g : ndarray, shape (nv,) or (nv, 3)
        Nodal values (only boundary values matter).
    coeff : CoefficientPair, optional
        Supplies the P1 permittivity; ``eps = 1`` if omitted.

    Returns
    -------
    ndarray with the shape of ``g``; zero at interior vertices.
    """
    g = np.asarray(g, dtype=float)
    scalar = g.ndim == 1
    gv = g[:, None] if scalar else g
    faces = mesh.boundary_faces()
    eps_n = np.ones(mesh.n_vertices) if coeff is None else coeff.eps_p1
    out = np.zeros_like(gv)
    if len(faces) == 0:
        return out[:, 0] if scalar else out
    x = mesh.vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)
    bary, wq = triangle_quadrature(quad_order)
    g_q = np.einsum("qi,fic->fqc", bary, gv[faces])
    inv_q = 1.0 / (eps_n[faces] @ bary.T)
    for i in range(3):
        contrib = area[:, None] * np.einsum("q,fq,fqc->fc", wq * bary[:, i], inv_q, g_q)
        np.add.at(out, faces[:, i], contrib)
    return out[:, 0] if scalar else out
