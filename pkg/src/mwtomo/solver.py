"""Explicit time stepping of the coupled FE/FD wave system and its adjoint.

Each forward step updates grid nodes outside the inner overlap boundary
with the FD scheme and every FE node with the FE scheme, then copies FE
values to the grid at the inner overlap boundary and grid values to the
FE boundary. The adjoint sweep runs the transposed recursion backwards
with the same exchange.

Both schemes are written as

    M1 u[k+1] = 2 M u[k] - M1' u[k-1] - tau^2 B u[k] + tau^2 c^2 load[k]

with lumped diagonal ``M1 = M + D`` and ``M1' = M - D``. On the grid,
``M`` is the trapezoid node volume, ``B = c^2 K`` the 7-point Laplacian
in energy form and ``D`` the centred first-order absorbing term on
absorbing faces. Written per interior node this is the familiar
``u[k+1] = tau^2 c^2 Lap u[k] + 2 u[k] - u[k-1]``.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fem_assembly import AssembledOperators, CoefficientPair, Constants, assemble
from .mesh import FdGrid, HybridMesh


class InstabilityError(RuntimeError):
    """Raised when the time stepping produces non-finite or exploding values."""


# sources and boundaries ---------------------------------------------------

@dataclass(frozen=True)
class SourceSpec:
    """Single-period plane-wave pulse on the incidence face.

    Parameters
    ----------
    omega : float
        Angular frequency; the pulse is active on ``(0, 2 pi / omega)``.
    component : int
        Driven field component, 1-based (2 means E2).
    axis : int
        Propagation axis; the pulse enters through ``x_axis = min``.
    amplitude : float
    """

    omega: float = 40.0
    component: int = 2
    axis: int = 0
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.component not in (1, 2, 3) or self.axis not in (0, 1, 2):
            raise ValueError("component is 1..3 and axis 0..2")

    @property
    def t_end(self) -> float:
        return 2.0 * math.pi / self.omega


def plane_wave(t, spec: SourceSpec):
    """``sin(omega t)`` on ``(0, 2 pi / omega)``, zero elsewhere."""
    t = np.asarray(t, dtype=float)
    on = (t > 0) & (t < spec.t_end)
    val = np.where(on, spec.amplitude * np.sin(spec.omega * t), 0.0)
    return float(val) if val.ndim == 0 else val


def cutoff(times, T: float, width: float) -> np.ndarray:
    """Temporal cut-off: 1 on ``[0, T - width]``, cosine taper to 0 at ``T``."""
    t = np.asarray(times, dtype=float)
    if width <= 0:
        return np.ones_like(t)
    s = np.clip((t - (T - width)) / width, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * s))


# observations -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Time series of the field at boundary grid nodes.

    Parameters
    ----------
    nodes : ndarray of int
        Grid node indices (all on one outer face).
    coords : ndarray, shape (n, 3)
    weights : ndarray, shape (n,)
        Quadrature area weight per node.
    tau : float
    values : ndarray, shape (N + 1, n, 3)
    cutoff_steps : float
        Width of the terminal taper in steps.
    """

    nodes: np.ndarray
    coords: np.ndarray
    weights: np.ndarray
    tau: float
    values: np.ndarray
    cutoff_steps: float = 10.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1] != len(self.nodes) or v.shape[2] != 3:
            raise ValueError("values must have shape (N + 1, n_nodes, 3)")
        object.__setattr__(self, "values", v)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def T(self) -> float:
        return self.n_steps * self.tau

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.n_steps + 1)

    def with_values(self, values) -> "ObservationSet":
        return replace(self, values=np.asarray(values, dtype=float))

    def weights_in_time(self) -> np.ndarray:
        """Trapezoid time weights times the terminal cut-off."""
        w = np.full(self.n_steps + 1, self.tau)
        w[0] = w[-1] = 0.5 * self.tau
        return w * cutoff(self.times, self.T, self.cutoff_steps * self.tau)

    def aligned_with(self, other: "ObservationSet") -> bool:
        return (self.values.shape == other.values.shape
                and np.array_equal(self.nodes, other.nodes)
                and math.isclose(self.tau, other.tau, rel_tol=1e-12))


def observation_nodes(grid: FdGrid, axis: int = 0, side: int = 1) -> np.ndarray:
    """Grid nodes of the transmitted face (``x_axis = max`` by default)."""
    return grid.face_nodes(axis, side)


def empty_observations(mesh: HybridMesh, n_steps: int, tau: float, axis: int = 0,
                       cutoff_steps: float = 10.0, nodes=None) -> ObservationSet:
    fd = mesh.fd
    if nodes is None:
        nodes = observation_nodes(fd, axis, 1)
    w = fd.face_weights(axis)[nodes]
    return ObservationSet(np.asarray(nodes), fd.coords[nodes], w, float(tau),
                          np.zeros((n_steps + 1, len(nodes), 3)), cutoff_steps)


def save_observations(path, obs: ObservationSet) -> None:
    """Write the series: header, node lines ``x y z weight``, then N + 1 rows."""
    path = Path(path)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# observation series\n")
        fh.write(f"nodes {len(obs.nodes)}\n")
        for i, x, w in zip(obs.nodes, obs.coords, obs.weights):
            fh.write(f"{int(i)} {float(x[0])!r} {float(x[1])!r} {float(x[2])!r} {float(w)!r}\n")
        fh.write(f"steps {obs.n_steps} tau {float(obs.tau)!r} cutoff {float(obs.cutoff_steps)!r}\n")
        np.savetxt(fh, obs.values.reshape(obs.n_steps + 1, -1), fmt="%.17g")


def load_observations(path) -> ObservationSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        head = lines[0].split()
        if head[0] != "nodes":
            raise ValueError
        n = int(head[1])
        node_rows = np.array([ln.split() for ln in lines[1:1 + n]], dtype=float).reshape(n, 5)
        meta = lines[1 + n].split()
        steps, tau, width = int(meta[1]), float(meta[3]), float(meta[5])
        data = np.array([ln.split() for ln in lines[2 + n:]], dtype=float)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed observation file") from exc
    if data.shape != (steps + 1, 3 * n):
        raise ValueError(f"{path}: expected {steps + 1} rows of {3 * n} values")
    return ObservationSet(node_rows[:, 0].astype(np.int64), node_rows[:, 1:4], node_rows[:, 4],
                          tau, data.reshape(steps + 1, n, 3), width)


# grid operators -----------------------------------------------------------

def _trapezoid(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _neumann_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return (sp.diags([off, main, off], [-1, 0, 1]) / h).tocsr()


@dataclass(frozen=True, eq=False)
class FdOperators:
    """Grid mass, stiffness and face weights (scalar, applied per component)."""

    m: np.ndarray
    K: sp.csr_matrix
    face_lo: np.ndarray
    face_hi: np.ndarray
    face_weight: np.ndarray
    axis: int


@lru_cache(maxsize=16)
def fd_operators(grid: FdGrid, axis: int = 0) -> FdOperators:
    n, h = grid.shape, grid.spacing
    w = [_trapezoid(n[d], h[d]) for d in range(3)]
    k = [_neumann_1d(n[d], h[d]) for d in range(3)]
    Wd = [sp.diags(w[d]) for d in range(3)]
    K = (sp.kron(k[0], sp.kron(Wd[1], Wd[2]))
         + sp.kron(Wd[0], sp.kron(k[1], Wd[2]))
         + sp.kron(Wd[0], sp.kron(Wd[1], k[2]))).tocsr()
    m = np.kron(w[0], np.kron(w[1], w[2]))
    return FdOperators(m, K, grid.face_nodes(axis, 0), grid.face_nodes(axis, 1),
                       grid.face_weights(axis), axis)


def _damping(fdo: FdOperators, tau: float, c: float, front: bool, back: bool) -> np.ndarray:
    d = np.zeros_like(fdo.m)
    coef = 0.5 * tau * c
    if front:
        d[fdo.face_lo] += coef * fdo.face_weight[fdo.face_lo]
    if back:
        d[fdo.face_hi] += coef * fdo.face_weight[fdo.face_hi]
    return d


def fd_step_forward(u_prev, u_curr, grid: FdGrid, tau: float, c: float = 1.0,
                    absorbing=(True, True), drive: float = 0.0, component: int = 2,
                    axis: int = 0) -> np.ndarray:
    """One leapfrog step of the grid scheme on every grid node.

    Parameters
    ----------
    u_prev, u_curr : ndarray, shape (n_nodes, 3)
    absorbing : (bool, bool)
        Absorbing condition on the incidence and transmitted faces.
    drive : float
        Neumann data ``f(t_k)`` on the incidence face, applied to
        ``component`` (1-based).
    """
    fdo = fd_operators(grid, axis)
    d = _damping(fdo, tau, c, *absorbing)
    rhs = 2.0 * fdo.m[:, None] * u_curr - (fdo.m - d)[:, None] * u_prev
    rhs -= (tau * c) ** 2 * (fdo.K @ u_curr)
    if drive:
        rhs[fdo.face_lo, component - 1] += (tau * c) ** 2 * drive * fdo.face_weight[fdo.face_lo]
    out = rhs / (fdo.m + d)[:, None]
    if not np.all(np.isfinite(out)):
        raise InstabilityError("non-finite value in FD update")
    return out


def fe_step_forward(u_prev, u_curr, ops: AssembledOperators, load=None) -> np.ndarray:
    """One step of the FE scheme on every FE vertex (arrays of shape ``(nv, 3)``)."""
    tau, c = ops.tau, ops.constants.c
    up, uc = np.asarray(u_prev).ravel(), np.asarray(u_curr).ravel()
    rhs = 2.0 * ops.M * uc - ops.M1_prev * up - (tau * c) ** 2 * (ops.B @ uc)
    if load is not None:
        rhs += (tau * c) ** 2 * np.asarray(load).ravel()
    out = (rhs / ops.M1).reshape(-1, 3)
    if not np.all(np.isfinite(out)):
        raise InstabilityError("non-finite value in FE update")
    return out


# coupled system -----------------------------------------------------------

@dataclass
class ForwardResult:
    """Output of `run_forward`.

    ``trace`` holds FE values on ``trace_nodes`` at every time level,
    shape ``(N + 1, n, 3)``. ``energy[k]`` is the discrete energy between
    levels ``k`` and ``k + 1`` (NaN where not computed).
    """

    observations: ObservationSet
    trace: np.ndarray
    trace_nodes: np.ndarray
    energy: np.ndarray
    coincidence: np.ndarray
    n_steps: int
    tau: float
    snapshots: dict = field(default_factory=dict)


@dataclass
class AdjointResult:
    """Adjoint levels ``lam[k]``, ``k = 0..N+1``, on ``trace_nodes`` (rows 0, N, N+1 are zero)."""

    trace: np.ndarray
    trace_nodes: np.ndarray
    n_steps: int
    tau: float
    full_fe: np.ndarray | None = None
    full_fd: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class _GridPart:
    """Mesh-dependent (coefficient-independent) pieces of the coupled scheme."""

    m: np.ndarray
    d_front: np.ndarray
    d_back: np.ndarray
    drive_w: np.ndarray
    fe_owned: np.ndarray
    fd_owned: np.ndarray
    K: sp.csr_matrix
    frozen: np.ndarray


_GRID_PARTS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _grid_part(mesh: HybridMesh, axis: int, tau: float, c: float) -> _GridPart:
    key = (axis, float(tau), float(c))
    per_mesh = _GRID_PARTS.setdefault(mesh, {})
    part = per_mesh.get(key)
    if part is not None:
        return part
    cls = mesh.classes
    fdo = fd_operators(mesh.fd, axis)
    upd = np.zeros(mesh.fd.n_nodes, bool)
    upd[cls.fd_update] = True
    # rows of nodes the grid does not update are zeroed; those nodes are
    # either the hole or overwritten by the exchange
    K = sp.diags(upd.astype(float)) @ fdo.K
    drive_w = np.zeros(mesh.fd.n_nodes)
    drive_w[fdo.face_lo] = fdo.face_weight[fdo.face_lo]
    own = np.ones(mesh.fe.n_vertices, bool)
    own[cls.o_fe] = False
    fd_own = upd.copy()
    fd_own[cls.shared_fd] = False
    part = _GridPart(fdo.m, _damping(fdo, tau, c, True, False), _damping(fdo, tau, c, False, True),
                     drive_w, np.flatnonzero(own), np.flatnonzero(fd_own), K.tocsr(),
                     np.flatnonzero(~upd))
    per_mesh[key] = part
    return part


class HybridSystem:
    """Operators of the coupled scheme for one mesh, coefficient set and step.

    Parameters
    ----------
    mesh : HybridMesh
    coeff : CoefficientPair
    tau : float
    constants : Constants
    form : str
        FE weak form, see `fem_assembly`.
    source : SourceSpec or None
        Fixes the propagation axis and the time at which the incidence
        face switches from driven to absorbing.
    """

    def __init__(self, mesh: HybridMesh, coeff: CoefficientPair, tau: float,
                 constants: Constants = Constants(), form: str = "undivided",
                 source: SourceSpec | None = None, axis: int | None = None):
        self.mesh = mesh
        self.coeff = coeff
        self.tau = float(tau)
        self.constants = constants
        self.source = source
        self.axis = source.axis if source is not None else (0 if axis is None else axis)
        self.ops = assemble(mesh.fe, coeff, tau, constants, form)
        self.grid = _grid_part(mesh, self.axis, self.tau, constants.c)
        self.c2t2 = (self.tau * constants.c) ** 2

    # the incidence face is driven (Neumann) during the pulse, absorbing afterwards
    def front_absorbing(self, k: int) -> bool:
        if self.source is None:
            return True
        return k * self.tau > self.source.t_end

    def _fd_coeffs(self, k: int):
        g = self.grid
        d = g.d_back + g.d_front if self.front_absorbing(k) else g.d_back
        return (g.m + d)[:, None], (g.m - d)[:, None]

    def drive_value(self, k: int) -> float:
        if self.source is None:
            return 0.0
        return plane_wave(k * self.tau, self.source)

    def _exchange(self, U, u):
        cls = self.mesh.classes
        U[self.grid.frozen] = 0.0
        U[cls.diamond_fd] = u[cls.diamond_fe]
        u[cls.o_fe] = U[cls.o_fd]

    def _energy(self, U0, U1, u0, u1, KU0, Bu0) -> float:
        """Discrete energy between two levels, summed over owned nodes."""
        tau, c2, g = self.tau, self.constants.c ** 2, self.grid
        fo = g.fd_owned
        V = (U1[fo] - U0[fo]) / tau
        e = 0.5 * np.sum(g.m[fo, None] * V * V)
        e += 0.5 * c2 * np.sum(U1[fo] * KU0[fo])
        own = g.fe_owned
        v = (u1[own] - u0[own]) / tau
        e += 0.5 * np.sum(self.ops.M.reshape(-1, 3)[own] * v * v)
        e += 0.5 * c2 * np.sum(u1[own] * Bu0.reshape(-1, 3)[own])
        return float(e)

    def forward(self, T: float | None = None, n_steps: int | None = None, obs_nodes=None,
                trace_nodes=None, fe_loads=None, fd_loads=None, initial=None,
                energy: bool = False, instability_factor: float | None = 100.0,
                check_every: int = 10, cutoff_steps: float = 10.0,
                snapshot_steps=(), drive: bool = True) -> ForwardResult:
        """Run the coupled forward sweep.

        Parameters
        ----------
        T, n_steps : float, int
            Final time or number of steps (``N = T / tau``).
        obs_nodes : array of int, optional
            Grid nodes to record; default the transmitted face.
        trace_nodes : array of int, optional
            FE vertices whose history is stored; default IN vertices.
        fe_loads, fd_loads : callable, optional
            ``load(k) -> (n, 3)`` array added as ``tau^2 c^2 load`` at step
            ``k`` (producing level ``k + 1``).
        initial : tuple, optional
            ``(fd0, fe0, fd1, fe1)`` initial levels; zero by default.
        energy : bool
            Record the discrete energy at every step.
        drive : bool
            Apply the plane-wave data; False keeps only the boundary
            schedule of the source, which makes the sweep linear in the loads.
        instability_factor : float or None
            Abort when the energy exceeds this multiple of its value at the
            end of the pulse (checked every ``check_every`` steps). Only
            used for source or initial-data driven runs.
        """
        N = _steps(T, n_steps, self.tau)
        mesh, cls, tau, g = self.mesh, self.mesh.classes, self.tau, self.grid
        ngrid, nv = mesh.fd.n_nodes, mesh.fe.n_vertices
        obs = empty_observations(mesh, N, tau, self.axis, cutoff_steps, obs_nodes)
        tnodes = mesh.in_nodes if trace_nodes is None else np.asarray(trace_nodes)
        trace = np.zeros((N + 1, len(tnodes), 3))
        en = np.full(N, np.nan)
        coin = np.zeros(N + 1)
        snaps = {}

        if initial is None:
            U0, U1 = np.zeros((ngrid, 3)), np.zeros((ngrid, 3))
            u0, u1 = np.zeros((nv, 3)), np.zeros((nv, 3))
        else:
            U0, u0, U1, u1 = (np.array(a, dtype=float) for a in initial)
            self._exchange(U0, u0)
            self._exchange(U1, u1)
        for k, (U, u) in enumerate(((U0, u0), (U1, u1))):
            obs.values[k] = U[obs.nodes]
            trace[k] = u[tnodes]
        B, K = self.ops.B, g.K
        c2t2 = self.c2t2
        M, M1p, M1 = self.ops.M, self.ops.M1_prev, self.ops.M1
        m2 = 2.0 * g.m[:, None]
        comp = None if self.source is None else self.source.component - 1
        monitor = instability_factor is not None and fe_loads is None and fd_loads is None
        ref_energy = 0.0
        src_end = 1 if self.source is None else int(math.floor(self.source.t_end / tau)) + 1
        for k in range(1, N):
            m1, m1p = self._fd_coeffs(k)
            KU = K @ U1
            rhs = m2 * U1 - m1p * U0 - c2t2 * KU
            f = self.drive_value(k) if drive else 0.0
            if f:
                rhs[:, comp] += c2t2 * f * g.drive_w
            if fd_loads is not None:
                lk = fd_loads(k)
                if lk is not None:
                    rhs += c2t2 * np.asarray(lk)
            U2 = rhs / m1
            u1f = u1.reshape(-1)
            Bu = B @ u1f
            r = 2.0 * M * u1f - M1p * u0.reshape(-1) - c2t2 * Bu
            if fe_loads is not None:
                lk = fe_loads(k)
                if lk is not None:
                    r += c2t2 * np.asarray(lk).reshape(-1)
            u2 = (r / M1).reshape(-1, 3)
            # the doubly computed layer, compared before the exchange
            if cls.shared_fd.size:
                a, b = U2[cls.shared_fd], u2[cls.shared_fe]
                scale = max(float(np.max(np.abs(b))), 1e-300)
                coin[k + 1] = float(np.max(np.abs(a - b))) / scale
            self._exchange(U2, u2)
            checkpoint = k % check_every == 0 or k == N - 1
            if energy or (monitor and checkpoint):
                en[k] = self._energy(U1, U2, u1, u2, KU, Bu)
            if checkpoint:
                if not (np.all(np.isfinite(U2)) and np.all(np.isfinite(u2))):
                    raise InstabilityError(
                        f"non-finite field at step {k + 1} (t = {(k + 1) * tau:.6g}); reduce tau")
                if monitor:
                    if k <= src_end or ref_energy == 0.0:
                        ref_energy = max(ref_energy, abs(en[k]))
                    elif not abs(en[k]) <= instability_factor * ref_energy:
                        raise InstabilityError(
                            f"energy grew by more than {instability_factor:g}x at step {k + 1} "
                            f"(t = {(k + 1) * tau:.6g}); reduce tau")
            obs.values[k + 1] = U2[obs.nodes]
            trace[k + 1] = u2[tnodes]
            if k + 1 in snapshot_steps:
                snaps[k + 1] = (U2.copy(), u2.copy())
            U0, U1, u0, u1 = U1, U2, u1, u2
        return ForwardResult(obs, trace, tnodes, en, coin, N, tau, snaps)

    def adjoint(self, obs_nodes, obs_loads, trace_nodes=None, fe_loads=None,
                keep_full: bool = False) -> AdjointResult:
        """Backward sweep of the transposed scheme.

        Solves, for ``j = N-1 .. 1``,
        ``M1[j] lam[j] = 2 M lam[j+1] - M1'[j+2] lam[j+2] - tau^2 B^T lam[j+1] + tau^2 c^2 q[j+1]``
        with ``lam[N] = lam[N+1] = 0``. ``M1[j]`` and ``M1'[j+2]`` are the
        damping coefficients of forward steps ``j`` and ``j + 2``.

        Parameters
        ----------
        obs_nodes : array of int
            Grid nodes carrying ``obs_loads``.
        obs_loads : ndarray, shape (N + 1, n_obs, 3)
            ``q[k]`` at the observation nodes.
        fe_loads : ndarray, shape (N + 1, nv, 3), optional
        keep_full : bool
            Also return every level on all grid and FE nodes.
        """
        obs_loads = np.asarray(obs_loads, dtype=float)
        obs_nodes = np.asarray(obs_nodes)
        N = obs_loads.shape[0] - 1
        mesh, g = self.mesh, self.grid
        ngrid, nv = mesh.fd.n_nodes, mesh.fe.n_vertices
        if np.any(np.isin(obs_nodes, g.frozen)):
            raise ValueError("observation nodes must be grid-updated nodes")
        tnodes = mesh.in_nodes if trace_nodes is None else np.asarray(trace_nodes)
        trace = np.zeros((N + 2, len(tnodes), 3))
        full_fe = np.zeros((N + 2, nv, 3)) if keep_full else None
        full_fd = np.zeros((N + 2, ngrid, 3)) if keep_full else None
        L2, L1 = np.zeros((ngrid, 3)), np.zeros((ngrid, 3))     # lam[j+2], lam[j+1]
        l2, l1 = np.zeros((nv, 3)), np.zeros((nv, 3))
        # the grid stencil is symmetric; its rows act on exchanged values as in the forward sweep
        BT, K = self.ops.BT, g.K
        c2t2 = self.c2t2
        M, M1, M1p = self.ops.M, self.ops.M1, self.ops.M1_prev
        m2 = 2.0 * g.m[:, None]
        for j in range(N - 1, 0, -1):
            m1, _ = self._fd_coeffs(j)
            _, m1p2 = self._fd_coeffs(j + 2)
            rhs = m2 * L1 - m1p2 * L2 - c2t2 * (K @ L1)
            rhs[obs_nodes] += c2t2 * obs_loads[j + 1]
            L0 = rhs / m1
            r = 2.0 * M * l1.reshape(-1) - M1p * l2.reshape(-1) - c2t2 * (BT @ l1.reshape(-1))
            if fe_loads is not None:
                r += c2t2 * np.asarray(fe_loads[j + 1]).reshape(-1)
            l0 = (r / M1).reshape(-1, 3)
            self._exchange(L0, l0)
            if j % 10 == 0 or j == 1:
                if not (np.all(np.isfinite(L0)) and np.all(np.isfinite(l0))):
                    raise InstabilityError(f"non-finite adjoint field at level {j}")
            trace[j] = l0[tnodes]
            if keep_full:
                full_fe[j] = l0
                full_fd[j] = L0
            L2, L1, l2, l1 = L1, L0, l1, l0
        return AdjointResult(trace, tnodes, N, self.tau, full_fe, full_fd)


def _steps(T, n_steps, tau) -> int:
    if n_steps is not None:
        return int(n_steps)
    if T is None:
        raise ValueError("give T or n_steps")
    n = int(round(T / tau))
    if not math.isclose(n * tau, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"T = {T} is not a multiple of tau = {tau}")
    return n


def run_forward(mesh: HybridMesh, coeff: CoefficientPair, source: SourceSpec | None,
                T: float, tau: float, record: ObservationSet | None = None,
                constants: Constants = Constants(), form: str = "undivided",
                **kwargs) -> ForwardResult:
    """Forward solve driven by the plane-wave source.

    ``record`` may supply the observation nodes and cut-off width.
    Extra keyword arguments go to `HybridSystem.forward`.
    """
    system = HybridSystem(mesh, coeff, tau, constants, form, source)
    if record is not None:
        kwargs.setdefault("obs_nodes", record.nodes)
        kwargs.setdefault("cutoff_steps", record.cutoff_steps)
    return system.forward(T=T, **kwargs)


def residual_loads(residual: ObservationSet) -> np.ndarray:
    """Adjoint point loads ``-(tau_k / tau) z(t_k) w_n (E - E~)`` at the observation nodes."""
    wt = residual.weights_in_time() / residual.tau
    return -(wt[:, None, None] * residual.weights[None, :, None]) * residual.values


def run_adjoint(mesh: HybridMesh, coeff: CoefficientPair, residual: ObservationSet,
                T: float, tau: float, source: SourceSpec | None = None,
                constants: Constants = Constants(), form: str = "undivided",
                system: HybridSystem | None = None, **kwargs) -> AdjointResult:
    """Adjoint solve driven by the observation residual ``E - E~``.

    ``source`` must match the forward run, since it fixes when the
    incidence face becomes absorbing.
    """
    if system is None:
        system = HybridSystem(mesh, coeff, tau, constants, form, source)
    N = _steps(T, None, tau)
    if residual.n_steps != N or not math.isclose(residual.tau, tau, rel_tol=1e-12):
        raise ValueError("residual series not aligned with the time grid")
    return system.adjoint(residual.nodes, residual_loads(residual), **kwargs)
