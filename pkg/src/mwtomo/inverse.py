"""Tikhonov functional, adjoint gradient and projected conjugate gradients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fem_assembly import CoefficientPair, Constants
from .mesh import IN, HybridMesh
from .solver import (ForwardResult, HybridSystem, ObservationSet, SourceSpec,
                     residual_loads)

logger = logging.getLogger(__name__)

EPS_MIN, EPS_MAX = 1.0, 10.0


def project_admissible(eps_p0, region=None, lo: float = EPS_MIN, hi: float = EPS_MAX):
    """Clamp to ``[lo, hi]``; elements outside IN are set to 1 when ``region`` is given."""
    out = np.clip(np.asarray(eps_p0, dtype=float), lo, hi)
    if region is not None:
        out = np.where(np.asarray(region) == IN, out, 1.0)
    return out


def misfit(observed: ObservationSet, simulated: ObservationSet) -> float:
    """``1/2 sum_k tau_k z(t_k) sum_n w_n |E - E~|^2``."""
    if not observed.aligned_with(simulated):
        raise ValueError("misaligned series: nodes or time steps differ")
    r = simulated.values - observed.values
    wt = simulated.weights_in_time()
    return 0.5 * float(np.einsum("k,n,knc->", wt, simulated.weights, r * r))


def regularization(mesh: HybridMesh, eps_p0, eps_ref, gamma: float) -> float:
    """``1/2 gamma sum_{K in IN} |K| (eps_K - eps_ref_K)^2``."""
    inside = mesh.fe.region == IN
    d = (np.asarray(eps_p0, float) - np.broadcast_to(eps_ref, np.shape(eps_p0)))[inside]
    return 0.5 * gamma * float(np.sum(mesh.fe.volumes[inside] * d * d))


def tikhonov(observed: ObservationSet, simulated: ObservationSet, eps_p0, eps_ref,
             gamma: float, mesh: HybridMesh | None = None, volumes=None) -> float:
    """Tikhonov functional.

    Parameters
    ----------
    observed, simulated : ObservationSet
        Aligned series.
    eps_p0, eps_ref : ndarray
        Current and reference permittivity per element (or per IN element
        when ``volumes`` is given).
    gamma : float
    mesh : HybridMesh, optional
        Supplies element volumes and regions.
    volumes : ndarray, optional
        Element volumes when no mesh is given; all elements count.
    """
    j = misfit(observed, simulated)
    if gamma:
        if mesh is not None:
            j += regularization(mesh, eps_p0, eps_ref, gamma)
        else:
            vol = np.ones(np.shape(eps_p0)) if volumes is None else np.asarray(volumes)
            d = np.asarray(eps_p0, float) - eps_ref
            j += 0.5 * gamma * float(np.sum(vol * d * d))
    return j


def gradient(mesh: HybridMesh, fwd: ForwardResult, adj, eps_p0, eps_ref, gamma: float,
             constants: Constants = Constants()) -> np.ndarray:
    """Per-element gradient of the Tikhonov functional, zero outside IN.

    With forward levels ``E[k]`` and adjoint levels ``lam[k]`` on IN vertices,

    ``g_K = -1/c^2 [ sum_{k=1}^{N-1} (lam[k+1]-lam[k])/tau . (E[k+1]-E[k])/tau tau
    + lam[1] . (E[1]-E[0])/tau ]_K + eps0 sum_{k=1}^{N-1} tau (div lam[k] div E[k])_K
    + gamma (eps_K - eps_ref_K)``.

    Products of nodal fields are integrated with the vertex (lumped) rule,
    so with the undivided scheme this is the exact derivative of the
    discrete functional.
    """
    fe = mesh.fe
    if not np.array_equal(fwd.trace_nodes, adj.trace_nodes):
        raise ValueError("trace/mesh mismatch: forward and adjoint traces differ in nodes")
    N = fwd.n_steps
    if adj.n_steps != N or not math.isclose(fwd.tau, adj.tau, rel_tol=1e-12):
        raise ValueError("trace/mesh mismatch: forward and adjoint time grids differ")
    tau, c2, eps0 = fwd.tau, constants.c ** 2, constants.eps0
    inside = np.flatnonzero(fe.region == IN)
    local = np.full(fe.n_vertices, -1, dtype=np.int64)
    local[fwd.trace_nodes] = np.arange(len(fwd.trace_nodes))
    tets = local[fe.tets[inside]]
    if np.any(tets < 0):
        raise ValueError("trace/mesh mismatch: traces do not cover the IN vertices")

    E = fwd.trace                  # (N+1, n, 3)
    lam = adj.trace                # (N+2, n, 3), lam[N] = lam[N+1] = 0
    dE = E[1:] - E[:-1]            # dE[k] = E[k+1] - E[k], k = 0..N-1
    dlam = lam[2:N + 1] - lam[1:N]  # k = 1..N-1
    s = np.einsum("knc,knc->n", dlam, dE[1:N]) + np.einsum("nc,nc->n", lam[1], dE[0])
    vol = fe.volumes[inside]
    first = -(vol / 4.0) * s[tets].sum(axis=1) / (tau * c2)

    grads = fe.gradients[inside]   # (m, 4, 3)
    # divergence per element per level, k = 1..N-1
    div_E = np.einsum("eia,keia->ke", grads, E[1:N][:, tets, :])
    div_l = np.einsum("eia,keia->ke", grads, lam[1:N][:, tets, :])
    second = tau * eps0 * vol * np.einsum("ke,ke->e", div_E, div_l)

    g = np.zeros(fe.n_elements)
    g[inside] = (first + second) / vol
    if gamma:
        ref = np.broadcast_to(np.asarray(eps_ref, float), (fe.n_elements,))
        g[inside] += gamma * (np.asarray(eps_p0, float)[inside] - ref[inside])
    return g


def l2_norm(mesh: HybridMesh, values) -> float:
    """Volume-weighted L2 norm over IN elements."""
    inside = mesh.fe.region == IN
    v = np.asarray(values, float)[inside]
    return math.sqrt(float(np.sum(mesh.fe.volumes[inside] * v * v)))


def relative_contrast_error(eps_p0, truth_max: float) -> float:
    """``|max eps_h - max eps_true| / max eps_true``."""
    return abs(float(np.max(eps_p0)) - truth_max) / truth_max


@dataclass
class Problem:
    """Everything needed to evaluate J and its gradient on one mesh."""

    mesh: HybridMesh
    sigma_p0: np.ndarray
    observed: ObservationSet
    source: SourceSpec
    tau: float
    gamma: float = 1e-5
    eps_ref: np.ndarray | float = 1.0
    constants: Constants = field(default_factory=Constants)
    bounds: tuple = (EPS_MAX, 10.0)

    def __post_init__(self):
        if self.observed.n_steps * self.tau <= 0:
            raise ValueError("empty observation series")
        if not math.isclose(self.observed.tau, self.tau, rel_tol=1e-12):
            raise ValueError("observations are not sampled at the solver time step")

    @property
    def n_steps(self) -> int:
        return self.observed.n_steps

    def coefficients(self, eps_p0) -> CoefficientPair:
        return CoefficientPair(self.mesh.fe, eps_p0, self.sigma_p0, self.bounds)

    def _forward(self, eps_p0):
        system = HybridSystem(self.mesh, self.coefficients(eps_p0), self.tau,
                              self.constants, "undivided", self.source)
        fwd = system.forward(n_steps=self.n_steps, obs_nodes=self.observed.nodes,
                             cutoff_steps=self.observed.cutoff_steps)
        return system, fwd

    def value(self, eps_p0) -> float:
        _, fwd = self._forward(eps_p0)
        return tikhonov(self.observed, fwd.observations, eps_p0, self.eps_ref, self.gamma,
                        mesh=self.mesh)

    def value_and_gradient(self, eps_p0):
        system, fwd = self._forward(eps_p0)
        J = tikhonov(self.observed, fwd.observations, eps_p0, self.eps_ref, self.gamma,
                     mesh=self.mesh)
        residual = fwd.observations.with_values(fwd.observations.values - self.observed.values)
        adj = system.adjoint(residual.nodes, residual_loads(residual))
        g = gradient(self.mesh, fwd, adj, eps_p0, self.eps_ref, self.gamma, self.constants)
        return J, g


@dataclass
class CGMConfig:
    """Settings of the projected conjugate gradient loop.

    ``alpha`` is the largest pointwise change in eps allowed by the first
    trial step of a line search; later searches start from the last
    accepted step, doubled.
    """

    max_iter: int = 20
    theta: float = 1e-5
    norm_tol: float = 1e-4
    alpha: float = 0.1
    alpha_max: float = 2.0
    armijo: float = 1e-4
    max_backtracks: int = 20
    restart: int = 10
    lo: float = EPS_MIN
    hi: float = EPS_MAX


@dataclass
class InversionState:
    iteration: int
    eps_p0: np.ndarray
    gradient: np.ndarray
    direction: np.ndarray
    beta: float
    alpha: float
    J: float
    grad_norm: float
    history: list = field(default_factory=list)
    status: str = "running"


def fletcher_reeves(g_new_norm: float, g_old_norm: float) -> float:
    """``||g_m||^2 / ||g_{m-1}||^2``."""
    if g_old_norm == 0.0:
        return 0.0
    return (g_new_norm / g_old_norm) ** 2


def cgm_minimize(problem: Problem, eps0, config: CGMConfig = CGMConfig(),
                 truth_max: float | None = None, callback=None) -> InversionState:
    """Minimise the Tikhonov functional over admissible eps on IN elements.

    Parameters
    ----------
    problem : Problem
    eps0 : ndarray
        Starting permittivity per element.
    config : CGMConfig
    truth_max : float, optional
        Maximum of the true permittivity, for the error column.
    callback : callable, optional
        Called with each history row.

    Returns
    -------
    InversionState
        Final state; ``history`` holds one dict per iteration with keys
        ``iteration, J, grad_norm, alpha, beta, max_eps, rel_error``.
    """
    mesh = problem.mesh
    region = mesh.fe.region
    inside = region == IN
    vol = mesh.fe.volumes

    def ip(a, b):
        return float(np.sum(vol[inside] * a[inside] * b[inside]))

    eps = project_admissible(eps0, region, config.lo, config.hi)
    J, g = problem.value_and_gradient(eps)
    gnorm = math.sqrt(ip(g, g))
    d = -g
    beta = 0.0
    alpha_trial = None
    state = InversionState(0, eps, g, d, beta, 0.0, J, gnorm)

    def record(m, alpha, beta):
        row = {"iteration": m, "J": J, "grad_norm": gnorm, "alpha": alpha, "beta": beta,
               "max_eps": float(np.max(eps[inside])) if inside.any() else 1.0,
               "rel_error": (relative_contrast_error(eps[inside], truth_max)
                             if truth_max is not None else None)}
        state.history.append(row)
        if callback is not None:
            callback(row)

    record(0, 0.0, 0.0)
    m = 0
    while True:
        if gnorm <= config.theta:
            state.status = "converged: gradient norm below theta"
            break
        if m >= config.max_iter:
            state.status = "stopped: maximum iterations"
            break
        if ip(d, g) >= 0:
            d = -g
        dmax = float(np.max(np.abs(d[inside])))
        if dmax == 0.0:
            state.status = "converged: zero direction"
            break
        alpha = (config.alpha / dmax) if alpha_trial is None else alpha_trial
        accepted = False
        for _ in range(config.max_backtracks + 1):
            trial = project_admissible(eps + alpha * d, region, config.lo, config.hi)
            step = trial - eps
            if not np.any(step[inside]):
                alpha *= 0.5
                continue
            J_trial = problem.value(trial)
            if J_trial <= J + config.armijo * ip(g, step):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if np.array_equal(d, -g):
                state.status = "stopped: line search failure"
                break
            d, alpha_trial = -g, None
            continue
        eps_old_norm = math.sqrt(ip(eps, eps))
        eps = trial
        m += 1
        J_new, g_new = problem.value_and_gradient(eps)
        gnorm_new = math.sqrt(ip(g_new, g_new))
        beta = fletcher_reeves(gnorm_new, gnorm) if m % config.restart else 0.0
        d = -g_new + beta * d
        J, g, gnorm = J_new, g_new, gnorm_new
        alpha_trial = min(2.0 * alpha, config.alpha_max / max(float(np.max(np.abs(d[inside]))),
                                                              1e-300))
        state.iteration, state.eps_p0, state.gradient, state.direction = m, eps, g, d
        state.beta, state.alpha, state.J, state.grad_norm = beta, alpha, J, gnorm
        record(m, alpha, beta)
        eps_norm = math.sqrt(ip(eps, eps))
        if eps_norm > 0 and abs(eps_norm - eps_old_norm) / eps_norm < config.norm_tol:
            state.status = "converged: eps norm stabilized"
            break
    state.eps_p0, state.gradient, state.J, state.grad_norm = eps, g, J, gnorm
    state.iteration = m
    return state
