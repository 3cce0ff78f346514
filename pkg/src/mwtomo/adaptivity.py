"""Refinement indicators, marking and the adaptive reconstruction loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data_pipeline import resample
from .fem_assembly import Constants
from .inverse import CGMConfig, Problem, cgm_minimize, l2_norm
from .mesh import IN, HybridMesh, cfl_timestep, refine_local
from .solver import InstabilityError, ObservationSet, SourceSpec

logger = logging.getLogger(__name__)

FIRST, SECOND = "first", "second"


@dataclass
class RefinementConfig:
    """Settings of the adaptive loop.

    Parameters
    ----------
    indicator : {"first", "second"}
        ``first`` scores ``h_K eps_K``, ``second`` scores ``|g_K|``.
    beta : float
        Elements scoring at least ``beta * max`` are refined.
    tol1 : float
        Stop when the L2 change of eps between levels drops below this;
        ``inf`` switches the test off.
    tol2 : float
        Stop when the final gradient norm of a level drops below this.
    max_levels : int
        Number of refinements; the loop runs ``max_levels + 1`` CGM phases.
    max_marks : int or None
        Elements whose lineage was refined this often are not refined again.
    level_iterations : int or None
        CGM iteration cap on refined levels; ``None`` keeps the cap of the
        first level.
    cfl_safety : float
        Safety factor of the time step recomputed after refinement; the
        step of the first level is taken from the data.
    """

    indicator: str = FIRST
    beta: float = 0.8
    tol1: float = 1e-6
    tol2: float = 1e-7
    max_levels: int = 2
    max_marks: int | None = 3
    level_iterations: int | None = None
    cfl_safety: float = 0.9

    def __post_init__(self):
        if self.indicator not in (FIRST, SECOND):
            raise ValueError(f"indicator must be '{FIRST}' or '{SECOND}'")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not (self.tol1 > 0 and self.tol2 > 0):
            raise ValueError("tolerances must be positive")
        if self.max_levels < 0:
            raise ValueError("max_levels must be non-negative")
        if self.level_iterations is not None and self.level_iterations < 1:
            raise ValueError("level_iterations must be at least 1")


def indicator_first(mesh: HybridMesh, eps_p0) -> np.ndarray:
    """``h_K * eps_K`` on IN elements, zero elsewhere."""
    eps = np.asarray(eps_p0, dtype=float)
    if eps.shape != (mesh.fe.n_elements,):
        raise ValueError("eps does not match the mesh")
    score = np.zeros(mesh.fe.n_elements)
    inside = mesh.fe.region == IN
    score[inside] = mesh.fe.diameters[inside] * np.abs(eps[inside])
    return score


def indicator_second(mesh: HybridMesh, grad, level: int | None = None) -> np.ndarray:
    """``|g_K|`` on IN elements, zero elsewhere.

    ``level`` is the mesh level the gradient was computed on; a mismatch
    with ``mesh.level`` means the gradient is stale.
    """
    g = np.asarray(grad, dtype=float)
    if (level is not None and level != mesh.level) or g.shape != (mesh.fe.n_elements,):
        raise ValueError("stale gradient: computed on a different mesh")
    score = np.zeros(mesh.fe.n_elements)
    inside = mesh.fe.region == IN
    score[inside] = np.abs(g[inside])
    return score


def mark(score, beta: float) -> np.ndarray:
    """Indices with ``score >= beta * max(score)`` and a positive score."""
    s = np.asarray(score, dtype=float)
    if s.size == 0:
        return np.zeros(0, dtype=np.int64)
    top = float(np.max(s))
    if top <= 0.0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero((s >= beta * top) & (s > 0.0))


def transfer_coefficients(values, old: HybridMesh, new: HybridMesh) -> np.ndarray:
    """Per-element values on ``new`` inherited from the parent elements on ``old``."""
    v = np.asarray(values)
    if v.shape[0] != old.fe.n_elements:
        raise ValueError("values do not match the source mesh")
    parent = getattr(new.fe, "parent", None)
    if parent is None or len(parent) != new.fe.n_elements:
        raise ValueError("ancestry missing on the refined mesh")
    if new is old:
        return v.copy()
    if parent.size and (parent.min() < 0 or parent.max() >= old.fe.n_elements):
        raise ValueError("ancestry does not point into the source mesh")
    return v[parent].copy()


def relative_time(t: float, n_t: int, n: int) -> float:
    """Seconds per time step per node, ``t / (n_t n)``."""
    if n_t <= 0 or n <= 0 or t < 0:
        raise ValueError("relative time needs t >= 0 and positive counts")
    return t / (n_t * n)


@dataclass
class LevelResult:
    level: int
    mesh: HybridMesh
    eps_p0: np.ndarray
    tau: float
    n_steps: int
    status: str
    iterations: int
    grad_norm: float
    max_eps: float
    rel_error: float | None
    seconds: float
    indicator: np.ndarray | None = None
    marked: int = 0


@dataclass
class AdaptiveResult:
    levels: list = field(default_factory=list)
    history: list = field(default_factory=list)
    status: str = ""

    @property
    def eps_p0(self) -> np.ndarray:
        return self.levels[-1].eps_p0

    @property
    def mesh(self) -> HybridMesh:
        return self.levels[-1].mesh

    @property
    def meshes(self) -> list:
        return [lv.mesh for lv in self.levels]


def _step_for(mesh: HybridMesh, tau: float, safety: float, c: float) -> float:
    limit = cfl_timestep(mesh, safety, c)
    while tau > limit * (1 + 1e-12):
        tau /= 2.0
    return tau


def adaptive_reconstruct(mesh0: HybridMesh, observed: ObservationSet, sigma_p0,
                         source: SourceSpec, config: RefinementConfig = RefinementConfig(),
                         cgm: CGMConfig = CGMConfig(), eps0=1.0, gamma: float = 1e-5,
                         constants: Constants = Constants(), truth_max: float | None = None,
                         callback=None) -> AdaptiveResult:
    """CGM on successively refined meshes.

    Each level minimises the Tikhonov functional, scores elements with the
    configured indicator, refines the marked ones and carries eps, sigma
    and the reference over to the children. The time step is halved
    when the refined mesh needs it or a run is unstable, with the data
    resampled onto it.

    Parameters
    ----------
    mesh0 : HybridMesh
    observed : ObservationSet
        Data at the time step ``observed.tau``.
    sigma_p0 : ndarray
        Known conductivity per element of ``mesh0``.
    source : SourceSpec
    config : RefinementConfig
    cgm : CGMConfig
    eps0 : float or ndarray
        Initial guess, also the regularization reference.
    gamma : float
    truth_max : float, optional
        For the relative contrast error column.
    callback : callable, optional
        Receives each history row, which carries a ``level`` key.
    """
    mesh = mesh0
    sigma = np.asarray(sigma_p0, dtype=float).copy()
    eps = np.broadcast_to(np.asarray(eps0, dtype=float), (mesh.fe.n_elements,)).copy()
    eps[mesh.fe.region != IN] = 1.0
    eps_ref = eps.copy()
    tau = observed.tau
    data = observed
    result = AdaptiveResult()
    prev_eps = None
    level = 0
    while True:
        level_cgm = cgm
        if level > 0:
            tau = _step_for(mesh, tau, config.cfl_safety, constants.c)
            if config.level_iterations is not None:
                level_cgm = replace(cgm, max_iter=config.level_iterations)
        t0 = time.perf_counter()
        for _ in range(4):
            if tau != data.tau:
                data = resample(observed, tau)
            problem = Problem(mesh, sigma, data, source, tau, gamma, eps_ref, constants)
            rows = []
            try:
                state = cgm_minimize(problem, eps, level_cgm, truth_max,
                                     lambda row, level=level: rows.append(dict(row, level=level)))
                break
            except InstabilityError:
                logger.warning("level %d unstable at tau=%g, halving", level, tau)
                tau /= 2.0
        else:
            raise InstabilityError(f"level {level} unstable after repeated step halving")
        for row in rows:
            result.history.append(row)
            if callback is not None:
                callback(row)
        seconds = time.perf_counter() - t0
        eps = state.eps_p0
        inside = mesh.fe.region == IN
        rel = result.history[-1]["rel_error"]
        lv = LevelResult(level, mesh, eps.copy(), tau, data.n_steps, state.status,
                         state.iteration, state.grad_norm,
                         float(np.max(eps[inside])) if inside.any() else 1.0, rel, seconds)
        result.levels.append(lv)
        logger.info("level %d: %s after %d iterations", level, state.status, state.iteration)

        if (prev_eps is not None and math.isfinite(config.tol1)
                and l2_norm(mesh, eps - prev_eps) < config.tol1):
            result.status = "converged: eps change below tol1"
            break
        if state.grad_norm < config.tol2:
            result.status = "converged: gradient norm below tol2"
            break
        if level >= config.max_levels:
            result.status = "stopped: maximum levels"
            break

        if config.indicator == FIRST:
            score = indicator_first(mesh, eps)
        else:
            score = indicator_second(mesh, state.gradient, mesh.level)
        marked = mark(score, config.beta)
        if config.max_marks is not None:
            marked = marked[mesh.fe.marks[marked] < config.max_marks]
        lv.indicator, lv.marked = score, int(marked.size)
        if marked.size == 0:
            result.status = "stopped: nothing to refine"
            break
        new_mesh = refine_local(mesh, marked)
        eps = transfer_coefficients(eps, mesh, new_mesh)
        prev_eps = eps.copy()
        sigma = transfer_coefficients(sigma, mesh, new_mesh)
        eps_ref = transfer_coefficients(eps_ref, mesh, new_mesh)
        mesh = new_mesh
        level += 1
    return result


def level_summary(result: AdaptiveResult) -> list:
    """One dict per level: nodes, elements, steps, time and relative time."""
    rows = []
    for lv in result.levels:
        n = lv.mesh.n_nodes
        rows.append({"level": lv.level, "nodes": n, "elements": lv.mesh.fe.n_elements,
                     "steps": lv.n_steps, "iterations": lv.iterations, "seconds": lv.seconds,
                     "relative_time": relative_time(lv.seconds, max(lv.n_steps, 1), n),
                     "max_eps": lv.max_eps, "rel_error": lv.rel_error, "status": lv.status,
                     "marked": lv.marked})
    return rows


__all__ = ["RefinementConfig", "indicator_first", "indicator_second", "mark",
           "transfer_coefficients", "relative_time", "adaptive_reconstruct", "AdaptiveResult",
           "LevelResult", "level_summary"]
