"""Numerical invariant checks run by ``mwtomo selftest``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .adaptivity import relative_time
from .fem_assembly import CoefficientPair
from .inverse import Problem
from .mesh import IN, Box, build_hybrid, cfl_timestep, time_grid
from .phantom_io import VoxelPhantom, subsample
from .solver import HybridSystem, InstabilityError, SourceSpec, observation_nodes, plane_wave


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float
    passed: bool
    seconds: float
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return (f"{mark} {self.name}: value={self.value:.3e} limit={self.limit:.3e} "
                f"time={self.seconds:.2f}s {self.detail}").rstrip()


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def desk_mesh(cells: int = 16, fem_cells: int = 10, h: float = 0.125, **kw):
    """Cubic hybrid mesh with ``cells`` grid cells and a centred FE box."""
    half = 0.5 * cells * h
    fh = 0.5 * fem_cells * h
    return build_hybrid(Box.cube(-half, half), Box.cube(-fh, fh), [h] * 3, **kw)


def smooth_medium(mesh, eps_peak: float = 1.0, sigma: float = 0.0, seed: int | None = None):
    """Gaussian bump of eps and constant sigma on IN, or random values with ``seed``."""
    inside = mesh.fe.region == IN
    eps = np.ones(mesh.fe.n_elements)
    sig = np.zeros(mesh.fe.n_elements)
    if seed is not None:
        rng = np.random.default_rng(seed)
        eps[inside] = 1.0 + eps_peak * rng.random(inside.sum())
        sig[inside] = sigma * rng.random(inside.sum())
    else:
        x = mesh.fe.centroids[inside] - 0.5 * (np.array(mesh.in_box.lo) + np.array(mesh.in_box.hi))
        w = np.array(mesh.in_box.hi) - np.array(mesh.in_box.lo)
        eps[inside] = 1.0 + eps_peak * np.exp(-np.sum((x / (0.3 * w)) ** 2, axis=1))
        sig[inside] = sigma
    return CoefficientPair(mesh.fe, eps, sig)


@_timed
def check_coincidence(n_steps: int = 200, tol: float = 1e-10) -> CheckResult:
    """Free space: FE and FD values on the doubly computed layer agree."""
    mesh = desk_mesh()
    tau = cfl_timestep(mesh, 0.9)
    system = HybridSystem(mesh, CoefficientPair.free_space(mesh.fe), tau,
                          source=SourceSpec(omega=6.0))
    fwd = system.forward(n_steps=n_steps)
    worst = float(np.max(fwd.coincidence))
    return CheckResult("coincidence", worst, tol, worst <= tol, 0.0, f"steps={n_steps}")


@_timed
def check_energy(n_steps: int = 500, cfl_factor: float = 1.0, tol: float = 1e-12) -> CheckResult:
    """Energy after the pulse never grows by more than ``tol`` relative.

    Raises `InstabilityError` when the run blows up.
    """
    mesh = desk_mesh()
    src = SourceSpec(omega=6.0)
    tau = cfl_timestep(mesh, 1.0) * cfl_factor
    coeff = smooth_medium(mesh, eps_peak=1.0, sigma=0.5)
    fwd = HybridSystem(mesh, coeff, tau, source=src).forward(n_steps=n_steps, energy=True)
    k0 = int(math.ceil(src.t_end / tau)) + 1
    e = fwd.energy[k0:n_steps]
    growth = float(np.max(np.diff(e)) / max(abs(e[0]), 1e-300))
    return CheckResult("energy", growth, tol, growth <= tol, 0.0,
                       f"steps={n_steps} cfl_factor={cfl_factor:g}")


@_timed
def check_instability(cfl_factor: float = 1.2, n_steps: int = 500) -> CheckResult:
    """A run above the CFL step must stop with `InstabilityError`."""
    try:
        check_energy(n_steps, cfl_factor)
    except InstabilityError as exc:
        return CheckResult("instability", 1.0, 1.0, True, 0.0, f"detected: {exc}")
    return CheckResult("instability", 0.0, 1.0, False, 0.0, "blow-up not detected")


def _duality_setup():
    mesh = build_hybrid(Box.cube(0.0, 1.0), Box.cube(0.2, 0.8), [0.1] * 3, out_layers=0)
    coeff = smooth_medium(mesh, eps_peak=3.0, sigma=1.0, seed=7)
    n, tau = time_grid(1.0, cfl_timestep(mesh, 0.8))
    return mesh, coeff, n, tau


@_timed
def check_duality(pairs: int = 5, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    """``<A a, b> = <a, A* b>`` for interior FE loads and face observations."""
    mesh, coeff, n, tau = _duality_setup()
    system = HybridSystem(mesh, coeff, tau)
    obs_nodes = observation_nodes(mesh.fd)
    cls = mesh.classes
    owned = np.ones(mesh.fe.n_vertices, dtype=bool)
    owned[cls.o_fe] = False
    owned[cls.shared_fe] = False
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        a = rng.standard_normal((n + 1, mesh.fe.n_vertices, 3)) * owned[None, :, None]
        y = system.forward(n_steps=n, fe_loads=lambda k: a[k], obs_nodes=obs_nodes)
        ya = y.observations.values
        b = rng.standard_normal(ya.shape)
        adj = system.adjoint(obs_nodes, -b / tau, keep_full=True)
        lhs = float(np.sum(ya * b))
        rhs = -tau * float(np.sum(adj.full_fe[1:n] * a[1:n]))
        rel = abs(lhs - rhs) / (np.linalg.norm(ya) * np.linalg.norm(b))
        worst = max(worst, rel)
    return CheckResult("duality", worst, tol, worst <= tol, 0.0, f"pairs={pairs}")


def gradient_setup():
    """5^3-cell unknown region, smooth bump, sigma = 0, data from eps = 1."""
    mesh = build_hybrid(Box.cube(0.0, 1.5), Box.cube(0.2, 1.3), [0.1] * 3)
    src = SourceSpec(omega=8.0)
    n, tau = time_grid(1.6, cfl_timestep(mesh, 0.9))
    free = HybridSystem(mesh, CoefficientPair.free_space(mesh.fe), tau, source=src)
    observed = free.forward(n_steps=n).observations
    coeff = smooth_medium(mesh, eps_peak=0.8)
    problem = Problem(mesh, np.zeros(mesh.fe.n_elements), observed, src, tau, gamma=1e-5)
    return problem, coeff.eps_p0


@_timed
def check_gradient(delta: float = 1e-3, sample: int | None = 24, tol: float = 0.05,
                   seed: int = 0) -> CheckResult:
    """Adjoint gradient against central differences of J, elementwise."""
    problem, eps = gradient_setup()
    vol = problem.mesh.fe.volumes
    _, g = problem.value_and_gradient(eps)
    inside = np.flatnonzero(problem.mesh.fe.region == IN)
    big = inside[np.abs(g[inside]) > 1e-8 * np.max(np.abs(g[inside]))]
    if sample is not None and sample < big.size:
        big = np.sort(np.random.default_rng(seed).choice(big, sample, replace=False))
    worst = 0.0
    for e in big:
        ep, em = eps.copy(), eps.copy()
        ep[e] += delta
        em[e] -= delta
        fd = (problem.value(ep) - problem.value(em)) / (2 * delta * vol[e])
        worst = max(worst, abs(fd - g[e]) / abs(fd))
    return CheckResult("gradient", worst, tol, worst <= tol, 0.0, f"elements={big.size}")


@_timed
def check_plumbing() -> CheckResult:
    """Phantom subsampling count, plane-wave support and relative time."""
    raster = VoxelPhantom.uniform((312, 352, 296), "-1")
    n_nodes = subsample(raster, 8).n_voxels
    spec = SourceSpec(omega=40.0)
    t = np.array([-0.01, 0.0, 0.5 * spec.t_end, spec.t_end, 1.1 * spec.t_end])
    f = plane_wave(t, spec)
    wave_ok = bool(f[0] == 0 and f[-1] == 0 and abs(f[2] - math.sin(40.0 * t[2])) < 1e-15)
    rt = relative_time(1183.0, 500, 63492)
    ok = n_nodes == 63492 and wave_ok and abs(rt - 3.73e-5) < 5e-8
    return CheckResult("plumbing", float(n_nodes), 63492.0, ok, 0.0,
                       f"relative_time={rt:.3e} plane_wave={'ok' if wave_ok else 'bad'}")


def run_all(quick: bool = False) -> list[CheckResult]:
    out = [check_plumbing(), check_coincidence(), check_energy(), check_instability(),
           check_duality(pairs=2 if quick else 5),
           check_gradient(sample=6 if quick else 24)]
    return out


__all__ = ["CheckResult", "check_coincidence", "check_energy", "check_instability",
           "check_duality", "check_gradient", "check_plumbing", "run_all", "desk_mesh",
           "smooth_medium", "gradient_setup"]
