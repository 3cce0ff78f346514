"""Small synthetic set-ups shared by the CLI, the self-test and the tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adaptivity import RefinementConfig
from .data_pipeline import add_noise, generate_observations, smooth
from .fem_assembly import Constants
from .inverse import CGMConfig
from .mesh import IN, Box, HybridMesh, build_hybrid, cfl_timestep, time_grid
from .solver import ObservationSet, SourceSpec


def box_indicator(lo, hi, inside: float, outside: float = 1.0):
    """``eps(x)``: ``inside`` on the closed box ``[lo, hi]``, ``outside`` elsewhere."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)

    def fn(x):
        x = np.atleast_2d(x)
        hit = np.all((x >= lo - 1e-12) & (x <= hi + 1e-12), axis=1)
        return np.where(hit, inside, outside)

    return fn


@dataclass
class InclusionScenario:
    """Cubic inclusion in free space with transmitted-face data.

    The defaults give a 17^3 grid with a 12^3-cell FE box and a 6^3-cell
    unknown region holding a 3^3-cell inclusion. ``cgm_iterations`` and
    ``level_iterations`` are the iteration budgets of the first and the
    refined levels.
    """

    omega: tuple = (-1.0, 1.0)
    fem: tuple = (-0.75, 0.75)
    inner: tuple = (-0.375, 0.375)
    h: float = 0.125
    inclusion_lo: tuple = (-0.25, -0.25, -0.25)
    inclusion_hi: tuple = (0.125, 0.125, 0.125)
    contrast: float = 2.0
    frequency: float = 3.0
    T: float = 4.0
    safety: float = 0.5
    data_refinements: int = 1
    gamma: float = 1e-5
    cgm_iterations: int = 10
    level_iterations: int = 4
    constants: Constants = field(default_factory=Constants)

    def mesh(self) -> HybridMesh:
        return build_hybrid(Box.cube(*self.omega), Box.cube(*self.fem), [self.h] * 3,
                            in_box=Box.cube(*self.inner))

    def source(self) -> SourceSpec:
        return SourceSpec(omega=self.frequency)

    def cgm_config(self) -> CGMConfig:
        return CGMConfig(max_iter=self.cgm_iterations)

    def refinement_config(self, max_levels: int = 2) -> RefinementConfig:
        return RefinementConfig(max_levels=max_levels, level_iterations=self.level_iterations)

    def eps_fn(self):
        return box_indicator(self.inclusion_lo, self.inclusion_hi, self.contrast)

    def time_grid(self, mesh: HybridMesh) -> tuple[int, float]:
        return time_grid(self.T, cfl_timestep(mesh, self.safety, self.constants.c))

    @property
    def centre(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.inclusion_lo) + np.asarray(self.inclusion_hi))

    def true_eps(self, mesh: HybridMesh) -> np.ndarray:
        eps = np.ones(mesh.fe.n_elements)
        inside = mesh.fe.region == IN
        eps[inside] = self.eps_fn()(mesh.fe.centroids[inside])
        return eps

    def observations(self, mesh: HybridMesh, delta: float = 0.0, seed: int = 0,
                     smoothing: tuple | None = None) -> ObservationSet:
        """Data from the refined data mesh, optionally noisy and smoothed.

        ``smoothing`` is ``(temporal_window, spatial_radius)``.
        """
        _, tau = self.time_grid(mesh)
        obs = generate_observations(self.eps_fn(), mesh, self.data_refinements, self.source(),
                                    self.T, tau, self.constants)
        obs = add_noise(obs, delta, seed)
        if smoothing is not None:
            obs = smooth(obs, *smoothing)
        return obs


def region_centroid(mesh: HybridMesh, eps_p0, threshold: float) -> np.ndarray | None:
    """Volume-weighted centroid of IN elements with ``eps >= threshold``."""
    sel = (mesh.fe.region == IN) & (np.asarray(eps_p0) >= threshold)
    if not sel.any():
        return None
    w = mesh.fe.volumes[sel]
    return (w[:, None] * mesh.fe.centroids[sel]).sum(axis=0) / w.sum()
