"""Synthetic data: refined-mesh forward solves, noise and smoothing."""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.ndimage import uniform_filter1d
from scipy.spatial import cKDTree

from .fem_assembly import CoefficientPair, Constants
from .mesh import IN, HybridMesh, refine_local
from .solver import ObservationSet, SourceSpec, run_forward

DEFAULT_WINDOW = 5
DEFAULT_RADIUS = 1


def generate_observations(truth, mesh: HybridMesh, refine_times: int, source: SourceSpec,
                          T: float, tau: float, constants: Constants = Constants(),
                          sigma=None, cutoff_steps: float = 10.0,
                          substeps: int = 1) -> ObservationSet:
    """Transmitted-face data from a forward solve on a uniformly refined FE region.

    Parameters
    ----------
    truth : callable or CoefficientPair
        ``truth(x) -> eps`` evaluated at element centroids of the data
        mesh, or a coefficient set on ``mesh`` that is inherited by the
        refined elements.
    mesh : HybridMesh
        Inversion mesh; its grid and observation nodes are reused.
    refine_times : int
        Rounds of bisection of every IN element.
    source : SourceSpec
    T, tau : float
        Time grid of the inversion.
    sigma : callable, optional
        Known conductivity ``sigma(x)`` when ``truth`` is a callable.
    substeps : int
        The data run uses ``tau / substeps`` and is sampled back to ``tau``.
    """
    data_mesh, anc = mesh, np.arange(mesh.fe.n_elements)
    for _ in range(int(refine_times)):
        data_mesh = refine_local(data_mesh, np.flatnonzero(data_mesh.fe.region == IN))
        anc = anc[data_mesh.fe.parent]
    if isinstance(truth, CoefficientPair):
        coeff = CoefficientPair(data_mesh.fe, truth.eps_p0[anc], truth.sigma_p0[anc], truth.bounds)
    else:
        coeff = CoefficientPair.from_function(data_mesh.fe, truth, sigma)
    fine_tau = tau / substeps
    fwd = run_forward(data_mesh, coeff, source, T, fine_tau, constants=constants,
                      cutoff_steps=cutoff_steps * substeps)
    obs = fwd.observations
    values = obs.values[::substeps]
    return ObservationSet(obs.nodes, obs.coords, obs.weights, tau, values, cutoff_steps)


def add_noise(series, delta: float, seed: int = 0):
    """Add Gaussian noise scaled by each component's maximum amplitude.

    ``value += delta * max|component| * N(0, 1)``, with the maximum taken
    over all nodes and times of that component.

    Parameters
    ----------
    series : ObservationSet or ndarray of shape (N + 1, n, 3)
    delta : float
        Relative noise level; 0 returns the input unchanged.
    seed : int
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    is_obs = isinstance(series, ObservationSet)
    v = series.values if is_obs else np.asarray(series, dtype=float)
    if delta == 0:
        return series
    rng = np.random.default_rng(seed)
    amp = np.max(np.abs(v), axis=tuple(range(v.ndim - 1)))
    noisy = v + delta * amp * rng.standard_normal(v.shape)
    return series.with_values(noisy) if is_obs else noisy


def _spatial_weights(coords, radius: int):
    tree = cKDTree(coords)
    if len(coords) < 2:
        return None
    d, _ = tree.query(coords, k=2)
    h = float(np.min(d[:, 1]))
    r = radius * h * (1 + 1e-9)
    pairs = tree.query_pairs(r, output_type="ndarray")
    s = max(radius, 1) * h / 2.0
    n = len(coords)
    rows = np.concatenate([np.arange(n), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(n), pairs[:, 1], pairs[:, 0]])
    dist = np.linalg.norm(coords[rows] - coords[cols], axis=1)
    w = np.exp(-0.5 * (dist / s) ** 2)
    W = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
    rs = np.asarray(W.sum(axis=1)).ravel()
    return sp.diags(1.0 / rs) @ W


def smooth(series, temporal_window: int = DEFAULT_WINDOW, spatial_radius: int = DEFAULT_RADIUS,
           coords=None):
    """Moving average in time, then Gaussian averaging over neighbouring nodes.

    Parameters
    ----------
    series : ObservationSet or ndarray of shape (N + 1, n, 3)
    temporal_window : int
        Centred window in steps (edges repeat the end values).
    spatial_radius : int
        Neighbourhood radius in node spacings; 0 disables spatial smoothing.
    coords : ndarray, optional
        Node coordinates when ``series`` is a bare array.
    """
    if temporal_window < 1:
        raise ValueError("temporal window must be at least 1")
    is_obs = isinstance(series, ObservationSet)
    v = series.values if is_obs else np.asarray(series, dtype=float)
    out = v
    if temporal_window > 1:
        out = uniform_filter1d(out, size=int(temporal_window), axis=0, mode="nearest")
    if spatial_radius > 0:
        xyz = series.coords if is_obs else coords
        if xyz is None:
            raise ValueError("spatial smoothing needs node coordinates")
        W = _spatial_weights(np.asarray(xyz), int(spatial_radius))
        if W is not None:
            out = np.stack([W @ out[k] for k in range(out.shape[0])])
    if out is v:
        out = v.copy()
    return series.with_values(out) if is_obs else out


def resample(obs: ObservationSet, tau: float) -> ObservationSet:
    """Series on a new time step over the same final time.

    Exact striding when one step divides the other, cubic spline otherwise.
    """
    T = obs.T
    n_new = int(round(T / tau))
    if not math.isclose(n_new * tau, T, rel_tol=1e-9):
        raise ValueError("new time step does not divide the final time")
    if math.isclose(tau, obs.tau, rel_tol=1e-12):
        return obs
    ratio = tau / obs.tau
    width = obs.cutoff_steps * obs.tau / tau
    if math.isclose(ratio, round(ratio), rel_tol=1e-9) and ratio > 1:
        vals = obs.values[::int(round(ratio))]
    else:
        spline = CubicSpline(obs.times, obs.values, axis=0)
        vals = spline(tau * np.arange(n_new + 1))
    return ObservationSet(obs.nodes, obs.coords, obs.weights, tau, vals, width)
