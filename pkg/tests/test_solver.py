import math

import numpy as np
import pytest

from mwtomo.fem_assembly import CoefficientPair, assemble
from mwtomo.mesh import IN, Box, build_hybrid, cfl_timestep, time_grid
from mwtomo.selftest import smooth_medium
from mwtomo.solver import (HybridSystem, InstabilityError, ObservationSet, SourceSpec, cutoff,
                           fd_step_forward, fe_step_forward, load_observations,
                           observation_nodes, plane_wave, run_adjoint, run_forward,
                           save_observations)


@pytest.fixture(scope="module")
def line_grid():
    """64 cells along x1, h = 1; only the grid part is used."""
    return build_hybrid(Box((0, 0, 0), (64, 11, 11)), Box((2, 2, 2), (9, 9, 9)), [1.0] * 3).fd


def test_plane_wave_values():
    s = SourceSpec(omega=40.0)
    assert plane_wave(0.0, s) == 0.0
    assert plane_wave(math.pi / 80, s) == pytest.approx(1.0)
    assert plane_wave(0.2, s) == 0.0
    assert s.t_end == pytest.approx(2 * math.pi / 40)
    with pytest.raises(ValueError):
        SourceSpec(omega=0.0)


def test_cutoff_taper():
    t = np.linspace(0, 1, 11)
    z = cutoff(t, 1.0, 0.2)
    assert np.all(z[:9] == 1.0) and z[-1] == pytest.approx(0.0)
    assert np.all(np.diff(z) <= 0)
    assert np.all(cutoff(t, 1.0, 0.0) == 1.0)


def test_fd_constant_state(line_grid):
    u = np.tile([1.0, -2.0, 0.5], (line_grid.n_nodes, 1))
    out = fd_step_forward(u, u, line_grid, 0.5)
    assert np.allclose(out, u, rtol=0, atol=1e-14)


def test_fd_unit_courant_translation(line_grid):
    """Leapfrog at tau = h moves a 1D profile exactly one node per step.

    tau = h is past the 3D stability bound, so the profile is integer
    valued: every operation is then exact and no transverse mode is seeded.
    """
    x = line_grid.coords[:, 0]
    shape = {8: 1.0, 9: 4.0, 10: 6.0, 11: 4.0, 12: 1.0}
    profile = lambda s: np.array([shape.get(int(v), 0.0) for v in s])
    u0 = np.zeros((line_grid.n_nodes, 3))
    u1 = np.zeros_like(u0)
    u0[:, 1], u1[:, 1] = profile(x), profile(x - 1.0)
    for k in range(1, 40):
        u0, u1 = u1, fd_step_forward(u0, u1, line_grid, 1.0, absorbing=(False, False))
    assert np.array_equal(u1[:, 1], profile(x - 40.0))


def test_fd_front_arrival():
    h = 0.025
    fd = build_hybrid(Box((0, 0, 0), (1.0, 0.25, 0.25)), Box((0.05, 0.05, 0.05), (0.2, 0.2, 0.2)),
                      [h] * 3, out_layers=0).fd
    src = SourceSpec(omega=6.0)
    tau = 0.5 * h
    x = fd.coords[:, 0]
    plane = np.isclose(x, 0.5)
    u0 = u1 = np.zeros((fd.n_nodes, 3))
    series = []
    for k in range(1, int(0.9 / tau)):
        u0, u1 = u1, fd_step_forward(u0, u1, fd, tau, drive=plane_wave(k * tau, src))
        series.append(np.max(np.abs(u1[plane, 1])))
    series = np.array(series)
    t = tau * np.arange(2, len(series) + 2)
    arrival = t[np.argmax(series > 1e-2 * series.max())]
    assert abs(arrival - 0.5) <= 2 * h


def test_fe_constant_state(desk):
    ops = assemble(desk.fe, CoefficientPair.free_space(desk.fe), 0.05, form="undivided")
    u = np.tile([1.0, 2.0, 3.0], (desk.fe.n_vertices, 1))
    assert np.allclose(fe_step_forward(u, u, ops), u, rtol=0, atol=1e-13)


def test_default_step_count(desk):
    n, tau = time_grid(3.0, 0.006)
    fwd = run_forward(desk, CoefficientPair.free_space(desk.fe), SourceSpec(omega=40.0), 3.0, tau)
    assert n == fwd.n_steps == 500
    assert fwd.observations.values.shape[0] == 501


@pytest.mark.parametrize("safety", [0.5, 0.9])
def test_free_space_transit_time(desk, safety):
    """The transmitted pulse is the incident one delayed by the domain depth.

    In 1D the Neumann drive gives ``E2(d, t) = (1 - cos w(t - d)) / w`` on
    ``(d, d + 2 pi / w)``; the delay is read off the cross-correlation.
    """
    src = SourceSpec(omega=6.0)
    n, tau = time_grid(4.0, cfl_timestep(desk, safety))
    fwd = run_forward(desk, CoefficientPair.free_space(desk.fe), src, 4.0, tau)
    obs = fwd.observations
    trace = obs.values[:, len(obs.nodes) // 2, 1]
    depth = desk.fd.spacing[0] * (desk.fd.shape[0] - 1)
    t = obs.times
    exact = lambda shift: np.where((t > shift) & (t < shift + src.t_end),
                                   (1 - np.cos(src.omega * (t - shift))) / src.omega, 0.0)
    lags = np.arange(-60, 61)
    lag = lags[np.argmax([np.dot(np.roll(exact(depth), l), trace) for l in lags])] * tau
    assert abs(lag) <= 0.05 * depth
    assert np.max(np.abs(trace)) == pytest.approx(1 / 3, rel=0.05)


def test_zero_source_zero_trace(desk):
    fwd = run_forward(desk, CoefficientPair.free_space(desk.fe), None, 1.0, 0.05)
    assert not np.any(fwd.observations.values) and not np.any(fwd.trace)


def test_zero_residual_zero_adjoint(desk):
    coeff = CoefficientPair.free_space(desk.fe)
    nodes = observation_nodes(desk.fd)
    res = ObservationSet(nodes, desk.fd.coords[nodes], np.ones(len(nodes)), 0.05,
                         np.zeros((21, len(nodes), 3)))
    adj = run_adjoint(desk, coeff, res, 1.0, 0.05, source=SourceSpec(omega=6.0))
    assert not np.any(adj.trace)


def test_superposition(tiny, rng):
    coeff = smooth_medium(tiny, eps_peak=2.0, sigma=0.5, seed=3)
    n, tau = time_grid(0.6, cfl_timestep(tiny, 0.8))
    sys_ = HybridSystem(tiny, coeff, tau, source=SourceSpec(omega=8.0))
    inner = np.flatnonzero(tiny.fe.region == IN)
    nodes = np.unique(tiny.fe.tets[inner])
    a = np.zeros((n + 1, tiny.fe.n_vertices, 3))
    b = np.zeros_like(a)
    a[:, nodes] = rng.standard_normal((n + 1, len(nodes), 3))
    b[:, nodes] = rng.standard_normal((n + 1, len(nodes), 3))
    run = lambda w: sys_.forward(n_steps=n, fe_loads=lambda k: w[k],
                                 drive=False).observations.values
    ya, yb, yab = run(a), run(b), run(2.0 * a - 3.0 * b)
    assert np.max(np.abs(yab - (2 * ya - 3 * yb))) <= 1e-12 * np.max(np.abs(yab))


def test_exchange_idempotent(desk, rng):
    sys_ = HybridSystem(desk, CoefficientPair.free_space(desk.fe), 0.05)
    U = rng.standard_normal((desk.fd.n_nodes, 3))
    u = rng.standard_normal((desk.fe.n_vertices, 3))
    sys_._exchange(U, u)
    U1, u1 = U.copy(), u.copy()
    sys_._exchange(U, u)
    assert np.array_equal(U, U1) and np.array_equal(u, u1)


def test_adjoint_is_time_reversed_forward(tiny, rng):
    """sigma = 0, eps = 1: the adjoint sweep is the forward sweep run backwards."""
    coeff = CoefficientPair.free_space(tiny.fe)
    n, tau = time_grid(0.8, cfl_timestep(tiny, 0.8))
    sys_ = HybridSystem(tiny, coeff, tau)
    nodes = observation_nodes(tiny.fd)
    q = rng.standard_normal((n + 1, len(nodes), 3))
    adj = sys_.adjoint(nodes, q, keep_full=True)

    def load(m):
        out = np.zeros((tiny.fd.n_nodes, 3))
        out[nodes] = q[n + 1 - m]
        return out
    fwd = sys_.forward(n_steps=n, fd_loads=load, snapshot_steps=range(2, n + 1))
    for m in range(2, n):
        U, u = fwd.snapshots[m]
        assert np.allclose(adj.full_fd[n + 1 - m], U, rtol=0, atol=1e-13 * np.max(np.abs(q)))
        assert np.allclose(adj.full_fe[n + 1 - m], u, rtol=0, atol=1e-13 * np.max(np.abs(q)))


def test_adjoint_backward_cone(desk):
    """A point residual at the final time spreads backward no faster than the stencil allows,
    and its significant part no faster than unit speed."""
    coeff = CoefficientPair.free_space(desk.fe)
    n, tau = time_grid(1.2, cfl_timestep(desk, 0.9))
    sys_ = HybridSystem(desk, coeff, tau)
    nodes = observation_nodes(desk.fd)
    centre = nodes[len(nodes) // 2]
    q = np.zeros((n + 1, len(nodes), 3))
    q[n, len(nodes) // 2, 1] = 1.0
    adj = sys_.adjoint(nodes, q, keep_full=True)
    idx = desk.fd.multi_index()
    hop = np.abs(idx - idx[centre]).sum(axis=1)
    dist = np.linalg.norm(desk.fd.coords - desk.fd.coords[centre], axis=1)
    h = float(desk.fd.spacing[0])
    for j in range(n - 1, 0, -1):
        lam = np.abs(adj.full_fd[j]).max(axis=1)
        steps = n - j
        assert np.all(lam[hop > steps] == 0.0)
        ahead = dist > steps * tau + 3 * h
        assert np.max(lam[ahead], initial=0.0) <= 1e-2 * lam.max()


def test_instability_detected(desk):
    tau = 1.2 * cfl_timestep(desk, 1.0)
    coeff = smooth_medium(desk, eps_peak=1.0, sigma=0.5)
    with pytest.raises(InstabilityError):
        HybridSystem(desk, coeff, tau, source=SourceSpec(omega=6.0)).forward(n_steps=500)


def test_observation_round_trip(tmp_path, desk):
    fwd = run_forward(desk, CoefficientPair.free_space(desk.fe), SourceSpec(omega=6.0), 1.0, 0.05)
    obs = fwd.observations
    save_observations(tmp_path / "obs.txt", obs)
    back = load_observations(tmp_path / "obs.txt")
    assert np.array_equal(back.values, obs.values)
    assert np.array_equal(back.nodes, obs.nodes)
    assert back.tau == obs.tau and back.cutoff_steps == obs.cutoff_steps
    assert np.all(np.isclose(desk.fd.coords[back.nodes, 0], desk.fd.coords[:, 0].max()))
    (tmp_path / "bad.txt").write_text("nodes x\n")
    with pytest.raises(ValueError, match="malformed"):
        load_observations(tmp_path / "bad.txt")


def test_time_steps_must_divide(desk):
    with pytest.raises(ValueError, match="multiple"):
        run_forward(desk, CoefficientPair.free_space(desk.fe), None, 1.0, 0.3)
