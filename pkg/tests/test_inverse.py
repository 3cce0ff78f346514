import numpy as np
import pytest
from hypothesis import given, strategies as st

from mwtomo.fem_assembly import CoefficientPair
from mwtomo.inverse import (CGMConfig, Problem, cgm_minimize, fletcher_reeves, gradient, l2_norm,
                            misfit, project_admissible, regularization,
                            relative_contrast_error, tikhonov)
from mwtomo.mesh import IN, OUT, cfl_timestep, time_grid
from mwtomo.selftest import check_gradient, gradient_setup, smooth_medium
from mwtomo.solver import HybridSystem, ObservationSet, SourceSpec, run_forward


def series(values, tau=0.1, cutoff_steps=0.0, weights=None):
    values = np.asarray(values, float)
    n = values.shape[1]
    w = np.ones(n) if weights is None else np.asarray(weights)
    return ObservationSet(np.arange(n), np.zeros((n, 3)), w, tau, values, cutoff_steps)


@pytest.fixture(scope="module")
def twin():
    """Problem whose data come from its own model at eps = bump."""
    problem, eps = gradient_setup()
    sigma = np.zeros(problem.mesh.fe.n_elements)
    fwd = HybridSystem(problem.mesh, CoefficientPair(problem.mesh.fe, eps, sigma), problem.tau,
                       source=problem.source).forward(n_steps=problem.n_steps)
    return problem.mesh, eps, fwd.observations, problem.source, problem.tau


def test_tikhonov_zero_at_match(twin):
    mesh, eps, obs, _, _ = twin
    assert tikhonov(obs, obs, eps, eps, 1e-5, mesh=mesh) == 0.0


def test_tikhonov_closed_form():
    N, tau = 40, 0.05
    sim = np.zeros((N + 1, 1, 3))
    sim[:, 0, 1] = 1.0
    J = tikhonov(series(np.zeros_like(sim), tau), series(sim, tau), [1.0], 1.0, 0.0)
    assert J == pytest.approx(0.5 * N * tau, rel=1e-14)


def test_regularization_linear_in_gamma(desk, rng):
    eps = np.ones(desk.fe.n_elements)
    inside = desk.fe.region == IN
    eps[inside] += rng.random(inside.sum())
    r1 = regularization(desk, eps, 1.0, 1e-3)
    assert regularization(desk, eps, 1.0, 2e-3) == pytest.approx(2 * r1, rel=1e-14)
    brute = 0.5e-3 * sum(v * (e - 1) ** 2 for v, e, i in zip(desk.fe.volumes, eps, inside) if i)
    assert r1 == pytest.approx(brute, rel=1e-12)


def test_misaligned_series():
    a = series(np.zeros((5, 2, 3)))
    b = series(np.zeros((6, 2, 3)))
    with pytest.raises(ValueError, match="misaligned"):
        misfit(a, b)


def test_gradient_zero_residual(twin):
    mesh, eps, obs, src, tau = twin
    sigma = np.zeros(mesh.fe.n_elements)
    for gamma, ref in ((0.0, 1.0), (1e-3, 1.0)):
        problem = Problem(mesh, sigma, obs, src, tau, gamma=gamma, eps_ref=ref)
        J, g = problem.value_and_gradient(eps)
        expect = np.where(mesh.fe.region == IN, gamma * (eps - ref), 0.0)
        assert np.max(np.abs(g - expect)) <= 1e-14


def test_gradient_matches_central_differences():
    res = check_gradient(sample=6)
    assert res.passed, res.line()


def test_gradient_trace_mismatch(twin):
    mesh, eps, obs, src, tau = twin
    coeff = CoefficientPair(mesh.fe, eps, np.zeros(mesh.fe.n_elements))
    sys_ = HybridSystem(mesh, coeff, tau, source=src)
    fwd = sys_.forward(n_steps=obs.n_steps)
    adj = sys_.adjoint(obs.nodes, np.zeros((obs.n_steps, len(obs.nodes), 3)))
    with pytest.raises(ValueError, match="trace/mesh mismatch"):
        gradient(mesh, fwd, adj, eps, 1.0, 0.0)


def test_cgm_already_optimal(twin):
    mesh, _, _, src, tau = twin
    ones = np.ones(mesh.fe.n_elements)
    free = run_forward(mesh, CoefficientPair.free_space(mesh.fe), src, None, tau,
                       n_steps=twin[2].n_steps).observations
    problem = Problem(mesh, np.zeros_like(ones), free, src, tau, gamma=0.0)
    state = cgm_minimize(problem, ones)
    assert state.iteration == 0
    assert state.grad_norm <= 1e-14
    assert state.status.startswith("converged")
    assert np.array_equal(state.eps_p0, ones)


def test_cgm_descent_and_log(twin):
    mesh, eps, obs, src, tau = twin
    problem = Problem(mesh, np.zeros(mesh.fe.n_elements), obs, src, tau, gamma=1e-5)
    rows = []
    state = cgm_minimize(problem, np.ones(mesh.fe.n_elements), CGMConfig(max_iter=4, theta=0.0, norm_tol=0.0),
                         truth_max=float(eps.max()), callback=rows.append)
    J = [r["J"] for r in state.history]
    assert rows == state.history
    assert all(b <= a for a, b in zip(J, J[1:]))
    assert state.iteration == 4 and J[-1] < J[0]
    assert set(state.history[0]) == {"iteration", "J", "grad_norm", "alpha", "beta", "max_eps",
                                     "rel_error"}
    assert np.all(state.eps_p0 >= 1.0) and np.all(state.eps_p0 <= 10.0)
    assert np.all(state.eps_p0[mesh.fe.region != IN] == 1.0)
    assert state.history[0]["rel_error"] == pytest.approx(
        relative_contrast_error(np.ones(3), eps.max()))


def test_project_examples():
    assert project_admissible([0.5, 12.0, 9.234]).tolist() == [1.0, 10.0, 9.234]
    region = np.array([IN, OUT, IN])
    assert project_admissible([3.0, 3.0, 0.0], region).tolist() == [3.0, 1.0, 1.0]


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
def test_project_idempotent(values):
    once = project_admissible(values)
    assert np.array_equal(project_admissible(once), once)
    assert np.all((once >= 1) & (once <= 10))


@given(st.floats(1e-6, 1e6))
def test_fletcher_reeves_unit(norm):
    assert fletcher_reeves(norm, norm) == 1.0
    assert fletcher_reeves(2 * norm, norm) == pytest.approx(4.0)
    assert fletcher_reeves(norm, 0.0) == 0.0


def test_relative_error_and_norm(desk):
    assert relative_contrast_error(np.array([1.0, 7.019]), 9.0) == pytest.approx(0.22, abs=1e-3)
    ones = np.ones(desk.fe.n_elements)
    vol_in = desk.fe.volumes[desk.fe.region == IN].sum()
    assert l2_norm(desk, ones) == pytest.approx(np.sqrt(vol_in))


def test_problem_rejects_wrong_step(twin):
    mesh, _, obs, src, tau = twin
    with pytest.raises(ValueError, match="time step"):
        Problem(mesh, np.zeros(mesh.fe.n_elements), obs, src, 2 * tau)
