import numpy as np
import pytest

from mwtomo.mesh import IN
from mwtomo.plotting import plot_convergence, plot_eps_slice, plot_traces
from mwtomo.solver import ObservationSet
from mwtomo.vtk import read_cell_scalars, write_structured, write_unstructured

meshio = pytest.importorskip("meshio")


def test_unstructured_read_back(small, tmp_path, rng):
    fe = small.fe
    eps = 1.0 + rng.random(fe.n_elements)
    u = rng.standard_normal((fe.n_vertices, 3))
    path = write_unstructured(tmp_path / "m.vtk", fe, {"eps": eps}, {"E": u})
    m = meshio.read(path)
    assert np.allclose(m.points, fe.vertices, rtol=1e-9, atol=1e-12)
    assert np.array_equal(m.cells_dict["tetra"], fe.tets)
    assert np.allclose(np.ravel(m.cell_data["eps"][0]), eps, rtol=1e-9)
    assert np.array_equal(np.ravel(m.cell_data["region"][0]), fe.region.astype(float))
    assert np.allclose(m.point_data["E"], u, rtol=1e-9, atol=1e-12)
    assert np.allclose(read_cell_scalars(path, "eps"), eps, rtol=1e-9)
    with pytest.raises(KeyError):
        read_cell_scalars(path, "sigma")


def test_structured_read_back(small, tmp_path):
    grid = small.fd
    x = grid.coords
    f = x[:, 0] + 10 * x[:, 1] + 100 * x[:, 2]
    path = write_structured(tmp_path / "g.vtk", grid, {"f": f, "E": np.c_[f, 2 * f, 3 * f]})
    m = meshio.read(path)
    # meshio expands structured points with x fastest
    assert np.allclose(np.ravel(m.point_data["f"]), m.points[:, 0] + 10 * m.points[:, 1]
                       + 100 * m.points[:, 2], rtol=1e-12)
    assert np.allclose(m.point_data["E"][:, 2], 3 * np.ravel(m.point_data["f"]))
    assert len(m.points) == grid.n_nodes


def test_writer_rejects_bad_fields(small, tmp_path):
    with pytest.raises(ValueError, match="expected"):
        write_unstructured(tmp_path / "x.vtk", small.fe, {"eps": np.ones(3)})
    with pytest.raises(ValueError, match="scalar or 3-vector"):
        write_unstructured(tmp_path / "x.vtk", small.fe,
                           {"eps": np.ones((small.fe.n_elements, 2))})
    with pytest.raises(ValueError, match="grid"):
        write_structured(tmp_path / "x.vtk", small.fd, {"f": np.ones(4)})


def test_figures(desk, tmp_path):
    hist = [{"level": lev, "iteration": k, "J": 1.0 / (k + 1 + lev), "grad_norm": 0.1 / (k + 1)}
            for lev in range(2) for k in range(3)]
    eps = np.ones(desk.fe.n_elements)
    eps[desk.fe.region == IN] = 1.5
    n = 7
    obs = ObservationSet(np.arange(n), np.zeros((n, 3)), np.ones(n), 0.1,
                         np.random.default_rng(0).standard_normal((11, n, 3)), 0.0)
    for path in (plot_convergence(hist, tmp_path / "c.png"),
                 plot_eps_slice(desk, eps, tmp_path / "s.png", truth=eps),
                 plot_traces(obs, tmp_path / "t.png")):
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
