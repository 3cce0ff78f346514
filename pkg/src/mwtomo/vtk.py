"""Legacy ASCII VTK writers for meshes, element fields and grid snapshots."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import FdGrid, FeMesh

VTK_TETRA = 10


def _header(title: str, kind: str) -> list[str]:
    return ["# vtk DataFile Version 3.0", title[:255], "ASCII", f"DATASET {kind}"]


def _fmt(values) -> list[str]:
    return [" ".join(f"{v:.10g}" for v in row) for row in np.atleast_2d(values)]


def _data_block(name: str, values) -> list[str]:
    v = np.asarray(values)
    if v.ndim == 1:
        lines = [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{x:.10g}" for x in v]
    elif v.ndim == 2 and v.shape[1] == 3:
        lines = [f"VECTORS {name} double"] + _fmt(v)
    else:
        raise ValueError(f"field '{name}' must be scalar or 3-vector per entry")
    return lines


def write_unstructured(path, fe: FeMesh, cell_data: dict | None = None,
                       point_data: dict | None = None, title: str = "fe mesh") -> Path:
    """Tetrahedral mesh with optional per-element and per-vertex fields."""
    path = Path(path)
    lines = _header(title, "UNSTRUCTURED_GRID")
    lines.append(f"POINTS {fe.n_vertices} double")
    lines += _fmt(fe.vertices)
    ne = fe.n_elements
    lines.append(f"CELLS {ne} {5 * ne}")
    lines += ["4 " + " ".join(str(int(v)) for v in t) for t in fe.tets]
    lines.append(f"CELL_TYPES {ne}")
    lines += [str(VTK_TETRA)] * ne
    cell_data = dict(cell_data or {})
    cell_data.setdefault("region", fe.region.astype(float))
    lines.append(f"CELL_DATA {ne}")
    for name, values in cell_data.items():
        if len(values) != ne:
            raise ValueError(f"cell field '{name}' has {len(values)} entries, expected {ne}")
        lines += _data_block(name, values)
    if point_data:
        lines.append(f"POINT_DATA {fe.n_vertices}")
        for name, values in point_data.items():
            if len(values) != fe.n_vertices:
                raise ValueError(f"point field '{name}' does not match the vertices")
            lines += _data_block(name, values)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def write_structured(path, grid: FdGrid, point_data: dict, title: str = "fd grid") -> Path:
    """Grid fields on ``STRUCTURED_POINTS``; values are in C order (x slowest)."""
    path = Path(path)
    nx, ny, nz = grid.shape
    lines = _header(title, "STRUCTURED_POINTS")
    lines.append(f"DIMENSIONS {nx} {ny} {nz}")
    lines.append("ORIGIN " + " ".join(f"{v:.10g}" for v in grid.origin))
    lines.append("SPACING " + " ".join(f"{v:.10g}" for v in grid.spacing))
    lines.append(f"POINT_DATA {grid.n_nodes}")
    for name, values in point_data.items():
        v = np.asarray(values)
        if v.shape[0] != grid.n_nodes:
            raise ValueError(f"point field '{name}' does not match the grid")
        # VTK walks x fastest
        order = np.arange(grid.n_nodes).reshape(grid.shape).transpose(2, 1, 0).ravel()
        lines += _data_block(name, v[order])
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_cell_scalars(path, name: str) -> np.ndarray:
    """Read one scalar cell field back from a file written by `write_unstructured`."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    n = None
    for i, line in enumerate(lines):
        if line.startswith("CELL_DATA"):
            n = int(line.split()[1])
        if line.startswith(f"SCALARS {name} ") and n is not None:
            return np.array([float(v) for v in lines[i + 2:i + 2 + n]])
    raise KeyError(f"no cell scalar '{name}' in {path}")
