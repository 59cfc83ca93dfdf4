"""Legacy VTK snapshot writer."""

import numpy as np

from ensflow import vtkio
from ensflow.fespace import build_space, interpolate
from ensflow.mesh import BoundaryPartition, generate_unit_square


def test_mesh_to_vtk_structure(tmp_path):
    mesh = generate_unit_square(2)
    text = vtkio.mesh_to_vtk(mesh)
    lines = text.splitlines()
    assert lines[0].startswith("# vtk DataFile")
    assert "DATASET UNSTRUCTURED_GRID" in text
    assert f"POINTS {mesh.n_vertices} double" in text
    assert f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}" in text
    assert text.count("\n5") >= mesh.n_triangles - 1
    path = tmp_path / "mesh.vtk"
    vtkio.write_vtk(path, text)
    assert path.read_text() == text


def test_snapshot_fields():
    mesh = generate_unit_square(2)
    space = build_space(mesh, BoundaryPartition((1, 2, 3, 4), ()))
    f = interpolate(space, lambda x, y, t: (x, -y))
    p = np.arange(mesh.n_vertices, dtype=float)
    text = vtkio.snapshot_to_vtk(space, f.values, p)
    assert "VECTORS velocity double" in text
    assert "SCALARS pressure double 1" in text
    # vertex values of (x, -y) appear verbatim
    x0, y0 = mesh.vertices[-1]
    assert f"{float(x0)!r} {float(-y0)!r} 0.0" in text


def test_snapshot_deterministic():
    mesh = generate_unit_square(3)
    space = build_space(mesh, BoundaryPartition((1, 2, 3, 4), ()))
    f = interpolate(space, lambda x, y, t: (np.sin(x), np.cos(y)))
    assert (vtkio.snapshot_to_vtk(space, f.values)
            == vtkio.snapshot_to_vtk(space, f.values))
