"""Legacy ASCII VTK output of meshes and solution snapshots.

One snapshot per file: the triangulation as an unstructured grid, the
velocity as point vectors on the vertices (P2 fields are sampled at the
vertices), and the pressure as point scalars.
"""

from __future__ import annotations

import numpy as np

from .fespace import TaylorHoodSpace
from .mesh import Mesh


def mesh_to_vtk(mesh: Mesh, point_data: dict | None = None) -> str:
    """Serialize a mesh (plus optional per-vertex fields) to legacy VTK.

    point_data maps names to (nv,) scalar arrays or (nv, 2) vector
    arrays; vectors are padded with a zero z component.
    """
    nv = mesh.n_vertices
    nt = mesh.n_triangles
    lines = ["# vtk DataFile Version 3.0", "snapshot", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r} 0.0")
    lines.append(f"CELLS {nt} {4 * nt}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)
    if point_data:
        lines.append(f"POINT_DATA {nv}")
        for name, arr in point_data.items():
            arr = np.asarray(arr)
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{float(v)!r}" for v in arr)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{float(vx)!r} {float(vy)!r} 0.0"
                             for vx, vy in arr)
    return "\n".join(lines) + "\n"


def snapshot_to_vtk(space: TaylorHoodSpace, velocity: np.ndarray,
                    pressure: np.ndarray | None = None) -> str:
    """Serialize one velocity (and optional pressure) field to legacy VTK."""
    nv = space.mesh.n_vertices
    vx = velocity[:nv]
    vy = velocity[space.n_p2:space.n_p2 + nv]
    data = {"velocity": np.column_stack([vx, vy])}
    if pressure is not None:
        data["pressure"] = np.asarray(pressure)
    return mesh_to_vtk(space.mesh, data)


def write_vtk(path, text: str):
    with open(path, "w") as fh:
        fh.write(text)
