"""Tetrahedral meshes: minimal ASCII file format, box mesher, surface extraction.

File format (whitespace separated, ``#`` comments allowed)::

    nodes <N>
    x y z          # N lines, meters
    tets <M>
    a b c d        # M lines, zero-based node indices, positive volume

"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTetError, ParseError


@dataclass
class TetMesh:
    nodes: np.ndarray  # (n, 3) float64, meters
    tets: np.ndarray  # (m, 4) int64

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, 3)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.nodes)):
            raise ParseError("tet indices out of range")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)


def tet_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes, positive for correctly oriented tets."""
    a, b, c, d = (nodes[tets[:, i]] for i in range(4))
    return np.einsum("ij,ij->i", np.cross(b - a, c - a), d - a) / 6.0


def check_positive_volumes(mesh: TetMesh, where: str = "mesh") -> np.ndarray:
    vols = tet_volumes(mesh.nodes, mesh.tets)
    if vols.size and vols.min() <= 0.0:
        bad = int(np.argmin(vols))
        raise DegenerateTetError(
            f"{where}: tet {bad} has non-positive volume {vols[bad]:.3e}"
        )
    return vols


# Kuhn subdivision of a hexahedral cell into 6 tets sharing the main
# diagonal; corner order (x + 2 y + 4 z bit pattern), all volumes positive.
_KUHN_TETS = (
    (0, 1, 3, 7),
    (0, 3, 2, 7),
    (0, 2, 6, 7),
    (0, 6, 4, 7),
    (0, 4, 5, 7),
    (0, 5, 1, 7),
)


def box_mesh(size, divisions, center=(0.0, 0.0, 0.0)) -> TetMesh:
    """Structured tet mesh of an axis-aligned box.

    ``divisions`` counts cells per axis; the mesh has ``(nx+1)(ny+1)(nz+1)``
    nodes. Node ordering is x-fastest, deterministic.
    """
    size = np.asarray(size, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    nx, ny, nz = (int(d) for d in divisions)
    if min(nx, ny, nz) < 1 or np.any(size <= 0):
        raise ParseError(f"invalid box mesh: size={size.tolist()}, divisions={divisions}")
    xs = np.linspace(-0.5, 0.5, nx + 1) * size[0] + center[0]
    ys = np.linspace(-0.5, 0.5, ny + 1) * size[1] + center[1]
    zs = np.linspace(-0.5, 0.5, nz + 1) * size[2] + center[2]
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    tets = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                corner = [
                    nid(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1))
                    for b in range(8)
                ]
                for t in _KUHN_TETS:
                    tets.append([corner[t[0]], corner[t[1]], corner[t[2]], corner[t[3]]])
    mesh = TetMesh(nodes, np.array(tets, dtype=np.int64))
    check_positive_volumes(mesh, "box_mesh")
    return mesh


# Faces of tet (a, b, c, d) wound so their normals point outward when the
# tet has positive volume.
_TET_FACES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))


def surface_triangles(mesh: TetMesh) -> np.ndarray:
    """Oriented boundary triangles (outward normals), sorted deterministically."""
    faces = {}
    for tet in mesh.tets:
        for fa, fb, fc in _TET_FACES:
            tri = (int(tet[fa]), int(tet[fb]), int(tet[fc]))
            key = tuple(sorted(tri))
            if key in faces:
                faces[key] = None  # interior face, seen twice
            else:
                faces[key] = tri
    boundary = [tri for tri in faces.values() if tri is not None]
    boundary.sort()
    return np.array(boundary, dtype=np.int64).reshape(-1, 3)


def surface_vertices(triangles: np.ndarray) -> np.ndarray:
    return np.unique(triangles.ravel())


def save_mesh(mesh: TetMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"nodes {mesh.n_nodes}\n")
        for x, y, z in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        fh.write(f"tets {mesh.n_tets}\n")
        for a, b, c, d in mesh.tets:
            fh.write(f"{a} {b} {c} {d}\n")


def load_mesh(path) -> TetMesh:
    nodes = []
    tets = []
    expect = None  # ("nodes"|"tets", remaining)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] in ("nodes", "tets"):
                    expect = (parts[0], int(parts[1]))
                elif expect is None:
                    raise ValueError("data before section header")
                elif expect[0] == "nodes":
                    nodes.append([float(v) for v in parts[:3]])
                    if len(parts) != 3:
                        raise ValueError("node line needs 3 coordinates")
                else:
                    tets.append([int(v) for v in parts[:4]])
                    if len(parts) != 4:
                        raise ValueError("tet line needs 4 indices")
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    mesh = TetMesh(
        np.array(nodes, dtype=np.float64).reshape(-1, 3),
        np.array(tets, dtype=np.int64).reshape(-1, 4),
    )
    return mesh
