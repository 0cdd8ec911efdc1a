"""Triangulated 2-manifolds embedded in R^3.

Panels live in the x-z plane with z as the printing direction; cylinders
have their axis along z.  Both are built on a structured (i, j) lattice
split along the lower-left to upper-right diagonal.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Invalid mesh construction arguments or degenerate geometry."""


class MeshParseError(MeshError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertices (mm), 0-based triangles and topology metadata.

    ``periodic_pairs`` lists the vertex pairs joined across the angular seam
    of a closed mesh.  Seam vertices are never duplicated, so the pairs are
    informational only.  ``window`` optionally marks the vertices of an
    unpadded central region.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertices: np.ndarray = None
    periodic_pairs: np.ndarray = None
    window: np.ndarray = None
    grid_shape: tuple | None = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must have shape (n, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (m, 3)")
        object.__setattr__(self, "vertices", _frozen(v, float))
        object.__setattr__(self, "triangles", _frozen(t, np.int64))
        if self.boundary_vertices is None:
            bnd = boundary_from_triangles(t) if len(t) else np.zeros(0, np.int64)
        else:
            bnd = np.unique(np.asarray(self.boundary_vertices, dtype=np.int64))
        object.__setattr__(self, "boundary_vertices", _frozen(bnd, np.int64))
        pp = np.zeros((0, 2)) if self.periodic_pairs is None else self.periodic_pairs
        object.__setattr__(self, "periodic_pairs", _frozen(np.reshape(pp, (-1, 2)), np.int64))
        if self.window is not None:
            object.__setattr__(self, "window", _frozen(np.unique(self.window), np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted pairs."""
        return np.unique(_directed_edges(self.triangles), axis=0)

    def central_vertices(self) -> np.ndarray:
        if self.window is None:
            return np.arange(self.n_vertices)
        return self.window

    def same_as(self, other: "TriangleMesh", atol: float = 0.0) -> bool:
        return (
            self.vertices.shape == other.vertices.shape
            and np.allclose(self.vertices, other.vertices, rtol=0, atol=atol)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_vertices, other.boundary_vertices)
            and np.array_equal(self.periodic_pairs, other.periodic_pairs)
        )


def _directed_edges(triangles):
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    return np.sort(e, axis=1)


def boundary_from_triangles(triangles) -> np.ndarray:
    """Vertices incident to an edge that belongs to exactly one triangle."""
    e = _directed_edges(triangles)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def grid_panel_mesh(nx: int, ny: int, spacing, origin=(0.0, 0.0)) -> TriangleMesh:
    """Planar nx-by-ny lattice in the x-z plane.

    Vertex ``(i, j)`` sits at ``x = i * sx``, ``z = j * sz`` and has index
    ``j * nx + i``.  ``spacing`` is a scalar or an ``(sx, sz)`` pair.
    """
    if nx < 2 or ny < 2:
        raise MeshError(f"grid needs at least 2x2 vertices, got {nx}x{ny}")
    sx, sz = np.broadcast_to(np.asarray(spacing, dtype=float), (2,))
    if not (sx > 0 and sz > 0):
        raise MeshError(f"spacing must be positive, got {spacing}")
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    verts = np.zeros((nx * ny, 3))
    verts[:, 0] = origin[0] + i.ravel() * sx
    verts[:, 2] = origin[1] + j.ravel() * sz
    tris = _lattice_triangles(nx, ny, periodic=False)
    return TriangleMesh(verts, tris, grid_shape=(ny, nx))


def _lattice_triangles(nu: int, nv: int, periodic: bool) -> np.ndarray:
    ncol = nu if periodic else nu - 1
    a, b = np.meshgrid(np.arange(ncol), np.arange(nv - 1))
    a, b = a.ravel(), b.ravel()
    a1 = (a + 1) % nu
    v00 = b * nu + a
    v10 = b * nu + a1
    v01 = (b + 1) * nu + a
    v11 = (b + 1) * nu + a1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    return np.stack([lower, upper], axis=1).reshape(-1, 3)


def cylinder_mesh(
    radius: float,
    length: float,
    n_theta: int,
    n_z: int,
    pad_fraction: float = 0.25,
) -> tuple[TriangleMesh, np.ndarray]:
    """Closed cylindrical band around the z axis, padded at both ends.

    ``n_z`` rings cover the central window ``0 <= z <= length``; each end adds
    ``pad_fraction * length`` of extra band using ``ceil(pad_fraction*(n_z-1))``
    rings.  Returns the mesh and the sorted indices of central-window vertices.
    """
    if n_theta < 3:
        raise MeshError(f"n_theta must be >= 3, got {n_theta}")
    if n_z < 2:
        raise MeshError(f"n_z must be >= 2, got {n_z}")
    if not (radius > 0 and length > 0):
        raise MeshError("radius and length must be positive")
    if pad_fraction < 0:
        raise MeshError("pad_fraction must be >= 0")

    z_mid = np.linspace(0.0, length, n_z)
    n_pad = int(np.ceil(pad_fraction * (n_z - 1) - 1e-12)) if pad_fraction > 0 else 0
    if n_pad:
        pad = pad_fraction * length
        below = np.linspace(-pad, 0.0, n_pad + 1)[:-1]
        above = np.linspace(length, length + pad, n_pad + 1)[1:]
        z = np.concatenate([below, z_mid, above])
    else:
        z = z_mid
    phi = 2.0 * np.pi * np.arange(n_theta) / n_theta
    zz, pp = np.meshgrid(z, phi, indexing="ij")
    verts = np.stack(
        [radius * np.cos(pp.ravel()), radius * np.sin(pp.ravel()), zz.ravel()], axis=1
    )
    tris = _lattice_triangles(n_theta, len(z), periodic=True)
    rings = np.arange(len(z))
    pairs = np.stack([rings * n_theta + n_theta - 1, rings * n_theta], axis=1)
    central = np.arange(n_pad * n_theta, (n_pad + n_z) * n_theta)
    mesh = TriangleMesh(verts, tris, periodic_pairs=pairs, window=central)
    return mesh, mesh.window


def validate(mesh: TriangleMesh) -> list[str]:
    """Return a list of invariant violations; empty iff the mesh is valid."""
    report = []
    n = mesh.n_vertices
    t = mesh.triangles
    if len(t) == 0:
        return report
    bad_idx = np.flatnonzero((t < 0).any(axis=1) | (t >= n).any(axis=1))
    for k in bad_idx:
        report.append(f"triangle {k}: vertex index out of range {t[k].tolist()}")
    ok = np.setdiff1d(np.arange(len(t)), bad_idx)
    tt = t[ok]
    rep = (tt[:, 0] == tt[:, 1]) | (tt[:, 1] == tt[:, 2]) | (tt[:, 0] == tt[:, 2])
    for k in ok[rep]:
        report.append(f"triangle {k}: degenerate triangle (repeated vertex) {t[k].tolist()}")
    good = ok[~rep]
    if len(good):
        p = mesh.vertices[t[good]]
        area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        scale = max(np.ptp(mesh.vertices, axis=0).max(), 1.0) ** 2
        for k in good[area <= 1e-14 * scale]:
            report.append(f"triangle {k}: degenerate triangle (zero area)")
        counts = Counter(map(tuple, _directed_edges(t[good])))
        for edge, c in sorted(counts.items()):
            if c > 2:
                report.append(f"edge {edge}: non-manifold edge shared by {c} triangles")
        expected = boundary_from_triangles(t[good])
        if not np.array_equal(expected, mesh.boundary_vertices):
            report.append("boundary set does not match single-triangle edges")
    return report


def save_mesh(mesh: TriangleMesh, path) -> None:
    lines = [f"spde-mesh v1 {mesh.n_vertices} {mesh.n_triangles}"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append("boundary: " + " ".join(map(str, mesh.boundary_vertices.tolist())))
    if len(mesh.periodic_pairs):
        lines.append("periodic: " + " ".join(map(str, mesh.periodic_pairs.ravel().tolist())))
    if mesh.window is not None:
        lines.append("window: " + " ".join(map(str, mesh.window.tolist())))
    if mesh.grid_shape is not None:
        lines.append("grid: {} {}".format(*mesh.grid_shape))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> TriangleMesh:
    raw = Path(path).read_text().splitlines()
    if not raw:
        raise MeshParseError(path, 1, "empty file")
    head = raw[0].split()
    if len(head) != 4 or head[:2] != ["spde-mesh", "v1"]:
        raise MeshParseError(path, 1, "expected header 'spde-mesh v1 <nv> <nt>'")
    try:
        nv, nt = int(head[2]), int(head[3])
    except ValueError:
        raise MeshParseError(path, 1, "vertex/triangle counts must be integers") from None
    if len(raw) < 1 + nv + nt:
        raise MeshParseError(path, len(raw), f"expected {nv} vertices and {nt} triangles")

    verts = np.empty((nv, 3))
    for k in range(nv):
        parts = raw[1 + k].split()
        try:
            if len(parts) != 3:
                raise ValueError
            verts[k] = [float(s) for s in parts]
        except ValueError:
            raise MeshParseError(path, 2 + k, "expected 'x y z'") from None
    tris = np.empty((nt, 3), dtype=np.int64)
    for k in range(nt):
        lineno = 2 + nv + k
        parts = raw[lineno - 1].split()
        try:
            if len(parts) != 3:
                raise ValueError
            tri = [int(s) for s in parts]
        except ValueError:
            raise MeshParseError(path, lineno, "expected 'i j k'") from None
        if min(tri) < 0 or max(tri) >= nv:
            raise MeshParseError(path, lineno, f"triangle index out of range {tri}")
        tris[k] = tri

    extras = {}
    for off, line in enumerate(raw[1 + nv + nt:]):
        lineno = 2 + nv + nt + off
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep or key.strip() not in ("boundary", "periodic", "window", "grid"):
            raise MeshParseError(path, lineno, f"unexpected line {line!r}")
        try:
            vals = [int(s) for s in rest.split()]
        except ValueError:
            raise MeshParseError(path, lineno, "expected integer list") from None
        if key.strip() != "grid" and any(v < 0 or v >= nv for v in vals):
            raise MeshParseError(path, lineno, "vertex index out of range")
        extras[key.strip()] = vals

    grid = tuple(extras["grid"]) if "grid" in extras else None
    return TriangleMesh(
        verts,
        tris,
        boundary_vertices=extras.get("boundary"),
        periodic_pairs=extras.get("periodic"),
        window=extras.get("window"),
        grid_shape=grid,
    )
