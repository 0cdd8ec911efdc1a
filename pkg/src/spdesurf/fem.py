"""Piecewise-linear finite element matrices on embedded triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import TriangleMesh

_MASS_PATTERN = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class DegenerateElementError(ValueError):
    def __init__(self, index, area):
        super().__init__(f"triangle {index} is degenerate (area {area:.3e})")
        self.index = index


@dataclass(frozen=True)
class DiffusionTensor:
    """Orthotropic tensor diag(h1, h1, h2); h2 weights the printing (z) axis."""

    h1: float = 1.0
    h2: float = 1.0

    def __post_init__(self):
        if not (self.h1 > 0 and self.h2 > 0):
            raise ValueError(f"diffusion weights must be positive, got {self.h1}, {self.h2}")

    @property
    def matrix(self) -> np.ndarray:
        return np.diag([self.h1, self.h1, self.h2])

    @property
    def adjugate_diagonal(self) -> np.ndarray:
        # adj(H) = det(H) H^-1 for H = diag(h1, h1, h2)
        return np.array([self.h1 * self.h2, self.h1 * self.h2, self.h1 * self.h1])


def _adjugate(H) -> np.ndarray:
    if H is None:
        return np.eye(3)
    if isinstance(H, DiffusionTensor):
        return np.diag(H.adjugate_diagonal)
    H = np.asarray(H, dtype=float)
    # cofactor transpose; valid for singular H too
    return np.array(
        [
            [
                (-1) ** (i + j)
                * np.linalg.det(np.delete(np.delete(H, j, axis=0), i, axis=1))
                for j in range(3)
            ]
            for i in range(3)
        ]
    )


def _edge_matrices(points):
    """Edge matrices E (..., 3 coords, 3 edges) and areas for stacked triangles."""
    vi, vj, vk = points[..., 0, :], points[..., 1, :], points[..., 2, :]
    ei, ej, ek = vk - vj, vi - vk, vj - vi
    area = 0.5 * np.linalg.norm(np.cross(ei, ej), axis=-1)
    return np.stack([ei, ej, ek], axis=-1), area


def local_matrices(triangle, H=None):
    """Per-triangle (mass, lumped, stiffness, anisotropic stiffness) blocks.

    ``triangle`` is a (3, 3) array of vertex coordinates.  ``H`` may be a
    :class:`DiffusionTensor`, any 3x3 matrix, or ``None`` for the identity.
    """
    pts = np.asarray(triangle, dtype=float)
    E, area = _edge_matrices(pts)
    if not area > 0:
        raise DegenerateElementError(0, area)
    mass = area * _MASS_PATTERN
    lumped = np.full(3, area / 3.0)
    stiff = E.T @ E / (4.0 * area)
    aniso = E.T @ _adjugate(H) @ E / (4.0 * area)
    return mass, lumped, stiff, aniso


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Assembled global matrices for one mesh.

    ``G_parts[c]`` is the stiffness contribution of coordinate axis ``c``, so
    that any diagonal adjugate weighting gives the anisotropic stiffness as a
    linear combination.
    """

    C: sp.csc_matrix
    lumped: np.ndarray
    G_parts: tuple
    H: DiffusionTensor

    @property
    def n(self) -> int:
        return len(self.lumped)

    @property
    def C_lumped(self) -> sp.csc_matrix:
        return sp.diags(self.lumped, format="csc")

    @property
    def G(self) -> sp.csc_matrix:
        return self.weighted_stiffness((1.0, 1.0, 1.0))

    @property
    def G_aniso(self) -> sp.csc_matrix:
        return self.weighted_stiffness(self.H.adjugate_diagonal)

    def weighted_stiffness(self, w) -> sp.csc_matrix:
        gx, gy, gz = self.G_parts
        return (w[0] * gx + w[1] * gy + w[2] * gz).tocsc()

    def aniso(self, h1: float, h2: float) -> sp.csc_matrix:
        return self.weighted_stiffness((h1 * h2, h1 * h2, h1 * h1))

    def aniso_derivatives(self, h1: float, h2: float):
        """Derivatives of the anisotropic stiffness with respect to h1 and h2."""
        return (
            self.weighted_stiffness((h2, h2, 2.0 * h1)),
            self.weighted_stiffness((h1, h1, 0.0)),
        )


def _canonical_order(triangles):
    key = np.sort(triangles, axis=1)
    return np.lexsort(key.T[::-1])


def assemble(mesh: TriangleMesh, H: DiffusionTensor | None = None) -> FemMatrices:
    """Sum per-triangle contributions into sparse global matrices.

    Triangles are processed in a canonical order so the result does not depend
    on how the triangle list is permuted.
    """
    H = DiffusionTensor() if H is None else H
    n = mesh.n_vertices
    tris = mesh.triangles[_canonical_order(mesh.triangles)]
    E, area = _edge_matrices(mesh.vertices[tris])
    bad = np.flatnonzero(~(area > 0))
    if len(bad):
        orig = _canonical_order(mesh.triangles)[bad[0]]
        raise DegenerateElementError(int(orig), area[bad[0]])

    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()

    def scatter(local):
        return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()

    C = scatter(area[:, None, None] * _MASS_PATTERN)
    lumped = np.zeros(n)
    np.add.at(lumped, tris.ravel(), np.repeat(area / 3.0, 3))
    parts = tuple(
        scatter(E[:, c, :, None] * E[:, c, None, :] / (4.0 * area[:, None, None]))
        for c in range(3)
    )
    return FemMatrices(C=C, lumped=lumped, G_parts=parts, H=H)
