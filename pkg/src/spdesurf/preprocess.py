"""From raw scan point clouds to gridded surface residuals on a panel."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .infer import PanelDataset
from .mesh import grid_panel_mesh

log = logging.getLogger(__name__)

MAX_EMPTY_FRACTION = 0.10


class AmbiguousNormalError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


class SparseScanError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    sides: np.ndarray | None = None  # "upper" / "lower" per point

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        if self.sides is not None:
            self.sides = np.asarray(self.sides, dtype=str)
            if self.sides.shape != (len(self.points),):
                raise ValueError("one side label per point is required")
            bad = set(np.unique(self.sides)) - {"upper", "lower"}
            if bad:
                raise ValueError(f"unknown side labels {sorted(bad)}")


def pca_normal(points, weak_gap: float = 0.5) -> np.ndarray:
    """Unit direction of least variation, oriented into the +z hemisphere.

    Raises AmbiguousNormalError when the smallest direction is not determined
    (collinear points, or a tie between the two smallest eigenvalues).  A weak
    separation (smallest / middle eigenvalue above ``weak_gap``) only warns.
    """
    if isinstance(points, PointCloud):
        points = points.points
    p = np.asarray(points, dtype=float)
    if len(p) < 3:
        raise AmbiguousNormalError("need at least 3 points")
    x = p - p.mean(axis=0)
    ev, vec = np.linalg.eigh(x.T @ x / len(p))
    scale = ev[2]
    if not scale > 0 or ev[1] <= 1e-12 * scale:
        raise AmbiguousNormalError("points are coincident or collinear")
    if ev[1] - ev[0] <= 1e-12 * scale:
        raise AmbiguousNormalError("no unique direction of least variation")
    if ev[0] > weak_gap * ev[1]:
        log.warning("normal is weakly determined (eigenvalue ratio %.3f)", ev[0] / ev[1])
    n = vec[:, 0]
    nz = np.flatnonzero(np.abs(n) > 1e-15)
    # +z hemisphere; ties on the equator broken by the last nonzero component
    pivot = 2 if abs(n[2]) > 1e-15 else nz[-1]
    if n[pivot] < 0:
        n = -n
    return n / np.linalg.norm(n)


def rotation_to(a, b) -> np.ndarray:
    """Smallest rotation matrix taking unit vector a onto unit vector b."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if c < -1 + 1e-12:
        # antiparallel: half turn about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-8:
            axis = np.cross(a, [0.0, 0.0, 1.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def quadratic_basis(s, t) -> np.ndarray:
    s = np.asarray(s, float).ravel()
    t = np.asarray(t, float).ravel()
    return np.stack([np.ones_like(s), s, t, s * s, s * t, t * t], axis=1)


def detrend_quadratic(heights, s, t, return_coeffs: bool = False):
    """Least-squares residual of h ~ a + b s + c t + d s^2 + e s t + f t^2.

    ``heights``, ``s`` and ``t`` share a shape; residuals come back in it.
    """
    h = np.asarray(heights, dtype=float)
    s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
    if s.shape != h.shape:
        raise ValueError("coordinates and heights must have the same shape")
    if h.size < 6:
        raise DegenerateFitError("quadratic trend needs at least 6 points")
    B = quadratic_basis(s, t)
    coef, _, rank, _ = np.linalg.lstsq(B, h.ravel(), rcond=None)
    if rank < 6:
        raise DegenerateFitError(f"quadratic design has rank {rank} < 6")
    resid = (h.ravel() - B @ coef).reshape(h.shape)
    return (resid, coef) if return_coeffs else resid


def _lowpass_mask(shape, cutoff_fraction):
    f0 = np.abs(np.fft.fftfreq(shape[0]))[:, None]
    f1 = np.abs(np.fft.fftfreq(shape[1]))[None, :]
    # per-axis frequency index relative to Nyquist (0.5 cycles per sample)
    radial = np.maximum(f0, f1) / 0.5
    return radial <= cutoff_fraction + 1e-12


def fft_filter(heights, cutoff_fraction: float = 0.5) -> np.ndarray:
    """Zero 2-D Fourier modes whose frequency index exceeds cutoff_fraction * Nyquist."""
    if not 0 < cutoff_fraction <= 1:
        raise ValueError(f"cutoff_fraction must lie in (0, 1], got {cutoff_fraction}")
    h = np.asarray(heights, dtype=float)
    if h.ndim != 2:
        raise ValueError("fft_filter expects a 2-D grid")
    F = np.fft.fft2(h)
    F[~_lowpass_mask(h.shape, cutoff_fraction)] = 0.0
    out = np.fft.ifft2(F)
    return out.real.copy()


@dataclass
class GriddedHeights:
    values: np.ndarray  # (ny, nx), row j along t
    s: np.ndarray  # cell centres along s (nx,)
    t: np.ndarray  # cell centres along t (ny,)
    n_filled: int = 0


def _resolution(resolution):
    r = np.broadcast_to(np.asarray(resolution, dtype=int), (2,))
    if np.any(r < 2):
        raise ValueError("resolution must be at least 2 cells per axis")
    return int(r[0]), int(r[1])


def grid_project(s, t, heights, resolution, window=None) -> GriddedHeights:
    """Average heights into a regular grid of cells spanning ``window``.

    ``resolution`` is a cell count (or (nx, ny)); ``window`` is
    (s_min, s_max, t_min, t_max) and defaults to the bounding box.  Points
    outside the window are dropped.  Empty cells take the value of the
    nearest occupied cell.
    """
    s = np.asarray(s, float).ravel()
    t = np.asarray(t, float).ravel()
    h = np.asarray(heights, float).ravel()
    nx, ny = _resolution(resolution)
    if window is None:
        window = (s.min(), s.max(), t.min(), t.max())
    s0, s1, t0, t1 = map(float, window)
    if not (s1 > s0 and t1 > t0):
        raise SparseScanError("point cloud does not span a rectangle")
    inside = (s >= s0) & (s <= s1) & (t >= t0) & (t <= t1)
    s, t, h = s[inside], t[inside], h[inside]
    ds, dt = (s1 - s0) / nx, (t1 - t0) / ny
    i = np.clip(np.floor((s - s0) / ds).astype(np.int64), 0, nx - 1)
    j = np.clip(np.floor((t - t0) / dt).astype(np.int64), 0, ny - 1)
    flat = j * nx + i
    sums = np.bincount(flat, weights=h, minlength=nx * ny)
    counts = np.bincount(flat, minlength=nx * ny)
    empty = counts == 0
    if empty.mean() > MAX_EMPTY_FRACTION:
        raise SparseScanError(f"{empty.sum()} of {nx * ny} cells are empty")
    values = np.where(empty, 0.0, sums / np.maximum(counts, 1)).reshape(ny, nx)
    if empty.any():
        _, (jj, ii) = ndimage.distance_transform_edt(empty.reshape(ny, nx), return_indices=True)
        values = values[jj, ii]
        log.info("filled %d empty cells from nearest neighbours", int(empty.sum()))
    sc = s0 + (np.arange(nx) + 0.5) * ds
    tc = t0 + (np.arange(ny) + 0.5) * dt
    return GriddedHeights(values, sc, tc, int(empty.sum()))


def detrend_and_filter(values, s, t, cutoff_fraction: float = 0.5) -> np.ndarray:
    """Low-pass residual that is also orthogonal to every quadratic.

    The quadratic trend is fitted to the filtered data using filtered basis
    functions, so the result is the orthogonal projection onto the
    low-frequency functions with no quadratic component.  This makes the
    operation exactly idempotent.
    """
    values = np.asarray(values, float)
    S, T = np.meshgrid(s, t)
    B = quadratic_basis(S, T)
    Bf = np.stack([fft_filter(b.reshape(values.shape), cutoff_fraction).ravel() for b in B.T], axis=1)
    xf = fft_filter(values, cutoff_fraction).ravel()
    coef, *_ = np.linalg.lstsq(Bf, xf, rcond=None)
    return (xf - Bf @ coef).reshape(values.shape)


@dataclass
class PanelGrid:
    """Residual heights of both surfaces on a common grid of cell centres."""

    u1: np.ndarray
    u2: np.ndarray
    s: np.ndarray
    t: np.ndarray
    settings: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.u1.shape

    def mesh(self):
        ny, nx = self.shape
        ds = (self.s[-1] - self.s[0]) / (nx - 1)
        dt = (self.t[-1] - self.t[0]) / (ny - 1)
        return grid_panel_mesh(nx, ny, (ds, dt), origin=(self.s[0], self.t[0]))

    def to_dataset(self, panel_id: int = 0) -> PanelDataset:
        return PanelDataset(self.mesh(), np.concatenate([self.u1.ravel(), self.u2.ravel()]), panel_id)


def split_sides(cloud: PointCloud, heights):
    """Masks (upper, lower); unlabeled clouds split on the sign of the height."""
    if cloud.sides is not None:
        return cloud.sides == "upper", cloud.sides == "lower"
    return heights >= 0, heights < 0


def preprocess_cloud(
    cloud: PointCloud,
    resolution=300,
    cutoff_fraction: float = 0.5,
    window=None,
    rotation_deg: float = 0.0,
) -> PanelGrid:
    """Normal estimation, gridding, detrending and splatter removal for one panel.

    The cloud is rotated so its normal is the y axis; in-plane coordinates are
    then (s, t) = (x, z), optionally after a rotation of ``rotation_deg`` about
    the normal.  ``u1`` is the upper-surface residual and ``u2`` the negated
    lower-surface residual, so both are positive where the wall thickens.
    """
    n = pca_normal(cloud.points)
    R = rotation_to(n, [0.0, 1.0, 0.0])
    if rotation_deg:
        a = np.deg2rad(rotation_deg)
        Ry = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
        R = Ry @ R
    p = (cloud.points - cloud.points.mean(axis=0)) @ R.T
    s, h, t = p[:, 0], p[:, 1], p[:, 2]
    upper, lower = split_sides(cloud, h)
    if not upper.any() or not lower.any():
        raise ValueError("both surfaces must be present in the point cloud")
    if window is None:
        window = (s.min(), s.max(), t.min(), t.max())
    surfaces = []
    for mask, sign in ((upper, 1.0), (lower, -1.0)):
        g = grid_project(s[mask], t[mask], sign * h[mask], resolution, window)
        surfaces.append(detrend_and_filter(g.values, g.s, g.t, cutoff_fraction))
    settings = {
        "resolution": list(_resolution(resolution)),
        "cutoff_fraction": cutoff_fraction,
        "window": [float(w) for w in window],
        "rotation_deg": rotation_deg,
        "normal": n.tolist(),
    }
    return PanelGrid(surfaces[0], surfaces[1], g.s, g.t, settings)
