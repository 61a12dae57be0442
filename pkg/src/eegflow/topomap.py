"""Scalp topography: azimuthal equidistant projection and Clough-Tocher frames.

Electrodes are projected to the plane tangent at a centre direction so that
planar distance from the origin equals the great-circle angle to the centre.
Channel values are then interpolated onto a square pixel grid with the C1
piecewise-cubic Clough-Tocher scheme on the Delaunay triangulation of the
projected points.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import ValidationError
from .ingest import Montage

N_FRAMES = 13
GRID = 32
MARGIN = 0.05


@dataclass(frozen=True)
class ProjectedMontage:
    points: np.ndarray  # (n, 2) plane coordinates in radians
    center: np.ndarray  # unit vector of the projection origin
    names: tuple[str, ...] = ()


def _tangent_basis(center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(center[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ center) * center
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(center, e1)


def aep_project(montage: Montage | np.ndarray, center: np.ndarray | None = None) -> ProjectedMontage:
    """Azimuthal equidistant projection about ``center`` (default: the vertex).

    ``(u, v) = rho * (cos az, sin az)`` with ``rho`` the angle between electrode
    and centre and ``az`` the electrode's azimuth in the tangent basis
    ``(e1, center x e1)``. For centre +z the basis is the x and y axes.
    """
    if isinstance(montage, Montage):
        pos, names = np.asarray(montage.positions, dtype=float), montage.names
        if center is None:
            center = montage.vertex()
    else:
        pos, names = np.asarray(montage, dtype=float), ()
    if center is None:
        raise ValidationError("a projection centre is required", "topomap")
    c = np.asarray(center, dtype=float)
    if abs(np.linalg.norm(c) - 1.0) > 1e-6:
        raise ValidationError("projection centre must be a unit vector", "topomap")
    c = c / np.linalg.norm(c)
    e1, e2 = _tangent_basis(c)

    cos_rho = pos @ c
    sin_rho = np.linalg.norm(np.cross(pos, c), axis=1)
    rho = np.arctan2(sin_rho, cos_rho)
    if np.any(np.pi - rho < 1e-9):
        i = int(np.argmax(rho))
        label = names[i] if names else str(i)
        raise ValidationError(f"electrode {label} is antipodal to the centre", "topomap")
    az = np.arctan2(pos @ e2, pos @ e1)
    uv = np.stack([rho * np.cos(az), rho * np.sin(az)], axis=1)
    uv[sin_rho < 1e-15] = 0.0
    return ProjectedMontage(uv, c, tuple(names))


def triangulate(points: ProjectedMontage | np.ndarray) -> Delaunay:
    pts = np.asarray(getattr(points, "points", points), dtype=float)
    if pts.shape[0] < 3:
        raise ValidationError("triangulation needs at least 3 points", "topomap")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-12 * max(1.0, np.abs(centered).max())) < 2:
        raise ValidationError("all points are collinear", "topomap")
    try:
        return Delaunay(pts)
    except QhullError as exc:
        raise ValidationError(f"degenerate triangulation: {exc}", "topomap") from None


def gradient_operator(tri: Delaunay) -> np.ndarray:
    """(n, 2, n) matrix mapping vertex values to estimated vertex gradients.

    Per vertex, a least-squares plane through the incident edges with weights
    1/|edge|^2: minimise sum_j w_j (g . d_j - (f_j - f_i))^2.
    """
    pts = tri.points
    n = len(pts)
    indptr, indices = tri.vertex_neighbor_vertices
    op = np.zeros((n, 2, n))
    for i in range(n):
        nb = indices[indptr[i]:indptr[i + 1]]
        d = pts[nb] - pts[i]
        w = 1.0 / np.einsum("ij,ij->i", d, d)
        normal = (d * w[:, None]).T @ d
        coef = np.linalg.solve(normal, (d * w[:, None]).T)  # (2, k)
        op[i][:, nb] += coef
        op[i][:, i] -= coef.sum(axis=1)
    return op


class CloughTocher:
    """Clough-Tocher interpolant on a fixed triangulation.

    Evaluation is linear in the vertex values, so ``values`` may carry extra
    trailing axes (n, ...) that are interpolated together.
    """

    def __init__(self, points: ProjectedMontage | np.ndarray, tri: Delaunay | None = None):
        self.tri = triangulate(points) if tri is None else tri
        self.grad_op = gradient_operator(self.tri)
        self._neighbor_g = self._cross_edge_directions()

    @property
    def points(self) -> np.ndarray:
        return self.tri.points

    def gradients(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.grad_op, np.asarray(values, dtype=float), axes=([2], [0]))

    def _cross_edge_directions(self) -> np.ndarray:
        # For the edge opposite vertex k, the cross-boundary derivative is taken
        # along the line joining this triangle's centroid to the neighbour's,
        # written as V4 - Va + g (Vb - Va) in local barycentrics. Both triangles
        # agree on that line, which makes the patches C1; hull edges use g=-1/2
        # (the centroid direction).
        tri = self.tri
        simp = tri.simplices
        nt = len(simp)
        g = np.full((nt, 3), -0.5)
        centroids = tri.points[simp].mean(axis=1)
        for k in range(3):
            nb = tri.neighbors[:, k]
            has = nb >= 0
            T = tri.transform[has]
            y = centroids[nb[has]]
            b01 = np.einsum("tij,tj->ti", T[:, :2], y - T[:, 2])
            c = np.column_stack([b01, 1.0 - b01.sum(axis=1)])
            # edge opposite vertex k runs between vertices k+1 and k+2
            a, b = c[:, (k + 1) % 3], c[:, (k + 2) % 3]
            g[has, k] = (2 * b + a - 1) / (2 - 3 * b - 3 * a)
        return g

    def locate(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Simplex index (-1 outside the hull) and barycentric coordinates."""
        xy = np.asarray(xy, dtype=float)
        s = self.tri.find_simplex(xy)
        T = self.tri.transform[np.maximum(s, 0)]
        b01 = np.einsum("mij,mj->mi", T[:, :2], xy - T[:, 2])
        bary = np.column_stack([b01, 1.0 - b01.sum(axis=1)])
        return s, bary

    def __call__(self, xy: np.ndarray, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        s, bary = self.locate(xy)
        extra = values.shape[1:]
        out = np.full((len(xy),) + extra, fill, dtype=float)
        inside = s >= 0
        if inside.any():
            grads = self.gradients(values)
            out[inside] = self._evaluate(s[inside], bary[inside], values, grads)
        return out

    def _evaluate(self, s, bary, values, grads):
        tri = self.tri
        vid = tri.simplices[s]  # (m, 3)
        P = tri.points[vid]  # (m, 3, 2)
        F = values[vid]  # (m, 3, ...)
        D = grads[vid]  # (m, 3, 2, ...)
        extra = (slice(None),) + (None,) * (values.ndim - 1)

        def dd(i, j):
            # directional derivative at vertex i along the edge to vertex j
            e = P[:, j] - P[:, i]
            return e[:, 0][extra] * D[:, i, 0] + e[:, 1][extra] * D[:, i, 1]

        f1, f2, f3 = F[:, 0], F[:, 1], F[:, 2]
        # Bezier ordinates c_ijkl over (V1, V2, V3, centroid)
        c3000, c0300, c0030 = f1, f2, f3
        c2100 = f1 + dd(0, 1) / 3
        c2010 = f1 + dd(0, 2) / 3
        c1200 = f2 + dd(1, 0) / 3
        c0210 = f2 + dd(1, 2) / 3
        c1020 = f3 + dd(2, 0) / 3
        c0120 = f3 + dd(2, 1) / 3

        c2001 = (c2100 + c2010 + c3000) / 3
        c0201 = (c1200 + c0300 + c0210) / 3
        c0021 = (c1020 + c0120 + c0030) / 3

        g = self._neighbor_g[s]
        g0, g1, g2 = (g[:, k][extra] for k in range(3))
        # cross-boundary derivative linear along each edge
        c0111 = (g0 * (-c0300 + 3 * c0210 - 3 * c0120 + c0030)
                 + (-c0300 + 2 * c0210 - c0120 + c0021 + c0201)) / 2
        c1011 = (g1 * (-c0030 + 3 * c1020 - 3 * c2010 + c3000)
                 + (-c0030 + 2 * c1020 - c2010 + c2001 + c0021)) / 2
        c1101 = (g2 * (-c3000 + 3 * c2100 - 3 * c1200 + c0300)
                 + (-c3000 + 2 * c2100 - c1200 + c2001 + c0201)) / 2

        c1002 = (c1101 + c1011 + c2001) / 3
        c0102 = (c1101 + c0111 + c0201) / 3
        c0012 = (c1011 + c0111 + c0021) / 3
        c0003 = (c1002 + c0102 + c0012) / 3

        m = bary.min(axis=1)
        b1, b2, b3 = ((bary[:, k] - m)[extra] for k in range(3))
        b4 = (3 * m)[extra]
        which = bary.argmin(axis=1)

        w23 = (c0003 * b4**3 + 3 * c0012 * b3 * b4**2 + 3 * c0021 * b3**2 * b4 + c0030 * b3**3
               + 3 * c0102 * b2 * b4**2 + 6 * c0111 * b2 * b3 * b4 + 3 * c0120 * b2 * b3**2
               + 3 * c0201 * b2**2 * b4 + 3 * c0210 * b2**2 * b3 + c0300 * b2**3)
        w13 = (c0003 * b4**3 + 3 * c0012 * b3 * b4**2 + 3 * c0021 * b3**2 * b4 + c0030 * b3**3
               + 3 * c1002 * b1 * b4**2 + 6 * c1011 * b1 * b3 * b4 + 3 * c1020 * b1 * b3**2
               + 3 * c2001 * b1**2 * b4 + 3 * c2010 * b1**2 * b3 + c3000 * b1**3)
        w12 = (c0003 * b4**3 + 3 * c0102 * b2 * b4**2 + 3 * c0201 * b2**2 * b4 + c0300 * b2**3
               + 3 * c1002 * b1 * b4**2 + 6 * c1101 * b1 * b2 * b4 + 3 * c1200 * b1 * b2**2
               + 3 * c2001 * b1**2 * b4 + 3 * c2100 * b1**2 * b2 + c3000 * b1**3)
        which = which[extra]
        return np.where(which == 0, w23, np.where(which == 1, w13, w12))


def pixel_grid(points: np.ndarray, size: int = GRID, margin: float = MARGIN) -> np.ndarray:
    """(size, size, 2) pixel-centre coordinates over the bounding square.

    Row 0 is the top of the map (largest v); column 0 the smallest u.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    mid = (lo + hi) / 2
    side = float((hi - lo).max()) * (1 + 2 * margin)
    ticks = (np.arange(size) + 0.5) / size - 0.5
    u = mid[0] + side * ticks
    v = mid[1] - side * ticks
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def ct_interpolate(points: ProjectedMontage | np.ndarray, values: np.ndarray,
                   grid: np.ndarray | None = None, interp: CloughTocher | None = None) -> np.ndarray:
    """Clough-Tocher image of per-electrode ``values``; 0 outside the hull."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValidationError("interpolation values must be finite", "topomap")
    interp = CloughTocher(points) if interp is None else interp
    grid = pixel_grid(interp.points) if grid is None else grid
    flat = interp(grid.reshape(-1, 2), values)
    return flat.reshape(grid.shape[:-1] + values.shape[1:])


class Topography:
    """Per-montage geometry shared by every frame: projection, triangulation, grid.

    Because the interpolant is linear in the electrode values, the whole
    values-to-image map is precomputed as a (size*size, n) matrix.
    """

    def __init__(self, montage: Montage, center: np.ndarray | None = None, size: int = GRID):
        self.projection = aep_project(montage, center)
        self.interp = CloughTocher(self.projection)
        self.size = size
        self.grid = pixel_grid(self.projection.points, size)

    @cached_property
    def operator(self) -> np.ndarray:
        n = len(self.projection.points)
        return self.interp(self.grid.reshape(-1, 2), np.eye(n))

    @cached_property
    def hull_mask(self) -> np.ndarray:
        return (self.interp.tri.find_simplex(self.grid.reshape(-1, 2)) >= 0).reshape(self.size, self.size)

    def image(self, values: np.ndarray) -> np.ndarray:
        """Interpolate values of shape (n, ...) into images (..., size, size)."""
        values = np.asarray(values, dtype=float)
        flat = np.tensordot(self.operator, values, axes=([1], [0]))  # (size*size, ...)
        flat = np.moveaxis(flat, 0, -1)
        return flat.reshape(values.shape[1:] + (self.size, self.size))


def segment_means(x: np.ndarray, n_frames: int = N_FRAMES, power: bool = False) -> np.ndarray:
    """Mean of each of ``n_frames`` contiguous segments along the last axis.

    Segments are equal when the length divides evenly, otherwise they differ
    by at most one sample.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n < n_frames:
        raise ValidationError(f"epoch of {n} samples is shorter than {n_frames} frames", "topomap")
    if power:
        x = x * x
    if n % n_frames == 0:
        return x.reshape(x.shape[:-1] + (n_frames, n // n_frames)).mean(axis=-1)
    edges = np.linspace(0, n, n_frames + 1).round().astype(int)
    return np.add.reduceat(x, edges[:-1], axis=-1) / np.diff(edges)


def render_video(bands: np.ndarray, topo: Topography, n_frames: int = N_FRAMES,
                 power: bool = False) -> np.ndarray:
    """EEG video from rhythm-filtered signals.

    ``bands`` of shape (..., channels, L), typically (5, C, L) or (N, 5, C, L),
    becomes (..., n_frames, size, size): each frame interpolates the
    per-channel mean over one of ``n_frames`` contiguous time segments.
    """
    bands = np.asarray(bands, dtype=float)
    means = segment_means(bands, n_frames, power)  # (..., C, F)
    values = np.moveaxis(means, -2, 0)  # (C, ..., F)
    return topo.image(values)
