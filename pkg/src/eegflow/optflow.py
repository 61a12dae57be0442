"""Dense two-frame optical flow by polynomial expansion, plus its encodings.

Images use (row, column) indexing; a flow vector (dx, dy) is the displacement
along columns and rows respectively, so ``f2 = np.roll(f1, 1, axis=1)`` has
flow (1, 0). Every function accepts a single frame (H, W) or any stack
(..., H, W) and works on the stack at once.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class FlowParams:
    sigma: float = 1.1  # applicability (Gaussian) width of the expansion
    radius: int = 3  # expansion neighbourhood half-width
    smooth_radius: int = 5  # displacement averaging half-width; also the magnitude clamp
    iterations: int = 3
    eps: float = 1e-6  # Tikhonov weight relative to the image's mean structure tensor

    def __post_init__(self):
        if self.radius < 1 or self.smooth_radius < 1 or self.iterations < 1 or self.sigma <= 0:
            raise ValidationError(f"invalid flow parameters {self}", "optflow")


class PolyExpansion(NamedTuple):
    A: np.ndarray  # (..., H, W, 2, 2) symmetric
    b: np.ndarray  # (..., H, W, 2)
    c: np.ndarray  # (..., H, W)


@lru_cache(maxsize=8)
def _moment_setup(sigma: float, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """1-D kernels g(t) t^p (p = 0, 1, 2) and the inverse 6x6 Gram matrix.

    Basis order is [1, x, y, x^2, y^2, xy]; the Gaussian weights separate, so
    every weighted moment of the window is a pair of 1-D correlations.
    """
    t = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-t**2 / (2 * sigma**2))
    g /= g.sum()
    kernels = np.stack([g, g * t, g * t * t])
    y, x = np.meshgrid(t, t, indexing="ij")
    w = np.outer(g, g).reshape(-1)
    B = np.stack([np.ones_like(x), x, y, x * x, y * y, x * y], axis=-1).reshape(-1, 6)
    G = B.T @ (w[:, None] * B)
    return kernels, np.linalg.inv(G)


@lru_cache(maxsize=32)
def _axis_operator(kernel: tuple[float, ...], n: int, mode: str) -> np.ndarray:
    """n x n matrix equal to 1-D correlation with ``kernel`` under boundary ``mode``.

    Images here are tiny, so filtering as a matrix product is cheaper than a
    sliding correlation: rows are filtered by ``K @ x``, columns by ``x @ K.T``.
    """
    return ndimage.correlate1d(np.eye(n), np.asarray(kernel), axis=0, mode=mode)


def _moments(frames: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """(..., H, W, 6) weighted moments sum w(p) phi_k(p) f(pixel + p)."""
    kernels, _ = _moment_setup(sigma, radius)
    h, w = frames.shape[-2:]
    # 'mirror' reflects about the edge sample, like np.pad(mode="reflect")
    kx = [_axis_operator(tuple(kernels[p]), w, "mirror") for p in range(3)]
    ky = [_axis_operator(tuple(kernels[p]), h, "mirror") for p in range(3)]
    cols = [frames @ kx[p].T for p in range(3)]

    def both(px, py):
        return ky[py] @ cols[px]

    return np.stack([both(0, 0), both(1, 0), both(0, 1), both(2, 0), both(0, 2), both(1, 1)], axis=-1)


def poly_expansion(frame: np.ndarray, sigma: float = 1.1, radius: int = 3) -> PolyExpansion:
    """Per-pixel weighted least-squares fit f(p) ~ p^T A p + b^T p + c.

    ``p`` is the (x, y) = (column, row) offset from the pixel; the weights are
    a normalised Gaussian over the (2r+1)^2 window; borders are reflected.
    """
    frame = np.asarray(frame, dtype=float)
    if radius < 1:
        raise ValidationError("expansion radius must be >= 1", "optflow")
    if min(frame.shape[-2:]) <= radius:
        raise ValidationError("frame smaller than the expansion window", "optflow")
    r = _moments(frame, float(sigma), int(radius)) @ _moment_setup(float(sigma), int(radius))[1].T
    A = np.empty(frame.shape + (2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = r[..., 5] / 2
    return PolyExpansion(A, r[..., 1:3].copy(), r[..., 0].copy())


def _warp(arr: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Bilinear sample of channel-first ``arr`` (k, M, H, W) at p + d, clamped at borders."""
    k, m, h, w = arr.shape
    rows = np.clip(np.arange(h)[:, None] + dy, 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] + dx, 0, w - 1)
    r0 = np.minimum(rows.astype(np.intp), h - 2)
    c0 = np.minimum(cols.astype(np.intp), w - 2)
    fr = rows - r0
    fc = cols - c0
    base = ((np.arange(m)[:, None, None] * h + r0) * w + c0).ravel()
    fr = fr.ravel()
    fc = fc.ravel()
    w00, w01, w10, w11 = (1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc
    out = np.empty((k, base.size))
    for i, plane in enumerate(arr.reshape(k, -1)):
        out[i] = (w00 * plane.take(base) + w01 * plane.take(base + 1)
                  + w10 * plane.take(base + w) + w11 * plane.take(base + w + 1))
    return out.reshape(arr.shape)


def _smooth(arr: np.ndarray, radius: int) -> np.ndarray:
    """Gaussian (sigma = R/2) average over the (2R+1)^2 neighbourhood of each pixel."""
    t = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-t**2 / (2 * (radius / 2.0) ** 2))
    g = tuple(g / g.sum())
    h, w = arr.shape[-2:]
    return _axis_operator(g, h, "reflect") @ arr @ _axis_operator(g, w, "reflect").T


def _packed(frames: np.ndarray, params: FlowParams) -> np.ndarray:
    """Channel-first expansion coefficients (a11, a22, a12, b1, b2) of a stack (M, H, W)."""
    e = poly_expansion(frames, params.sigma, params.radius)
    return np.stack([e.A[..., 0, 0], e.A[..., 1, 1], e.A[..., 0, 1], e.b[..., 0], e.b[..., 1]])


def _check_frames(*frames: np.ndarray) -> None:
    for f in frames:
        if f.ndim < 2:
            raise ValidationError("frames must be at least 2-D", "optflow")
        if not np.all(np.isfinite(f)):
            raise NumericalError("non-finite frame", "optflow")


def _resolve(params, iterations, smooth_radius) -> FlowParams:
    params = params or FlowParams()
    if iterations is not None or smooth_radius is not None:
        params = FlowParams(params.sigma, params.radius,
                            smooth_radius if smooth_radius is not None else params.smooth_radius,
                            iterations if iterations is not None else params.iterations, params.eps)
    return params


def flow_two_frame(f1: np.ndarray, f2: np.ndarray, iterations: int | None = None,
                   smooth_radius: int | None = None, params: FlowParams | None = None) -> np.ndarray:
    """Displacement field from ``f1`` to ``f2``; returns (..., 2, H, W) as (dx, dy).

    Each iteration samples the second expansion at p + d, forms
    A = (A1 + A2)/2 and db = -(b2 - b1)/2 + A d, and solves the
    neighbourhood-averaged normal equations (sum A^T A) d = sum A^T db.
    """
    params = _resolve(params, iterations, smooth_radius)
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != f2.shape:
        raise ValidationError(f"frame shapes differ: {f1.shape} vs {f2.shape}", "optflow")
    _check_frames(f1, f2)
    lead, (h, w) = f1.shape[:-2], f1.shape[-2:]
    p1 = _packed(f1.reshape(-1, h, w), params)
    p2 = _packed(f2.reshape(-1, h, w), params)
    d = _solve_flow(p1, p2, params)
    return np.moveaxis(d, 0, 1).reshape(lead + (2, h, w))


_CHUNK = 32  # frame pairs per block; keeps the per-pixel temporaries cache-resident


def _solve_flow(p1: np.ndarray, p2: np.ndarray, params: FlowParams) -> np.ndarray:
    """(2, M, H, W) displacement from packed expansions of both frames."""
    m = p1.shape[1]
    if m > _CHUNK:
        return np.concatenate([_solve_flow(p1[:, i:i + _CHUNK], p2[:, i:i + _CHUNK], params)
                               for i in range(0, m, _CHUNK)], axis=1)
    dx = np.zeros(p1.shape[1:])
    dy = np.zeros(p1.shape[1:])
    R = params.smooth_radius
    for it in range(params.iterations):
        q = p2 if it == 0 else _warp(p2, dx, dy)
        a11 = (p1[0] + q[0]) / 2
        a22 = (p1[1] + q[1]) / 2
        a12 = (p1[2] + q[2]) / 2
        r1 = -(q[3] - p1[3]) / 2 + a11 * dx + a12 * dy
        r2 = -(q[4] - p1[4]) / 2 + a12 * dx + a22 * dy
        # A is symmetric, so A^T A and A^T db expand as below
        terms = np.stack([a11 * a11 + a12 * a12, a12 * a12 + a22 * a22, a12 * (a11 + a22),
                          a11 * r1 + a12 * r2, a12 * r1 + a22 * r2])
        g11, g22, g12, h1, h2 = _smooth(terms, R)
        scale = (g11 + g22).mean(axis=(1, 2)) / 2
        flat = scale <= 0
        reg = np.where(flat, 1.0, params.eps * scale)[:, None, None]
        g11 = g11 + reg
        g22 = g22 + reg
        det = g11 * g22 - g12 * g12
        dx = (g22 * h1 - g12 * h2) / det
        dy = (g11 * h2 - g12 * h1) / det
        dx[flat] = 0.0
        dy[flat] = 0.0
        mag = np.hypot(dx, dy)
        over = mag > R
        if over.any():
            shrink = R / mag[over]
            dx[over] *= shrink
            dy[over] *= shrink
    if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
        raise NumericalError("non-finite flow estimate", "optflow")
    return np.stack([dx, dy])


@dataclass(frozen=True)
class U8Encoding:
    data: np.ndarray  # uint8, same shape as the flow
    lo: float
    hi: float

    def decode(self) -> np.ndarray:
        if self.hi == self.lo:
            return np.full(self.data.shape, self.lo)
        return self.lo + self.data.astype(float) / 255.0 * (self.hi - self.lo)


def rescale_u8(flow: np.ndarray) -> U8Encoding:
    """Affine map of the global (min, max) of ``flow`` onto 0..255, half-to-even rounding."""
    flow = np.asarray(flow, dtype=float)
    if flow.size == 0:
        raise ValidationError("empty flow tensor", "optflow")
    if not np.all(np.isfinite(flow)):
        raise NumericalError("non-finite flow", "optflow")
    lo, hi = float(flow.min()), float(flow.max())
    if hi == lo:
        return U8Encoding(np.zeros(flow.shape, np.uint8), lo, hi)
    q = np.rint((flow - lo) / (hi - lo) * 255.0)
    return U8Encoding(np.clip(q, 0, 255).astype(np.uint8), lo, hi)


_hsv_to_rgb = np.vectorize(colorsys.hsv_to_rgb, otypes=[float, float, float])


def flow_hue(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Direction in degrees, [0, 360)."""
    hue = np.mod(np.degrees(np.arctan2(dy, dx)), 360.0)
    return np.where(hue >= 360.0, 0.0, hue)  # tiny negative angles round up to 360


def flow_to_hsv(flow: np.ndarray) -> np.ndarray:
    """8-bit RGB rendering of one (2, H, W) flow field.

    Hue encodes direction, saturation is 1, value is magnitude relative to the
    field's largest magnitude.
    """
    flow = np.asarray(flow, dtype=float)
    dx, dy = flow[0], flow[1]
    mag = np.hypot(dx, dy)
    top = mag.max() if mag.size else 0.0
    val = mag / top if top > 0 else np.zeros_like(mag)
    hue = flow_hue(dx, dy) / 360.0
    r, g, b = _hsv_to_rgb(hue, np.ones_like(hue), val)
    rgb = np.stack([r, g, b], axis=-1)
    return np.rint(rgb * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class FlowVideo:
    """Flow fields of one epoch: ``flow`` has shape (bands, pairs, 2, H, W)."""

    flow: np.ndarray
    u8: U8Encoding = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "u8", rescale_u8(self.flow))

    @property
    def n_pairs(self) -> int:
        return self.flow.shape[1]

    def hsv(self) -> np.ndarray:
        """(bands, pairs, H, W, 3) uint8 renderings."""
        nb, npairs = self.flow.shape[:2]
        out = [[flow_to_hsv(self.flow[b, p]) for p in range(npairs)] for b in range(nb)]
        return np.array(out, dtype=np.uint8)


def video_flows(video: np.ndarray, params: FlowParams | None = None) -> np.ndarray:
    """Consecutive-pair flow of a video stack (..., frames, H, W) -> (..., frames-1, 2, H, W).

    Every frame is expanded once and shared by the two pairs it belongs to;
    the result equals calling :func:`flow_two_frame` pair by pair.
    """
    params = params or FlowParams()
    video = np.asarray(video, dtype=float)
    if video.ndim < 3 or video.shape[-3] < 2:
        raise ValidationError("a video needs at least two frames", "optflow")
    _check_frames(video)
    lead, (nf, h, w) = video.shape[:-3], video.shape[-3:]
    packed = _packed(video.reshape(-1, h, w), params).reshape((5, -1, nf, h, w))
    p1 = packed[:, :, :-1].reshape(5, -1, h, w)
    p2 = packed[:, :, 1:].reshape(5, -1, h, w)
    d = _solve_flow(p1, p2, params)  # (2, M*(nf-1), H, W)
    return np.moveaxis(d, 0, 1).reshape(lead + (nf - 1, 2, h, w))


def video_to_flow(video: np.ndarray, params: FlowParams | None = None) -> FlowVideo:
    """Flow video of one epoch's (bands, frames, H, W) EEG video."""
    video = np.asarray(video, dtype=float)
    if video.ndim == 3:
        video = video[None]
    return FlowVideo(video_flows(video, params))
