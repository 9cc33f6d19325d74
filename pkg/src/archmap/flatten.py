"""Arch flattening: remap vertices to (arc length, signed normal offset, height).

Vertices are first moved into the fitted arch frame (centroid removed, rotated
by ``theta_star``). Each vertex is then projected onto the nearest point of the
parabola; its flattened coordinates are the arc length of that foot point
measured from the left end of the sampled curve, the signed distance along the
unit normal ``(-y', 1) / |(-y', 1)|``, and the untouched z.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .arch_fit import ArchCurve
from .mesh_io import TriangleMesh, to_stl_bytes

DEFAULT_SAMPLES = 4096
DEFAULT_PADDING = 0.05
NEWTON_ITERATIONS = 20
_TIE_RTOL = 1e-9


def _g(u):
    """Antiderivative kernel: 4a * integral of sqrt(1 + u^2) du/(2a)."""
    return u * np.sqrt(1.0 + u * u) + np.arcsinh(u)


def arc_length(curve: ArchCurve, x0, x1):
    """Arc length of ``y = a x^2 + b x + c`` between ``x0`` and ``x1``.

    Closed form of the integral of sqrt(1 + (2ax + b)^2). Differences are taken
    in a rationalized form so that small ``a`` does not cancel catastrophically.
    Negative when ``x1 < x0``. Accepts scalars or arrays.
    """
    a, b = float(curve.a), float(curve.b)
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    dx = x1 - x0
    if a == 0.0:
        out = np.sqrt(1.0 + b * b) * dx
        return float(out) if out.ndim == 0 else out

    u0 = 2.0 * a * x0 + b
    u1 = 2.0 * a * x1 + b
    r0 = np.sqrt(1.0 + u0 * u0)
    r1 = np.sqrt(1.0 + u1 * u1)
    same = u0 * u1 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        # u r difference: (u1 r1 - u0 r0) = (u1-u0)(u1+u0)(1+u1^2+u0^2) / (u1 r1 + u0 r0)
        sum_u = u1 + u0
        t_poly = sum_u * (1.0 + u1 * u1 + u0 * u0) / (u1 * r1 + u0 * r0)
        # asinh u1 - asinh u0 = asinh(w),  w = (u1-u0)(u1+u0) / (u1 r0 + u0 r1)
        den = u1 * r0 + u0 * r1
        w = (u1 - u0) * sum_u / den
        ratio = np.where(w == 0.0, 1.0, np.arcsinh(w) / np.where(w == 0.0, 1.0, w))
        t_asinh = sum_u / den * ratio
        stable = 0.5 * dx * (t_poly + t_asinh)
        direct = (_g(u1) - _g(u0)) / (4.0 * a)
    out = np.where(same, stable, direct)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class CurveSampling:
    curve: ArchCurve
    sample_xs: np.ndarray
    cumulative_s: np.ndarray
    tree: cKDTree

    @property
    def x_min(self) -> float:
        return float(self.sample_xs[0])

    @property
    def x_max(self) -> float:
        return float(self.sample_xs[-1])

    @property
    def total_length(self) -> float:
        return float(self.cumulative_s[-1])

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.sample_xs, self.curve.y(self.sample_xs)])


def _invert_arc_length(curve: ArchCurve, x_min: float, x_max: float, targets: np.ndarray, tol: float) -> np.ndarray:
    """Vectorized bisection for x with arc_length(x_min, x) == target."""
    lo = np.full_like(targets, x_min)
    hi = np.full_like(targets, x_max)
    while targets.size and np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = arc_length(curve, x_min, mid) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(mid == lo) & np.all(mid == hi):
            break
    return 0.5 * (lo + hi)


def build_sampling(curve: ArchCurve, x_min: float, x_max: float, n: int = DEFAULT_SAMPLES) -> CurveSampling:
    """Sample the curve at ``n`` points equally spaced in arc length."""
    if not x_min < x_max:
        raise ValueError("x_min must be < x_max")
    if n < 2:
        raise ValueError("need at least 2 samples")
    total = arc_length(curve, x_min, x_max)
    targets = total * np.arange(1, n - 1) / (n - 1)
    inner = _invert_arc_length(curve, x_min, x_max, targets, tol=1e-10)
    xs = np.concatenate([[x_min], inner, [x_max]])
    cum = arc_length(curve, x_min, xs)
    cum[0] = 0.0
    tree = cKDTree(np.column_stack([xs, curve.y(xs)]))
    return CurveSampling(curve, xs, cum, tree)


def sampling_for_points(curve: ArchCurve, xs: np.ndarray, n: int = DEFAULT_SAMPLES,
                        padding: float = DEFAULT_PADDING) -> CurveSampling:
    """Sampling over the x-range of ``xs`` padded by ``padding`` of its width."""
    lo, hi = float(np.min(xs)), float(np.max(xs))
    pad = padding * max(hi - lo, 1e-12)
    return build_sampling(curve, lo - pad, hi + pad, n)


def _newton(curve: ArchCurve, x: np.ndarray, px: np.ndarray, py: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Minimize squared distance to the curve from starting abscissae ``x``.

    Steps that do not decrease the distance are rejected, so the result is never
    worse than the start.
    """
    a = curve.a
    x = x.copy()

    def d2(t):
        return (t - px) ** 2 + (curve.y(t) - py) ** 2

    best = d2(x)
    active = np.ones_like(x, dtype=bool)
    for _ in range(NEWTON_ITERATIONS):
        if not active.any():
            break
        slope = curve.dy(x)
        off = curve.y(x) - py
        g = (x - px) + off * slope
        gp = 1.0 + slope * slope + 2.0 * a * off
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(gp > 0, g / gp, 0.0)
        cand = np.clip(x - step, lo, hi)
        dc = d2(cand)
        accept = active & (dc <= best) & (cand != x)
        x = np.where(accept, cand, x)
        best = np.where(accept, dc, best)
        active = accept & (np.abs(step) > 1e-15 * (1.0 + np.abs(x)))
    return x


def _project(sampling: CurveSampling, pts: np.ndarray) -> np.ndarray:
    """Foot abscissa on the curve for each 2D point, ties toward smaller s."""
    curve = sampling.curve
    xs = sampling.sample_xs
    px, py = pts[:, 0], pts[:, 1]
    lo, hi = sampling.x_min, sampling.x_max
    _, idx = sampling.tree.query(pts)
    xc = _newton(curve, xs[idx], px, py, lo, hi)
    dist = np.hypot(xc - px, curve.y(xc) - py)

    # A second basin can only exist if samples outside the seed's run of
    # neighbours are nearly as close; look for them and resolve explicitly.
    spacing = float(np.max(np.hypot(np.diff(xs), np.diff(curve.y(xs)))))
    balls = sampling.tree.query_ball_point(pts, dist + 2.0 * spacing, return_sorted=True)
    for k, ball in enumerate(balls):
        if len(ball) < 2 or ball[-1] - ball[0] + 1 == len(ball):
            continue
        runs = np.split(np.asarray(ball), np.flatnonzero(np.diff(ball) > 1) + 1)
        seeds = np.array([run[np.argmin(np.hypot(xs[run] - px[k], curve.y(xs[run]) - py[k]))] for run in runs])
        cands = _newton(curve, xs[seeds], np.full(len(seeds), px[k]), np.full(len(seeds), py[k]), lo, hi)
        cands = np.append(cands, xc[k])
        dd = np.hypot(cands - px[k], curve.y(cands) - py[k])
        tied = dd <= dd.min() * (1.0 + _TIE_RTOL) + 1e-300
        xc[k] = cands[tied].min()
    return xc


def nearest_point_on_curve(sampling: CurveSampling, p) -> tuple[float, float, float]:
    """Foot point (x_c, y_c) and its arc-length coordinate s_c."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 2)
    xc = _project(sampling, p)
    s = arc_length(sampling.curve, sampling.x_min, xc)
    return float(xc[0]), float(sampling.curve.y(xc[0])), float(s[0])


def normal_offset(curve: ArchCurve, p, foot):
    """Signed distance from the foot point along the unit normal (-y', 1)/|.|."""
    p = np.asarray(p, dtype=np.float64)
    foot = np.asarray(foot, dtype=np.float64)
    slope = curve.dy(foot[..., 0])
    nx, ny = -slope, np.ones_like(slope)
    d = ((p[..., 0] - foot[..., 0]) * nx + (p[..., 1] - foot[..., 1]) * ny) / np.hypot(nx, ny)
    return float(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True, eq=False)
class FlattenedMesh:
    """Per-vertex (s, d, z) with the source connectivity."""

    flat_vertices: np.ndarray
    faces: np.ndarray
    curve: ArchCurve

    @property
    def vertices(self) -> np.ndarray:
        return self.flat_vertices

    def to_stl_bytes(self) -> bytes:
        return to_stl_bytes(self.flat_vertices, self.faces, header=b"archmap flattened")


def flatten_points(points: np.ndarray, sampling: CurveSampling) -> np.ndarray:
    """Map frame-space (x', y', z) points to (s, d, z)."""
    pts = np.asarray(points, dtype=np.float64)
    xy = pts[:, :2]
    xc = _project(sampling, xy)
    curve = sampling.curve
    s = arc_length(curve, sampling.x_min, xc)
    d = normal_offset(curve, xy, np.column_stack([xc, curve.y(xc)]))
    out = np.empty_like(pts)
    out[:, 0] = np.maximum(s, 0.0)
    out[:, 1] = d
    out[:, 2] = pts[:, 2]
    return out


def flatten_mesh(mesh: TriangleMesh, curve: ArchCurve, sampling: CurveSampling | None = None,
                 *, in_frame: bool = False, n_samples: int = DEFAULT_SAMPLES) -> FlattenedMesh:
    """Flatten a mesh along its fitted arch curve.

    Unless ``in_frame`` is set, vertices are first centered with the curve's
    origin offset and rotated by ``theta_star``.
    """
    framed = mesh if in_frame else curve.transform_mesh(mesh)
    if sampling is None:
        sampling = sampling_for_points(curve, framed.vertices[:, 0], n_samples)
    flat = flatten_points(framed.vertices, sampling)
    flat[:, 2] = mesh.vertices[:, 2]
    return FlattenedMesh(flat, mesh.faces.copy(), curve)
