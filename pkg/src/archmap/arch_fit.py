"""Dental-arch estimation by rotational grid search over parabola fits.

For each candidate angle the centered occlusal points are rotated, a parabola
``y' = a x'^2 + b x' + c`` is fitted by least squares, the worst residuals are
clipped, the parabola is refitted on the inliers and the candidate is scored by
the inlier mean squared residual. A coarse grid over [-90, 90] degrees is
followed by local refinement around the incumbent.

``theta_star`` is the counter-clockwise angle by which the centered points
must be rotated for the arch to become the parabola above.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh_io import Point2Set, TriangleMesh, occlusal_projection

_CHUNK_ELEMENTS = 4_000_000  # max angles * points held in memory at once


class DegenerateDesign(ValueError):
    """Fewer than three distinct abscissae: the parabola is undetermined."""


@dataclass(frozen=True)
class FitConfig:
    coarse_step: float = 1.0
    refine_half_window: float = 5.0
    refine_iterations: int = 2
    clip_quantile: float = 0.95

    def __post_init__(self):
        if not self.coarse_step > 0:
            raise ValueError("coarse_step must be > 0")
        if not self.refine_half_window > 0:
            raise ValueError("refine_half_window must be > 0")
        if self.refine_iterations < 0:
            raise ValueError("refine_iterations must be >= 0")
        if not 0.5 < self.clip_quantile <= 1.0:
            raise ValueError("clip_quantile must lie in (0.5, 1]")


@dataclass(frozen=True)
class ArchCurve:
    theta_star: float
    a: float
    b: float
    c: float
    rms_residual: float = 0.0
    inlier_fraction: float = 1.0
    origin_offset: tuple[float, float] = (0.0, 0.0)
    # best score after each search stage (coarse, refine 1, refine 2, ...)
    stage_scores: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not -90.0 <= self.theta_star <= 90.0:
            raise ValueError(f"theta_star {self.theta_star} outside [-90, 90]")
        if not all(np.isfinite([self.a, self.b, self.c])):
            raise ValueError("non-finite parabola coefficients")
        if self.rms_residual < 0 or not 0 < self.inlier_fraction <= 1:
            raise ValueError("invalid fit diagnostics")

    def y(self, x):
        return (self.a * x + self.b) * x + self.c

    def dy(self, x):
        return 2.0 * self.a * x + self.b

    def to_frame(self, xy: np.ndarray) -> np.ndarray:
        """Map original (x, y) coordinates into the fitted, rotated frame."""
        return _rotate(np.asarray(xy, dtype=np.float64) - np.asarray(self.origin_offset), self.theta_star)

    def transform_mesh(self, mesh: TriangleMesh) -> TriangleMesh:
        """Center and rotate a mesh into the fitted frame; z is untouched."""
        v = mesh.vertices.copy()
        v[:, :2] = self.to_frame(v[:, :2])
        return mesh.with_vertices(v)

    def as_dict(self) -> dict:
        return {
            "theta_star": self.theta_star,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "rms_residual": self.rms_residual,
            "inlier_fraction": self.inlier_fraction,
            "origin_offset": list(self.origin_offset),
        }


def _rotate(xy: np.ndarray, theta: float) -> np.ndarray:
    t = np.deg2rad(theta)
    c, s = np.cos(t), np.sin(t)
    x, y = xy[:, 0], xy[:, 1]
    return np.column_stack([c * x - s * y, s * x + c * y])


def rotate2d(points: Point2Set, theta: float) -> Point2Set:
    """Rotate about the origin by ``theta`` degrees, counter-clockwise."""
    if not np.isfinite(theta):
        raise ValueError("rotation angle must be finite")
    return Point2Set(_rotate(points.points, theta), points.origin_offset)


def _xy(points) -> np.ndarray:
    return points.points if isinstance(points, Point2Set) else np.asarray(points, dtype=np.float64).reshape(-1, 2)


def fit_parabola_ls(points) -> tuple[float, float, float, np.ndarray]:
    """Ordinary least squares on [x^2, x, 1]. Returns (a, b, c, residuals)."""
    xy = _xy(points)
    x, y = xy[:, 0], xy[:, 1]
    if len(np.unique(x)) < 3:
        raise DegenerateDesign("need at least 3 distinct x values")
    # scaling x keeps the design well conditioned for large coordinates
    scale = float(np.max(np.abs(x))) or 1.0
    u = x / scale
    design = np.column_stack([u * u, u, np.ones_like(u)])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 3:
        raise DegenerateDesign("design matrix rank < 3")
    a, b, c = coef[0] / scale**2, coef[1] / scale, coef[2]
    return float(a), float(b), float(c), y - design @ coef


def robust_clip(residuals, quantile: float) -> np.ndarray:
    """Inlier mask: |r| at or below the ``quantile`` of |r| (at least 3 kept)."""
    r = np.abs(np.asarray(residuals, dtype=np.float64))
    if r.size == 0:
        raise ValueError("empty residual list")
    mask = r <= np.quantile(r, quantile)
    if mask.sum() < min(3, r.size):
        mask = np.zeros(r.size, dtype=bool)
        mask[np.argsort(r, kind="stable")[:3]] = True
    return mask


def radial_preclip(points: Point2Set, quantile: float) -> Point2Set:
    """Drop points whose distance from the origin exceeds the radial quantile."""
    if len(points) == 0:
        raise ValueError("empty point set")
    r = np.hypot(points.points[:, 0], points.points[:, 1])
    return points.subset(r <= np.quantile(r, quantile))


def _batched_fit(x: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Weighted parabola fits for K rotated copies at once.

    x, y, w have shape (K, N); w is a 0/1 inlier mask. Returns residuals (K, N)
    and a validity flag per row.
    """
    scale = np.max(np.abs(x) * w, axis=1, keepdims=True)
    scale[scale == 0] = 1.0
    u = x / scale
    u2 = u * u
    s0 = w.sum(axis=1)
    s1 = (w * u).sum(axis=1)
    s2 = (w * u2).sum(axis=1)
    s3 = (w * u2 * u).sum(axis=1)
    s4 = (w * u2 * u2).sum(axis=1)
    t0 = (w * y).sum(axis=1)
    t1 = (w * u * y).sum(axis=1)
    t2 = (w * u2 * y).sum(axis=1)
    normal = np.stack(
        [np.stack([s4, s3, s2], -1), np.stack([s3, s2, s1], -1), np.stack([s2, s1, s0], -1)], axis=1
    )
    rhs = np.stack([t2, t1, t0], -1)
    det = np.linalg.det(normal)
    ok = np.abs(det) > 1e-12 * np.maximum(s0, 1.0) ** 3
    normal[~ok] = np.eye(3)
    coef = np.linalg.solve(normal, rhs[..., None])[..., 0]
    resid = y - (coef[:, :1] * u2 + coef[:, 1:2] * u + coef[:, 2:3])
    return resid, ok


def _score_angles(xy: np.ndarray, thetas: np.ndarray, quantile: float) -> np.ndarray:
    """Clipped inlier mean squared residual for each candidate angle."""
    n = len(xy)
    scores = np.empty(len(thetas))
    chunk = max(1, _CHUNK_ELEMENTS // max(n, 1))
    for start in range(0, len(thetas), chunk):
        t = np.deg2rad(thetas[start : start + chunk])[:, None]
        c, s = np.cos(t), np.sin(t)
        x = c * xy[:, 0] - s * xy[:, 1]
        y = s * xy[:, 0] + c * xy[:, 1]
        w = np.ones_like(x)
        resid, ok = _batched_fit(x, y, w)
        ar = np.abs(resid)
        q = np.quantile(ar, quantile, axis=1, keepdims=True)
        w = (ar <= q).astype(np.float64)
        short = w.sum(axis=1) < min(3, n)
        if short.any():
            for k in np.flatnonzero(short):
                w[k] = 0.0
                w[k, np.argsort(ar[k], kind="stable")[:3]] = 1.0
        resid2, ok2 = _batched_fit(x, y, w)
        mse = (w * resid2**2).sum(axis=1) / w.sum(axis=1)
        mse[~(ok & ok2)] = np.inf
        scores[start : start + len(t)] = mse
    return scores


def _pick(thetas: np.ndarray, scores: np.ndarray) -> int:
    # lowest score, then smallest |theta|, then smallest theta
    return int(np.lexsort((thetas, np.abs(thetas), scores))[0])


def _grid(center: float, half_window: float, step: float) -> np.ndarray:
    n = int(round(half_window / step))
    g = center + step * np.arange(-n, n + 1)
    g = np.round(g, 10)
    return np.unique(np.clip(g, -90.0, 90.0))


def estimate_arch(points: Point2Set, config: FitConfig | None = None) -> ArchCurve:
    """Coarse-to-fine search for the rotation and parabola that best fit the arch."""
    config = config or FitConfig()
    xy = points.points
    if len(xy) < 3:
        raise DegenerateDesign("need at least 3 points")

    step = config.coarse_step
    n_coarse = int(np.floor(180.0 / step + 1e-9))
    thetas = np.round(-90.0 + step * np.arange(n_coarse + 1), 10)
    scores = _score_angles(xy, thetas, config.clip_quantile)
    best = _pick(thetas, scores)
    theta, score = float(thetas[best]), float(scores[best])
    if not np.isfinite(score):
        raise DegenerateDesign("every candidate rotation is degenerate")
    stage_scores = [score]

    for _ in range(config.refine_iterations):
        step /= 10.0
        thetas = _grid(theta, config.refine_half_window, step)
        scores = _score_angles(xy, thetas, config.clip_quantile)
        best = _pick(thetas, scores)
        if scores[best] <= score:
            theta, score = float(thetas[best]), float(scores[best])
        stage_scores.append(score)

    rotated = _rotate(xy, theta)
    a, b, c, resid = fit_parabola_ls(rotated)
    mask = robust_clip(resid, config.clip_quantile)
    a, b, c, resid = fit_parabola_ls(rotated[mask])
    return ArchCurve(
        theta_star=theta,
        a=a,
        b=b,
        c=c,
        rms_residual=float(np.sqrt(np.mean(resid**2))),
        inlier_fraction=float(mask.mean()),
        origin_offset=tuple(float(v) for v in points.origin_offset),
        stage_scores=tuple(stage_scores),
    )


def fit_mesh(mesh: TriangleMesh, config: FitConfig | None = None) -> ArchCurve:
    """Occlusal projection, radial pre-clip, then :func:`estimate_arch`."""
    config = config or FitConfig()
    pts = occlusal_projection(mesh)
    return estimate_arch(radial_preclip(pts, config.clip_quantile), config)
