"""Shared generators for tests."""
from __future__ import annotations

import numpy as np

from archmap.mesh_io import Point2Set


def rot(xy: np.ndarray, theta_deg: float) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return xy @ np.array([[c, s], [-s, c]])


def noisy_arch(rng: np.random.Generator, *, n: int = 1000, sigma: float = 0.1, outlier_frac: float = 0.05,
               theta: float | None = None, a: float | None = None):
    """Arch points built as ``rotate(parabola, -theta) + offset``.

    Returns (Point2Set centered on the sample mean, truth dict). The truth's
    (a, b, c) are expressed in the frame the estimator works in: centered on
    the sample mean and rotated by the true theta.
    """
    theta = float(rng.uniform(-80, 80)) if theta is None else theta
    a = float(rng.uniform(0.005, 0.05)) if a is None else a
    ratio = rng.uniform(0.5, 0.9)  # depth / width
    w = 2 * ratio / a
    b = float(rng.choice([-1, 1]) * rng.uniform(0.1, 0.5))
    x = rng.uniform(-w, w, n)
    c0 = -a * np.mean(x * x)
    y = a * x * x + b * x + c0 + rng.normal(0, sigma, n)
    q = np.column_stack([x, y])
    n_out = int(round(outlier_frac * n))
    lo, hi = q.min(axis=0), q.max(axis=0)
    idx = rng.choice(n, n_out, replace=False)
    q[idx] = rng.uniform(lo, hi, (n_out, 2))
    offset = rng.uniform(-50, 50, 2)
    pts = rot(q, -theta) + offset
    origin = pts.mean(axis=0)
    # canonical frame of the estimate: q - delta
    dx, dy = rot((origin - offset)[None, :], theta)[0]
    truth = {
        "theta": theta,
        "a": a,
        "b": b + 2 * a * dx,
        "c": c0 + a * dx * dx + b * dx - dy,
    }
    return Point2Set(pts - origin, origin), truth
