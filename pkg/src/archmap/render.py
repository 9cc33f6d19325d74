"""Deterministic software rendering of (flattened) arch meshes.

Two modes:

* SSP - surface-shaded projection: z-buffered triangle rasterization with
  interpolated vertex normals and Blinn-Phong shading tuned for a metallic look.
* UVP - unshaded vertex projection: each vertex splatted as a small flat disc,
  no depth test, no connectivity.

Everything is plain float64 numpy with fixed evaluation order, so the same
inputs always give byte-identical images.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

VIEW_ORDER = ("front", "back", "bottom")
CAMERA_DISTANCE = 2.6
FOCAL_MM = 35.0
SENSOR_WIDTH_MM = 36.0
NEAR = 1e-3
_FRAGMENT_CHUNK = 4_000_000

ARCH_ALIASES = {"maxillary": "maxillary", "upper": "maxillary", "mandibular": "mandibular", "lower": "mandibular"}


class DegenerateBounds(ValueError):
    pass


def canonical_arch(arch_side: str) -> str:
    try:
        return ARCH_ALIASES[arch_side.lower()]
    except KeyError:
        raise ValueError(f"unknown arch side {arch_side!r}") from None


@dataclass(frozen=True)
class CameraPose:
    name: str
    position: tuple[float, float, float]
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (1.0, 0.0, 0.0)
    focal_mm: float = FOCAL_MM
    # mirrored poses use a left-handed image basis (image flipped left-right)
    mirrored: bool = False

    def __post_init__(self):
        fwd = np.subtract(self.target, self.position)
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")


@dataclass(frozen=True)
class RenderConfig:
    width: int = 768
    height: int = 1024
    background: tuple[int, int, int] = (255, 255, 255)
    base_color: tuple[float, float, float] = (0.78, 0.80, 0.84)
    point_color: tuple[int, int, int] = (40, 40, 40)
    light_direction: tuple[float, float, float] | None = None  # toward the light; None = headlight
    ambient: float = 0.15
    diffuse: float = 0.4
    specular: float = 0.7
    shininess: float = 64.0
    point_radius: float = 1.5
    crop_ratio: float = 3 / 4

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        for name in ("ambient", "diffuse", "specular"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.crop_ratio <= 0:
            raise ValueError("crop_ratio must be > 0")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Bare vertices + faces; faces may be empty."""

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))


@dataclass(frozen=True, eq=False)
class MultiViewSet:
    views: tuple[np.ndarray, ...]
    arch_side: str
    render_mode: str

    def __post_init__(self):
        if len(self.views) != len(VIEW_ORDER):
            raise ValueError("a view set holds exactly front, back and bottom")
        if len({v.shape for v in self.views}) != 1:
            raise ValueError("all views must share one size")

    def named(self) -> dict[str, np.ndarray]:
        return dict(zip(VIEW_ORDER, self.views))


def canonical_cameras(arch_side: str) -> list[CameraPose]:
    side = canonical_arch(arch_side)
    d = CAMERA_DISTANCE
    front = CameraPose("front", (0.0, d, 0.0))
    back = CameraPose("back", (0.0, -d, 0.0))
    if side == "maxillary":
        bottom = CameraPose("bottom", (0.0, 0.0, -d))
    else:
        bottom = CameraPose("bottom", (0.0, 0.0, d), mirrored=True)
    return [front, back, bottom]


def horizontal_fov(focal_mm: float = FOCAL_MM) -> float:
    """Horizontal field of view in radians on a 36 mm wide frame."""
    return 2.0 * math.atan(SENSOR_WIDTH_MM / (2.0 * focal_mm))


@dataclass(frozen=True, eq=False)
class ViewTransform:
    position: np.ndarray
    rotation: np.ndarray  # rows: right, up, forward
    focal_px: float
    width: int
    height: int

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World -> camera (right, up, depth) coordinates."""
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates (u to the right, v downward) and depth."""
        cam = self.to_camera(points)
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = 0.5 * self.width + self.focal_px * cam[:, 0] / depth
            v = 0.5 * self.height - self.focal_px * cam[:, 1] / depth
        return u, v, depth


def look_at(pose: CameraPose, width: int = 768, height: int = 1024) -> ViewTransform:
    eye = np.asarray(pose.position, dtype=np.float64)
    fwd = np.asarray(pose.target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(pose.up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    if pose.mirrored:
        right = -right
    focal_px = 0.5 * width / math.tan(0.5 * horizontal_fov(pose.focal_mm))
    return ViewTransform(eye, np.stack([right, true_up, fwd]), focal_px, width, height)


def normalize_for_render(mesh) -> Mesh:
    """Center on the bounding-box center and scale the longest extent to 2."""
    v = np.asarray(mesh.vertices, dtype=np.float64)
    if len(v) == 0:
        raise DegenerateBounds("mesh has no vertices")
    lo, hi = v.min(axis=0), v.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise DegenerateBounds("zero extent on all axes")
    center = (lo + hi) / 2.0
    return Mesh((v - center) * (2.0 / extent), np.asarray(mesh.faces, dtype=np.int64).reshape(-1, 3))


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals from winding order."""
    n = np.zeros_like(vertices)
    if len(faces):
        tri = vertices[faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        for k in range(3):
            np.add.at(n, faces[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def _background(config: RenderConfig) -> np.ndarray:
    img = np.empty((config.height, config.width, 3), dtype=np.uint8)
    img[:] = np.asarray(config.background, dtype=np.uint8)
    return img


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize_triangles(u: np.ndarray, v: np.ndarray, depth: np.ndarray, faces: np.ndarray,
                        width: int, height: int):
    """Z-buffered coverage for screen-space triangles.

    A pixel is covered when its center lies in the closed triangle. The nearest
    fragment wins; equal depths go to the lower triangle index. Returns the
    winning face index per pixel (-1 for none) and the screen-space barycentric
    weights of the winner (H, W, 3).
    """
    face_id = np.full(height * width, -1, dtype=np.int64)
    inv_z_buf = np.full(height * width, -np.inf)
    bary = np.zeros((height * width, 3))
    if len(faces) == 0:
        return face_id.reshape(height, width), bary.reshape(height, width, 3)

    fu, fv, fz = u[faces], v[faces], depth[faces]
    area = _edge(fu[:, 0], fv[:, 0], fu[:, 1], fv[:, 1], fu[:, 2], fv[:, 2])
    keep = (fz > NEAR).all(axis=1) & np.isfinite(fu).all(axis=1) & np.isfinite(fv).all(axis=1) & (area != 0)
    x0 = np.clip(np.ceil(fu.min(axis=1) - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(fu.max(axis=1) - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(fv.min(axis=1) - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(fv.max(axis=1) - 0.5), -1, height - 1).astype(np.int64)
    bw = np.where(keep, np.maximum(x1 - x0 + 1, 0), 0)
    bh = np.where(keep, np.maximum(y1 - y0 + 1, 0), 0)
    counts = bw * bh
    tris = np.flatnonzero(counts)

    start = 0
    while start < len(tris):
        cum = np.cumsum(counts[tris[start:]])
        stop = start + max(1, int(np.searchsorted(cum, _FRAGMENT_CHUNK, side="right")))
        chunk = tris[start:stop]
        start = stop

        cnt = counts[chunk]
        t = np.repeat(chunk, cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        px = x0[t] + local % bw[t]
        py = y0[t] + local // bw[t]
        cx, cy = px + 0.5, py + 0.5
        tu, tv = fu[t], fv[t]
        w0 = _edge(tu[:, 1], tv[:, 1], tu[:, 2], tv[:, 2], cx, cy)
        w1 = _edge(tu[:, 2], tv[:, 2], tu[:, 0], tv[:, 0], cx, cy)
        w2 = _edge(tu[:, 0], tv[:, 0], tu[:, 1], tv[:, 1], cx, cy)
        sgn = np.sign(area[t])
        inside = (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0)
        if not inside.any():
            continue
        lam = np.stack([w0, w1, w2], axis=1)[inside] / area[t][inside, None]
        t, pix = t[inside], (py * width + px)[inside]
        inv_z = (lam / fz[t]).sum(axis=1)
        # nearest first (largest 1/z), then lowest face index
        order = np.lexsort((t, -inv_z, pix))
        pix_sorted = pix[order]
        first = order[np.r_[True, pix_sorted[1:] != pix_sorted[:-1]]]
        p = pix[first]
        better = inv_z[first] > inv_z_buf[p]
        first, p = first[better], p[better]
        inv_z_buf[p] = inv_z[first]
        face_id[p] = t[first]
        bary[p] = lam[first]
    return face_id.reshape(height, width), bary.reshape(height, width, 3)


def rasterize_ssp(mesh, pose: CameraPose, config: RenderConfig | None = None) -> np.ndarray:
    """Surface-shaded projection of a normalized mesh."""
    config = config or RenderConfig()
    img = _background(config)
    verts = np.asarray(mesh.vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(mesh.faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return img
    view = look_at(pose, config.width, config.height)
    u, v, depth = view.project(verts)
    face_id, bary = rasterize_triangles(u, v, depth, faces, config.width, config.height)
    hit = face_id >= 0
    if not hit.any():
        return img

    f = faces[face_id[hit]]
    lam = bary[hit]
    # perspective-correct interpolation of vertex normals
    wz = lam / depth[f]
    wz = wz / wz.sum(axis=1, keepdims=True)
    normals = vertex_normals(verts, faces)
    n = (wz[:, :, None] * normals[f]).sum(axis=1)
    n_len = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, n_len, out=np.zeros_like(n), where=n_len > 0)

    to_eye = -view.forward
    if config.light_direction is None:
        to_light = to_eye
    else:
        to_light = np.asarray(config.light_direction, dtype=np.float64)
        to_light = to_light / np.linalg.norm(to_light)
    half = to_light + to_eye
    half_len = np.linalg.norm(half)
    half = half / half_len if half_len > 0 else to_eye
    # two-sided: scan meshes carry inconsistent winding
    ndl = np.abs(n @ to_light)
    ndh = np.abs(n @ half)
    base = np.asarray(config.base_color, dtype=np.float64)
    color = base * (config.ambient + config.diffuse * ndl)[:, None]
    color = color + (config.specular * ndh**config.shininess)[:, None]
    img[hit] = np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img


def project_visible(mesh, pose: CameraPose, config: RenderConfig | None = None):
    """Pixel coordinates of vertices in front of the camera and inside the image."""
    config = config or RenderConfig()
    view = look_at(pose, config.width, config.height)
    u, v, depth = view.project(np.asarray(mesh.vertices, dtype=np.float64).reshape(-1, 3))
    ok = (depth > NEAR) & (u >= 0) & (u <= config.width) & (v >= 0) & (v <= config.height)
    return u[ok], v[ok]


def rasterize_uvp(mesh, pose: CameraPose, config: RenderConfig | None = None) -> np.ndarray:
    """Unshaded vertex projection: flat discs at projected vertices."""
    config = config or RenderConfig()
    img = _background(config)
    u, v = project_visible(mesh, pose, config)
    if len(u) == 0:
        return img
    r = config.point_radius
    reach = int(math.ceil(r)) + 1
    offs = np.arange(-reach, reach + 1)
    dx, dy = np.meshgrid(offs, offs)
    dx, dy = dx.ravel(), dy.ravel()
    px = np.floor(u)[:, None].astype(np.int64) + dx
    py = np.floor(v)[:, None].astype(np.int64) + dy
    inside = (px + 0.5 - u[:, None]) ** 2 + (py + 0.5 - v[:, None]) ** 2 <= r * r
    inside &= (px >= 0) & (px < config.width) & (py >= 0) & (py < config.height)
    img[py[inside], px[inside]] = np.asarray(config.point_color, dtype=np.uint8)
    return img


def crop_to_aspect(image: np.ndarray, ratio: float = 4 / 3) -> np.ndarray:
    """Center crop to the largest sub-rectangle with width/height == ratio."""
    if ratio <= 0:
        raise ValueError("ratio must be > 0")
    h, w = image.shape[:2]
    target_w = max(1, int(round(h * ratio)))
    target_h = max(1, int(round(w / ratio)))
    # already as close to the ratio as whole pixels allow
    if target_w == w or target_h == h:
        return image
    if w > h * ratio:
        x = (w - target_w) // 2
        return image[:, x : x + target_w]
    y = (h - target_h) // 2
    return image[y : y + target_h]


def render_views(mesh, arch_side: str, mode: str = "ssp", config: RenderConfig | None = None) -> MultiViewSet:
    """Normalize once, render front/back/bottom, crop each view."""
    config = config or RenderConfig()
    mode = mode.lower()
    raster = {"ssp": rasterize_ssp, "uvp": rasterize_uvp}.get(mode)
    if raster is None:
        raise ValueError(f"unknown render mode {mode!r}")
    norm = normalize_for_render(mesh)
    views = tuple(crop_to_aspect(raster(norm, pose, config), config.crop_ratio) for pose in canonical_cameras(arch_side))
    return MultiViewSet(views, canonical_arch(arch_side), mode.upper())


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def view_filename(case: str, arch: str, view: str, mode: str) -> str:
    return f"{case}_{arch}_{view}_{mode.lower()}.png"


def write_views(views: MultiViewSet, outdir: str | Path, case: str, arch: str) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in views.named().items():
        p = outdir / view_filename(case, arch, name, views.render_mode)
        p.write_bytes(encode_png(img))
        paths.append(p)
    return paths
