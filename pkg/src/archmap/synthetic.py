"""Synthetic dental-arch meshes with known construction parameters.

Teeth are ellipsoids laid along a parabola by arc length from the midline,
sitting on a gum band that follows the same curve. The arch is built in its
canonical frame (``y = a x^2``, opening toward +y when ``a > 0``) and then
rotated by ``-theta`` and translated, so a perfect fit recovers ``theta``.
Upper crowns point to -z, lower crowns to +z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dkb
from .dkb import Anomaly
from .mesh_io import TriangleMesh, write_stl

# mesiodistal width, buccolingual width, crown height (mm) by FDI position
TOOTH_DIMENSIONS = {
    1: (8.5, 7.0, 10.0),
    2: (6.5, 6.0, 9.0),
    3: (7.5, 8.0, 10.0),
    4: (7.0, 9.0, 8.0),
    5: (6.5, 9.0, 7.5),
    6: (10.0, 11.0, 7.0),
    7: (9.0, 10.5, 6.5),
    8: (8.5, 10.0, 6.0),
}
GAP_MM = 0.4
GUM_HEIGHT_MM = 5.0
GUM_WIDTH_MM = 12.0


@dataclass(frozen=True)
class ArchSpec:
    arch: str = "upper"
    a: float = 0.025
    theta: float = 0.0
    offset: tuple[float, float] = (0.0, 0.0)
    third_molars: bool = False
    missing: tuple[int, ...] = ()
    extracted: tuple[int, ...] = ()
    lat: int = 12
    lon: int = 20
    gum: bool = True
    metadata: dict = field(default_factory=dict, compare=False)

    def quadrants(self) -> tuple[int, int]:
        # patient right first, so x increases from quadrant 1/4 toward 2/3
        return (1, 2) if self.arch == "upper" else (4, 3)

    def codes(self) -> list[int]:
        top = 8 if self.third_molars else 7
        return [10 * q + p for q in self.quadrants() for p in range(1, top + 1)]

    def present(self) -> list[int]:
        gone = set(self.missing) | set(self.extracted)
        return sorted(c for c in self.codes() if c not in gone)


def _x_at_arclength(a: float, s: np.ndarray) -> np.ndarray:
    """Invert s(x) = arc length of y = a x^2 from 0 to x (odd in x)."""
    xs = np.linspace(0.0, 200.0, 20001)
    u = 2.0 * a * xs
    if a == 0:
        sx = xs
    else:
        sx = (u * np.sqrt(1 + u * u) + np.arcsinh(u)) / (4.0 * a)
    return np.sign(s) * np.interp(np.abs(s), sx, xs)


def _ellipsoid(center, tangent, normal, radii, lat: int, lon: int):
    """UV ellipsoid oriented by tangent/normal in xy; outward winding."""
    rt, rn, rz = radii
    t = np.array([tangent[0], tangent[1], 0.0])
    n = np.array([normal[0], normal[1], 0.0])
    z = np.array([0.0, 0.0, 1.0])
    phi = np.linspace(0, np.pi, lat + 1)[1:-1]
    lam = np.linspace(0, 2 * np.pi, lon, endpoint=False)
    P, L = np.meshgrid(phi, lam, indexing="ij")
    local = np.stack([np.sin(P) * np.cos(L) * rt, np.sin(P) * np.sin(L) * rn, np.cos(P) * rz], -1).reshape(-1, 3)
    top = np.array([[0, 0, rz]])
    bottom = np.array([[0, 0, -rz]])
    local = np.vstack([top, local, bottom])
    basis = np.stack([t, n, z])
    verts = np.asarray(center) + local @ basis
    rings = lat - 1
    faces = []
    ring = lambda i, j: 1 + i * lon + (j % lon)  # noqa: E731
    for j in range(lon):
        faces.append([0, ring(0, j), ring(0, j + 1)])
    for i in range(rings - 1):
        for j in range(lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    last = len(verts) - 1
    for j in range(lon):
        faces.append([last, ring(rings - 1, j + 1), ring(rings - 1, j)])
    faces = np.array(faces)
    # orient outward: the basis may be left-handed
    if np.linalg.det(basis) < 0:
        faces = faces[:, ::-1]
    return verts, faces


def _gum_band(a: float, s_max: float, z0: float, z1: float, width: float, n: int = 64):
    """Closed rectangular tube following the arch from -s_max to s_max."""
    s = np.linspace(-s_max, s_max, n)
    x = _x_at_arclength(a, s)
    y = a * x * x
    tx, ty = np.ones_like(x), 2 * a * x
    norm = np.hypot(tx, ty)
    nx, ny = -ty / norm, tx / norm
    h = width / 2
    corners = [(-h, z0), (h, z0), (h, z1), (-h, z1)]
    verts = []
    for off, z in corners:
        verts.append(np.column_stack([x + off * nx, y + off * ny, np.full_like(x, z)]))
    verts = np.stack(verts, 1).reshape(-1, 3)  # index = i*4 + k
    faces = []
    for i in range(n - 1):
        for k in range(4):
            a0, a1 = i * 4 + k, i * 4 + (k + 1) % 4
            b0, b1 = a0 + 4, a1 + 4
            faces += [[a0, a1, b1], [a0, b1, b0]]
    faces += [[0, 2, 1], [0, 3, 2]]
    e = (n - 1) * 4
    faces += [[e, e + 1, e + 2], [e, e + 2, e + 3]]
    return verts, np.array(faces)


def build_arch(spec: ArchSpec) -> TriangleMesh:
    """Mesh for the given spec, in scanner coordinates (rotated, offset)."""
    sign = -1.0 if spec.arch == "upper" else 1.0
    parts_v, parts_f = [], []
    count = 0

    def add(v, f):
        nonlocal count
        parts_v.append(v)
        parts_f.append(f + count)
        count += len(v)

    present = set(spec.present())
    top = 8 if spec.third_molars else 7
    s_max = 0.0
    for side, q in zip((-1.0, 1.0), spec.quadrants()):
        s = GAP_MM / 2
        for p in range(1, top + 1):
            width, depth, height = TOOTH_DIMENSIONS[p]
            mid = s + width / 2
            s = s + width + GAP_MM
            if 10 * q + p not in present:
                continue
            x = float(_x_at_arclength(spec.a, np.array([side * mid]))[0])
            slope = 2 * spec.a * x
            tangent = np.array([1.0, slope]) / np.hypot(1.0, slope)
            normal = np.array([-tangent[1], tangent[0]])
            center = (x, spec.a * x * x, sign * height / 2)
            add(*_ellipsoid(center, tangent, normal, (width / 2 * 0.95, depth / 2, height / 2), spec.lat, spec.lon))
        s_max = max(s_max, s)
    if spec.gum:
        z0, z1 = (0.0, GUM_HEIGHT_MM) if spec.arch == "upper" else (-GUM_HEIGHT_MM, 0.0)
        v, f = _gum_band(spec.a, s_max, z0, z1, GUM_WIDTH_MM)
        if spec.arch == "lower":
            f = f[:, ::-1]
        add(v, f)

    verts = np.vstack(parts_v)
    faces = np.vstack(parts_f)
    t = np.deg2rad(-spec.theta)
    c, s_ = np.cos(t), np.sin(t)
    xy = verts[:, :2] @ np.array([[c, s_], [-s_, c]])
    verts = np.column_stack([xy + np.asarray(spec.offset), verts[:, 2]])
    return TriangleMesh(verts, faces)


def ground_truth(spec: ArchSpec, ontology=None) -> dkb.StructuredReport:
    anomalies = [Anomaly("missing", c, f"FDI {c} site", "") for c in spec.missing]
    anomalies += [Anomaly("extracted", c, f"FDI {c} site", "") for c in spec.extracted]
    return dkb.report_from_codes(spec.arch, spec.present(), ontology, anomalies=anomalies,
                                 third_molar_evidence=spec.third_molars)


def random_spec(rng: np.random.Generator, arch: str) -> ArchSpec:
    missing: tuple[int, ...] = ()
    extracted: tuple[int, ...] = ()
    quads = (1, 2) if arch == "upper" else (4, 3)
    roll = rng.random()
    if roll < 0.2:
        extracted = (10 * quads[int(rng.integers(2))] + int(rng.integers(4, 6)),)
    elif roll < 0.3:
        missing = (10 * quads[int(rng.integers(2))] + 2,)
    return ArchSpec(
        arch=arch,
        a=float(rng.uniform(0.018, 0.035)),
        theta=float(rng.uniform(-80, 80)),
        offset=(float(rng.uniform(-20, 20)), float(rng.uniform(-20, 20))),
        third_molars=bool(rng.random() < 0.3),
        missing=missing,
        extracted=extracted,
    )


def write_dataset(outdir: str | Path, n_cases: int, seed: int = 0, arches=("upper", "lower")) -> list[Path]:
    """Write ``<case>_<arch>.stl`` meshes with ``<case>_<arch>.gt.json`` annotations."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_cases):
        case = f"case{i:03d}"
        for arch in arches:
            spec = random_spec(rng, arch)
            mesh = build_arch(spec)
            path = out / f"{case}_{arch}.stl"
            write_stl(path, mesh.vertices, mesh.faces)
            gt = ground_truth(spec).to_dict()
            gt["construction"] = {"theta": spec.theta, "a": spec.a, "offset": list(spec.offset)}
            (out / f"{case}_{arch}.gt.json").write_text(json.dumps(gt, indent=2) + "\n")
            paths.append(path)
    return paths
