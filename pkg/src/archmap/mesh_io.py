"""STL ingestion and basic mesh primitives.

Binary and ASCII STL are both accepted. STL stores three vertices per facet,
so coincident vertices are welded into a shared index before anything else
touches the mesh.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WELD_TOLERANCE = 1e-9  # fraction of the bounding-box diagonal

_BINARY_RECORD = np.dtype([("normal", "<f4", (3,)), ("verts", "<f4", (3, 3)), ("attr", "<u2")])


class StlError(ValueError):
    """Base class for everything that can go wrong reading an STL file."""


class TruncatedFile(StlError):
    pass


class MalformedAscii(StlError):
    pass


class EmptyMesh(StlError):
    pass


class InvalidMesh(StlError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh. Arrays are read-only after construction."""

    vertices: np.ndarray
    faces: np.ndarray
    source_format: str = "binary-stl"

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if len(v) < 3 or len(f) < 1:
            raise InvalidMesh(f"need >= 3 vertices and >= 1 face, got {len(v)} and {len(f)}")
        if not np.isfinite(v).all():
            raise InvalidMesh("non-finite vertex coordinate")
        if f.min() < 0 or f.max() >= len(v):
            raise InvalidMesh("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, self.source_format)


@dataclass(frozen=True, eq=False)
class Point2Set:
    """Centered 2D point set plus the centroid that was subtracted."""

    points: np.ndarray
    origin_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points, np.float64).reshape(-1, 2))
        object.__setattr__(self, "origin_offset", _frozen(self.origin_offset, np.float64).reshape(2))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask: np.ndarray) -> "Point2Set":
        return Point2Set(self.points[mask], self.origin_offset)

    def recompose(self) -> np.ndarray:
        """Original (x, y) coordinates."""
        return self.points + self.origin_offset


def weld(corners: np.ndarray, tolerance: float = WELD_TOLERANCE) -> tuple[np.ndarray, np.ndarray]:
    """Merge per-facet corners (F, 3, 3) into an indexed mesh.

    Indices are assigned in order of first appearance, so the same input
    always yields the same numbering.
    """
    pts = corners.reshape(-1, 3).astype(np.float64)
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) if len(pts) else 0.0
    tol = tolerance * diag
    keys = np.round(pts / tol).astype(np.int64) if tol > 0 else pts
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # np.unique sorts lexicographically; renumber by first occurrence instead
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    vertices = pts[first[order]]
    faces = rank[inverse].reshape(-1, 3)
    return vertices, faces


def _parse_binary(data: bytes) -> np.ndarray:
    (count,) = struct.unpack_from("<I", data, 80)
    records = np.frombuffer(data, dtype=_BINARY_RECORD, count=count, offset=84)
    return records["verts"].astype(np.float64)


def _parse_ascii(data: bytes) -> np.ndarray:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedAscii("file is neither consistent binary STL nor ASCII text") from exc
    tokens = text.split()
    if not tokens or tokens[0] != "solid":
        raise MalformedAscii("missing 'solid' keyword")
    if "endsolid" not in tokens:
        raise MalformedAscii("missing 'endsolid'")

    corners: list[list[float]] = []
    i = 1
    # solid name may span several tokens; skip to the first facet/endsolid
    while i < len(tokens) and tokens[i] not in ("facet", "endsolid"):
        i += 1
    while i < len(tokens):
        tok = tokens[i]
        if tok == "endsolid":
            break
        if tok != "facet":
            raise MalformedAscii(f"unexpected token {tok!r}")
        # facet normal nx ny nz outer loop (vertex x y z)x3 endloop endfacet
        chunk = tokens[i : i + 21]
        if len(chunk) < 21:
            raise MalformedAscii("truncated facet")
        if chunk[1] != "normal" or chunk[5:7] != ["outer", "loop"] or chunk[19:21] != ["endloop", "endfacet"]:
            raise MalformedAscii(f"malformed facet near token {i}")
        for k in range(3):
            v = chunk[7 + 4 * k : 11 + 4 * k]
            if v[0] != "vertex":
                raise MalformedAscii(f"expected 'vertex', got {v[0]!r}")
            try:
                corners.append([float(c) for c in v[1:]])
            except ValueError as exc:
                raise MalformedAscii(f"non-numeric coordinate in {v[1:]}") from exc
        i += 21
    else:
        raise MalformedAscii("missing 'endsolid'")
    return np.array(corners, dtype=np.float64).reshape(-1, 3, 3)


def parse_stl(data: bytes) -> TriangleMesh:
    """Parse binary or ASCII STL bytes into a welded :class:`TriangleMesh`."""
    if not data:
        raise EmptyMesh("empty byte stream")
    declared = struct.unpack_from("<I", data, 80)[0] if len(data) >= 84 else None

    if declared is not None and len(data) == 84 + 50 * declared:
        corners, fmt = _parse_binary(data), "binary-stl"
    elif data.lstrip()[:5] == b"solid":
        try:
            corners, fmt = _parse_ascii(data), "ascii-stl"
        except MalformedAscii:
            if declared is not None and 84 + 50 * declared > len(data):
                raise TruncatedFile(
                    f"header declares {declared} facets but only {len(data) - 84} bytes follow"
                ) from None
            raise
    elif declared is not None and 84 + 50 * declared > len(data):
        raise TruncatedFile(f"header declares {declared} facets but only {len(data) - 84} bytes follow")
    else:
        corners, fmt = _parse_ascii(data), "ascii-stl"

    if len(corners) == 0:
        raise EmptyMesh("STL contains no facets")
    if not np.isfinite(corners).all():
        raise InvalidMesh("non-finite vertex coordinate")
    vertices, faces = weld(corners)
    return TriangleMesh(vertices, faces, fmt)


def read_stl(path: str | Path) -> TriangleMesh:
    return parse_stl(Path(path).read_bytes())


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unit normals from winding order; zero for degenerate facets."""
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def to_stl_bytes(vertices: np.ndarray, faces: np.ndarray, header: bytes = b"archmap") -> bytes:
    """Serialize as binary STL. Normals are recomputed from winding."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    rec = np.zeros(len(faces), dtype=_BINARY_RECORD)
    rec["normal"] = face_normals(vertices, faces)
    rec["verts"] = vertices[faces]
    head = header[:80].ljust(80, b"\0")
    return head + struct.pack("<I", len(faces)) + rec.tobytes()


def to_ascii_stl(vertices: np.ndarray, faces: np.ndarray, name: str = "archmap") -> str:
    vertices = np.asarray(vertices, dtype=np.float64)
    normals = face_normals(vertices, np.asarray(faces))
    lines = [f"solid {name}"]
    for n, face in zip(normals, faces):
        lines.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
        lines.append("    outer loop")
        for idx in face:
            x, y, z = vertices[idx]
            lines.append(f"      vertex {x:.9g} {y:.9g} {z:.9g}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    return "\n".join(lines) + "\n"


def write_stl(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    Path(path).write_bytes(to_stl_bytes(vertices, faces))


def centroid(mesh: TriangleMesh) -> np.ndarray:
    """Mean of the (already welded, hence unique) vertices."""
    return mesh.vertices.mean(axis=0)


def occlusal_projection(mesh: TriangleMesh) -> Point2Set:
    """Drop z and center the (x, y) cloud on its centroid."""
    xy = mesh.vertices[:, :2]
    offset = xy.mean(axis=0)
    return Point2Set(xy - offset, offset)
