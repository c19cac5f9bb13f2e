"""Procedural scene objects: watertight meshes, 4000-point clouds, usual-contact masks."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from .geometry import PointCloud, TriMesh

N_POINTS = 4000
KINDS = ("box", "cylinder", "sphere", "mug")


@dataclass
class SceneObject:
    name: str
    points: np.ndarray            # (N, 3) canonical frame
    normals: np.ndarray           # (N, 3)
    mesh: TriMesh
    contact_mask: np.ndarray      # (N,) True on the usual contact region
    grasp_width: float = 0.0      # extent along canonical +y at the grasp site
    _index: geo.NearestIndex | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.contact_mask = np.asarray(self.contact_mask, dtype=bool)
        if len(self.contact_mask) != len(self.points):
            raise ValueError("contact mask length must equal point count")
        if not self.contact_mask.any():
            raise ValueError(f"object '{self.name}' has no usual-contact points")

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.points, self.normals)

    @property
    def index(self) -> geo.NearestIndex:
        if self._index is None:
            self._index = geo.NearestIndex(self.points)
        return self._index

    def with_geometry(self, points, normals, mesh, name=None) -> "SceneObject":
        return replace(self, name=name or self.name, points=points, normals=normals, mesh=mesh,
                       _index=None)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------
def box_mesh(ex: float, ey: float, ez: float, center=(0.0, 0.0, 0.0)) -> TriMesh:
    c = np.asarray(center, dtype=np.float64)
    h = np.array([ex, ey, ez]) / 2.0
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * h + c
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriMesh(v, f)


def cylinder_mesh(radius: float, height: float, segments: int = 32) -> TriMesh:
    th = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(th), radius * np.sin(th)], 1)
    bot = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.vstack([bot, top, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + j], [i, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return TriMesh(v, faces)


def icosphere_mesh(radius: float, subdivisions: int = 3) -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = [tuple(x) for x in f]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius, np.array(faces))


def merge_meshes(*meshes: TriMesh) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriMesh(np.vstack(verts), np.vstack(faces))


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted random surface samples with their face normals."""
    areas = mesh.face_areas
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    tri = mesh.triangles[face]
    pts = ((1 - s)[:, None] * tri[:, 0] + (s * (1 - r2))[:, None] * tri[:, 1]
           + (s * r2)[:, None] * tri[:, 2])
    return pts, mesh.face_normals[face]


# ---------------------------------------------------------------------------
# the synthetic library
# ---------------------------------------------------------------------------
def _seed(name: str) -> int:
    return zlib.crc32(name.encode()) & 0xFFFFFFFF


def make_object(kind: str, n_points: int = N_POINTS) -> SceneObject:
    rng = np.random.default_rng(_seed(kind))
    if kind == "box":
        mesh = box_mesh(0.04, 0.045, 0.07)
        width = 0.045
        region = lambda p: np.abs(np.abs(p[:, 1]) - 0.0225) < 1e-9
    elif kind == "cylinder":
        mesh = cylinder_mesh(0.025, 0.10)
        width = 0.05
        region = lambda p: (np.hypot(p[:, 0], p[:, 1]) > 0.0249) & (np.abs(p[:, 2]) < 0.04)
    elif kind == "sphere":
        mesh = icosphere_mesh(0.025, 3)
        width = 0.05
        region = lambda p: np.abs(p[:, 1]) > 0.012
    elif kind == "mug":
        body = cylinder_mesh(0.028, 0.09)
        handle = box_mesh(0.012, 0.012, 0.06, center=(0.028 + 0.002 + 0.006, 0.0, 0.0))
        mesh = merge_meshes(body, handle)
        width = 0.056
        region = lambda p: (np.hypot(p[:, 0], p[:, 1]) > 0.0275) & (np.abs(p[:, 2]) < 0.035) \
            & (np.abs(p[:, 1]) > 0.012) & (p[:, 0] < 0.0281)
    else:
        raise ValueError(f"unknown object kind '{kind}'")
    pts, nrm = sample_surface(mesh, n_points, rng)
    return SceneObject(kind, pts, nrm, mesh, region(pts), width)


class ObjectLibrary(dict):
    """Name -> SceneObject, unique names, clouds resampled to 4000 points on ingest."""

    def add(self, obj: SceneObject) -> None:
        if obj.name in self:
            raise ValueError(f"duplicate object name '{obj.name}'")
        if len(obj.points) != N_POINTS:
            obj = resample(obj, N_POINTS)
        self[obj.name] = obj

    @classmethod
    def default(cls) -> "ObjectLibrary":
        lib = cls()
        for k in KINDS:
            lib.add(make_object(k))
        return lib


def resample(obj: SceneObject, n: int) -> SceneObject:
    rng = np.random.default_rng(_seed(obj.name) ^ n)
    idx = rng.choice(len(obj.points), size=n, replace=len(obj.points) < n)
    return replace(obj, points=obj.points[idx], normals=obj.normals[idx],
                   contact_mask=obj.contact_mask[idx], _index=None)


def pack_mask(mask: np.ndarray) -> bytes:
    """Usual-contact mask, one bit per point (count u64 prefix)."""
    mask = np.asarray(mask, dtype=bool)
    return struct.pack("<Q", len(mask)) + np.packbits(mask, bitorder="little").tobytes()


def unpack_mask(buf: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<Q", buf, 0)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=8), bitorder="little")
    return bits[:n].astype(bool)


def library_tensors(lib: dict) -> dict[str, np.ndarray]:
    """Flatten a library into named tensors (stored with the checkpoint container)."""
    out = {}
    for name, o in lib.items():
        out[f"{name}/points"] = o.points
        out[f"{name}/normals"] = o.normals
        out[f"{name}/mesh.vertices"] = o.mesh.vertices
        out[f"{name}/mesh.faces"] = o.mesh.faces.astype(np.float64)
        out[f"{name}/mask"] = o.contact_mask.astype(np.float64)
        out[f"{name}/grasp_width"] = np.array(o.grasp_width)
    return out


def library_from_tensors(t: dict[str, np.ndarray]) -> ObjectLibrary:
    lib = ObjectLibrary()
    names = sorted({k.rsplit("/", 1)[0] for k in t}, key=list(t).index)
    for n in names:
        mesh = TriMesh(t[f"{n}/mesh.vertices"], t[f"{n}/mesh.faces"].astype(np.int64))
        lib.add(SceneObject(n, t[f"{n}/points"], t[f"{n}/normals"], mesh, t[f"{n}/mask"] > 0.5,
                            float(t[f"{n}/grasp_width"])))
    return lib
