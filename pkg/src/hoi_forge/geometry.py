"""Point cloud and mesh primitives.

Conventions: meters, z-up world, right-handed. Rigid poses are 6-vectors
``[axis-angle (3), translation (3)]`` applied as rotate-then-translate.
Voxel grids are aligned to the world origin: voxel ``(i, j, k)`` covers the
half-open box ``[i*s, (i+1)*s) x ...``.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.transform import Rotation

from . import autograd as ag
from .autograd import ContractViolation


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------
@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    normals_valid: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ContractViolation("face index out of range")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    @property
    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def unmatched_edges(self) -> list[tuple[int, int]]:
        """Undirected edges not shared by exactly two faces with opposite orientation."""
        count: dict[tuple[int, int], int] = {}
        for a, b, c in self.faces:
            for u, v in ((a, b), (b, c), (c, a)):
                count[(int(u), int(v))] = count.get((int(u), int(v)), 0) + 1
        bad = set()
        for (u, v), n in count.items():
            if n != 1 or count.get((v, u), 0) != 1:
                bad.add((min(u, v), max(u, v)))
        return sorted(bad)

    def is_watertight(self) -> bool:
        return not self.unmatched_edges()

    def volume(self) -> float:
        tri = self.triangles
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def transformed(self, pose) -> "TriMesh":
        return TriMesh(apply_rigid(pose, self.vertices), self.faces.copy())


class NotWatertight(ValueError):
    def __init__(self, edges):
        shown = ", ".join(f"{u}-{v}" for u, v in edges[:10])
        more = f" (+{len(edges) - 10} more)" if len(edges) > 10 else ""
        super().__init__(f"mesh is not watertight; unmatched edges: {shown}{more}")
        self.edges = edges


@dataclass
class VoxelGrid:
    """Dense occupancy on an origin-aligned lattice. ``start`` is the integer index of cell 0."""

    start: np.ndarray
    voxel_size: float
    occupancy: np.ndarray = field(repr=False)

    @property
    def origin(self) -> np.ndarray:
        return self.start * self.voxel_size

    @property
    def dims(self) -> tuple[int, ...]:
        return self.occupancy.shape

    def count(self) -> int:
        return int(self.occupancy.sum())

    def indices(self) -> np.ndarray:
        """Global integer indices of occupied cells, (M, 3)."""
        return np.argwhere(self.occupancy) + self.start

    def volume(self) -> float:
        return self.count() * self.voxel_size ** 3


def shared_voxels(a: VoxelGrid, b: VoxelGrid) -> int:
    if not np.isclose(a.voxel_size, b.voxel_size, rtol=0, atol=1e-15):
        raise ContractViolation("voxel grids must share a voxel size")
    lo = np.maximum(a.start, b.start)
    hi = np.minimum(a.start + a.dims, b.start + b.dims)
    if np.any(hi <= lo):
        return 0
    sa = tuple(slice(l - s, h - s) for l, h, s in zip(lo, hi, a.start))
    sb = tuple(slice(l - s, h - s) for l, h, s in zip(lo, hi, b.start))
    return int(np.logical_and(a.occupancy[sa], b.occupancy[sb]).sum())


# ---------------------------------------------------------------------------
# rotations and rigid transforms
# ---------------------------------------------------------------------------
def _skew(w: np.ndarray) -> np.ndarray:
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1] = -w[..., 2]
    K[..., 0, 2] = w[..., 1]
    K[..., 1, 0] = w[..., 2]
    K[..., 1, 2] = -w[..., 0]
    K[..., 2, 0] = -w[..., 1]
    K[..., 2, 1] = w[..., 0]
    return K


_SMALL = 1e-3
_E = _skew(np.eye(3))  # _E[k] = [e_k]_x


def _rodrigues_coeffs(theta: np.ndarray):
    """A=sin/θ, B=(1-cos)/θ², dA=A'/θ, dB=B'/θ with series near zero."""
    t2 = theta * theta
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    s, c = np.sin(safe), np.cos(safe)
    A = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / safe)
    B = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - c) / safe ** 2)
    dA = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840, (safe * c - s) / safe ** 3)
    dB = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720, (safe * s - 2 * (1 - c)) / safe ** 4)
    return A, B, dA, dB


def rotvec_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    A, B, _, _ = _rodrigues_coeffs(theta)
    K = _skew(w)
    return np.eye(3) + A[..., None, None] * K + B[..., None, None] * (K @ K)


def rotvec_jacobian(w) -> np.ndarray:
    """dR/dw as an array of shape (..., 3, 3, 3), last axis indexing w."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    A, B, dA, dB = _rodrigues_coeffs(theta)
    K = _skew(w)
    K2 = K @ K
    out = np.empty(w.shape[:-1] + (3, 3, 3))
    for k in range(3):
        Ek = _E[k]
        wk = w[..., k][..., None, None]
        out[..., k] = (dA[..., None, None] * wk * K + A[..., None, None] * Ek
                       + dB[..., None, None] * wk * K2 + B[..., None, None] * (Ek @ K + K @ Ek))
    return out


def rotvec_to_matrix_t(w) -> ag.Tensor:
    """Differentiable Rodrigues map with an analytic Jacobian."""
    w = ag.as_tensor(w)
    R = rotvec_to_matrix(w.data)

    def vjp(g):
        J = rotvec_jacobian(w.data)
        return (np.einsum("...ij,...ijk->...k", g, J),)

    return ag.custom("rotvec", R, (w,), vjp)


def matrix_to_rotvec(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    return Rotation.from_matrix(flat).as_rotvec().reshape(R.shape[:-2] + (3,))


def canonical_rotvec(w) -> np.ndarray:
    """Equivalent rotation vector with magnitude in [0, pi]."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    axis = w / np.where(theta > 0, theta, 1.0)
    tm = np.mod(theta, 2 * np.pi)
    tm = np.where(tm > np.pi, tm - 2 * np.pi, tm)
    return axis * tm


def apply_rigid(pose, points) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    R = rotvec_to_matrix(pose[..., :3])
    return np.asarray(points, dtype=np.float64) @ np.swapaxes(R, -1, -2) + pose[..., None, 3:]


def apply_rigid_inverse(pose, points) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    R = rotvec_to_matrix(pose[..., :3])
    return (np.asarray(points, dtype=np.float64) - pose[..., None, 3:]) @ R


def apply_rigid_t(pose, points) -> ag.Tensor:
    """Differentiable world placement. pose (..., 6) tensor, points (..., N, 3)."""
    pose = ag.as_tensor(pose)
    R = rotvec_to_matrix_t(pose[..., :3])
    t = ag.reshape(pose[..., 3:], pose.shape[:-1] + (1, 3))
    return ag.matmul(points, ag.swap_last(R)) + t


def compose_rigid(p2, p1) -> np.ndarray:
    """Pose equal to applying ``p1`` first, then ``p2``."""
    R1, R2 = rotvec_to_matrix(p1[:3]), rotvec_to_matrix(p2[:3])
    R = R2 @ R1
    t = R2 @ np.asarray(p1[3:]) + np.asarray(p2[3:])
    return np.concatenate([matrix_to_rotvec(R), t])


def invert_rigid(p) -> np.ndarray:
    R = rotvec_to_matrix(p[:3])
    return np.concatenate([matrix_to_rotvec(R.T), -R.T @ np.asarray(p[3:])])


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------
class NearestIndex:
    """kd-tree over a fixed cloud; ties resolved toward the lowest index."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ContractViolation("nearest-neighbour query on an empty cloud")
        self.tree = cKDTree(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        k = min(4, len(self.points))
        d, i = self.tree.query(q, k=k)
        d = d.reshape(len(q), k)
        i = i.reshape(len(q), k)
        # exact distances, then lowest index among ties
        diff = self.points[i] - q[:, None, :]
        d = np.sqrt((diff * diff).sum(-1))
        best = d.min(axis=1, keepdims=True)
        cand = np.where(d == best, i, np.iinfo(np.int64).max)
        idx = cand.min(axis=1)
        dist = best[:, 0]
        if single:
            return idx[0], dist[0]
        return idx, dist


def nearest_point(cloud, query) -> tuple[int, float]:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    idx, dist = NearestIndex(pts).query(np.asarray(query, dtype=np.float64).reshape(3))
    return int(idx), float(dist)


def nearest_brute(points, queries) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive-scan reference for :class:`NearestIndex`."""
    p = np.asarray(points, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    d = np.sqrt(((q[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(q)), idx]


def chamfer(a, b) -> float:
    """Mean of the two directed mean nearest-neighbour distances."""
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64).reshape(-1, 3)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractViolation("chamfer distance of an empty cloud")
    _, dab = NearestIndex(pb).query(pa)
    _, dba = NearestIndex(pa).query(pb)
    return 0.5 * (float(np.mean(dab)) + float(np.mean(dba)))


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------
def estimate_normals(cloud, k: int = 8, degenerate_ratio: float = 1e-10) -> PointCloud:
    """Plane-fit normals from k-NN neighbourhoods, flipped away from the centroid.

    Points whose neighbourhood is (near) collinear get ``normals_valid=False``;
    callers should fall back to mesh normals there.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if not (n >= k >= 3):
        raise ContractViolation(f"need N >= k >= 3 (N={n}, k={k})")
    _, nbr = cKDTree(pts).query(pts, k=k)
    nb = pts[nbr]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    valid = evals[:, 1] > degenerate_ratio * np.maximum(evals[:, 2], 1e-300)
    out = pts - pts.mean(axis=0)
    side = np.einsum("ij,ij->i", normals, out)
    scale = np.linalg.norm(out, axis=1) + 1e-300
    tie = np.abs(side) <= 1e-9 * scale
    # tie-break for points seen edge-on from the centroid: largest component positive
    major = normals[np.arange(n), np.abs(normals).argmax(axis=1)]
    flip = np.where(tie, major < 0, side < 0)
    normals = np.where(flip[:, None], -normals, normals)
    normals[~valid] = np.nan
    return PointCloud(pts.copy(), normals, valid)


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------
def _grid_range(bbox, s: float) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    start = np.floor(lo / s).astype(np.int64)
    stop = np.floor(hi / s).astype(np.int64) + 1
    return start, stop


def sample_triangles(tri: np.ndarray, spacing: float) -> np.ndarray:
    """Deterministic barycentric lattice on each triangle with edge spacing <= ``spacing``."""
    out = []
    edges = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]], 1)
    longest = np.linalg.norm(edges, axis=2).max(axis=1)
    ms = np.maximum(1, np.ceil(longest / spacing).astype(int))
    for m in np.unique(ms):
        sel = tri[ms == m]
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        u = i[keep] / m
        v = j[keep] / m
        w = 1.0 - u - v
        pts = (w[None, :, None] * sel[:, None, 0] + u[None, :, None] * sel[:, None, 1]
               + v[None, :, None] * sel[:, None, 2])
        # rounding must not push a sample off its triangle (matters for grid-aligned faces)
        pts = np.clip(pts, sel.min(axis=1)[:, None], sel.max(axis=1)[:, None])
        out.append(pts.reshape(-1, 3))
    return np.concatenate(out) if out else np.zeros((0, 3))


def voxelize_surface(geom, voxel_size: float, bbox) -> VoxelGrid:
    """Surface occupancy: a cell is occupied iff a surface sample falls inside it.

    ``geom`` is a TriMesh (sampled on a lattice of spacing voxel_size/2, i.e. at
    least 4 samples per voxel face area), a PointCloud, or an (N, 3) array.
    """
    if voxel_size <= 0:
        raise ContractViolation("voxel_size must be positive")
    if isinstance(geom, TriMesh):
        pts = sample_triangles(geom.triangles, voxel_size / 2.0)
    elif isinstance(geom, PointCloud):
        pts = geom.points
    else:
        pts = np.asarray(geom, dtype=np.float64).reshape(-1, 3)
    start, stop = _grid_range(bbox, voxel_size)
    occ = np.zeros(tuple(stop - start), dtype=bool)
    if len(pts) == 0:
        return VoxelGrid(start, voxel_size, occ)
    idx = np.floor(pts / voxel_size).astype(np.int64) - start
    if np.any(idx < 0) or np.any(idx >= occ.shape):
        raise ContractViolation("bounding box does not enclose the geometry")
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(start, voxel_size, occ)


def _ray_hits_x(tri: np.ndarray, y: np.ndarray, z: np.ndarray, eps: float = 1e-12):
    """x-coordinates where lines (y, z) parallel to +x cross the triangles.

    Returns (x_hit (L, F) with nan for misses, edge_hit (L,) bool).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ay, az = a[:, 1][None], a[:, 2][None]
    e1y, e1z = (b[:, 1] - a[:, 1])[None], (b[:, 2] - a[:, 2])[None]
    e2y, e2z = (c[:, 1] - a[:, 1])[None], (c[:, 2] - a[:, 2])[None]
    det = e1y * e2z - e1z * e2y
    py = y[:, None] - ay
    pz = z[:, None] - az
    with np.errstate(all="ignore"):
        u = (py * e2z - pz * e2y) / det
        v = (e1y * pz - e1z * py) / det
        w = 1.0 - u - v
        nondeg = np.abs(det) > eps * eps
        inside = nondeg & (u >= -eps) & (v >= -eps) & (w >= -eps)
        edge = inside & ((np.abs(u) <= eps) | (np.abs(v) <= eps) | (np.abs(w) <= eps))
        xh = a[:, 0][None] + u * (b[:, 0] - a[:, 0])[None] + v * (c[:, 0] - a[:, 0])[None]
        xh = np.where(inside, xh, np.nan)
    return xh, edge.any(axis=1)


def point_in_mesh(mesh: TriMesh, points: np.ndarray, jitter: float = 1e-7,
                  seed: int = 0, max_retries: int = 16) -> np.ndarray:
    """Ray-parity interior test along +x, re-casting jittered rays on edge hits."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles
    y, z = pts[:, 1].copy(), pts[:, 2].copy()
    rng = np.random.default_rng(seed)
    inside = np.zeros(len(pts), dtype=bool)
    todo = np.arange(len(pts))
    n_chunks = max(1, len(pts) * len(tri) // 2_000_000 + 1)
    for _ in range(max_retries):
        if len(todo) == 0:
            break
        retry = []
        for chunk in np.array_split(todo, min(n_chunks, len(todo))):
            xh, edge = _ray_hits_x(tri, y[chunk], z[chunk])
            inside[chunk] = np.sum(xh > pts[chunk, 0][:, None], axis=1) % 2 == 1
            retry.append(chunk[edge])
        todo = np.concatenate(retry)
        y[todo] = pts[todo, 1] + rng.uniform(-jitter, jitter, len(todo))
        z[todo] = pts[todo, 2] + rng.uniform(-jitter, jitter, len(todo))
    return inside


def voxelize_solid(mesh: TriMesh, voxel_size: float, bbox) -> VoxelGrid:
    """Interior occupancy: a cell is occupied iff its center is inside ``mesh``."""
    if voxel_size <= 0:
        raise ContractViolation("voxel_size must be positive")
    bad = mesh.unmatched_edges()
    if bad:
        raise NotWatertight(bad)
    start, stop = _grid_range(bbox, voxel_size)
    vlo, vhi = mesh.vertices.min(0), mesh.vertices.max(0)
    if np.any(vlo < start * voxel_size) or np.any(vhi >= stop * voxel_size):
        raise ContractViolation("bounding box does not enclose the mesh")
    dims = tuple(stop - start)
    occ = np.zeros(dims, dtype=bool)
    # restrict the centre lattice to the mesh bounds
    lo = np.clip(np.floor(vlo / voxel_size).astype(np.int64) - start, 0, None)
    hi = np.minimum(np.floor(vhi / voxel_size).astype(np.int64) - start + 1, dims)
    ii, jj, kk = np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)), indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], 1)
    if len(cells) == 0:
        return VoxelGrid(start, voxel_size, occ)
    centers = (cells + start + 0.5) * voxel_size
    ins = point_in_mesh(mesh, centers)
    c = cells[ins]
    occ[c[:, 0], c[:, 1], c[:, 2]] = True
    return VoxelGrid(start, voxel_size, occ)


# ---------------------------------------------------------------------------
# planar polygons
# ---------------------------------------------------------------------------
def _segment_closest(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return a + t * ab


def point_in_polygon(p, poly) -> bool:
    """Crossing-number test; boundary points count as inside."""
    p = np.asarray(p, dtype=np.float64)
    poly = np.asarray(poly, dtype=np.float64)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if np.linalg.norm(_segment_closest(p, a, b) - p) <= 1e-12:
            return True
    inside = False
    x, y = p
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if xc > x:
                inside = not inside
    return inside


def closest_on_polygon(p, poly) -> tuple[float, np.ndarray]:
    """(distance, closest point) from ``p`` to the polygon region; (0, p) inside."""
    p = np.asarray(p, dtype=np.float64).reshape(2)
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    uniq = np.unique(np.round(poly, 15), axis=0)
    if len(uniq) < 3:
        raise ContractViolation("polygon needs at least 3 distinct vertices")
    if point_in_polygon(p, poly):
        return 0.0, p.copy()
    best, best_q = np.inf, p
    n = len(poly)
    for i in range(n):
        q = _segment_closest(p, poly[i], poly[(i + 1) % n])
        d = float(np.linalg.norm(q - p))
        if d < best:
            best, best_q = d, q
    return best, best_q


def dist_to_polygon(p, polygon) -> float:
    return closest_on_polygon(p, polygon)[0]


def dist_to_hull(p, pts2d) -> tuple[float, np.ndarray, bool]:
    """Distance to the convex hull of ``pts2d`` (handles point/segment hulls).

    Returns (distance, closest point, degenerate flag).
    """
    p = np.asarray(p, dtype=np.float64).reshape(2)
    pts = np.asarray(pts2d, dtype=np.float64).reshape(-1, 2)
    try:
        hull = ConvexHull(pts)
        poly = pts[hull.vertices]
        d, q = closest_on_polygon(p, poly)
        return d, q, False
    except Exception:
        # collinear or coincident support points
        uniq = np.unique(pts, axis=0)
        if len(uniq) == 1:
            q = uniq[0]
        else:
            c = uniq.mean(0)
            _, _, vt = np.linalg.svd(uniq - c)
            proj = (uniq - c) @ vt[0]
            a, b = c + proj.min() * vt[0], c + proj.max() * vt[0]
            q = _segment_closest(p, a, b)
        return float(np.linalg.norm(p - q)), q, True


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------
def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            if len(idx) != 3:
                raise ValueError("only triangular faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, vertices, faces=None, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices).reshape(-1, 3)]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).reshape(-1, 3)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_cloud(path, points, binary: bool = True) -> None:
    pts = np.asarray(points, dtype="<f8").reshape(-1, 3)
    if binary:
        Path(path).write_bytes(struct.pack("<Q", len(pts)) + pts.tobytes())
    else:
        np.savetxt(path, pts, fmt="%.17g")


def read_cloud(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) >= 8:
        (n,) = struct.unpack_from("<Q", raw, 0)
        if len(raw) == 8 + 24 * n:
            return np.frombuffer(raw, dtype="<f8", offset=8).reshape(n, 3).astype(np.float64)
    try:
        return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)
    except ValueError as exc:
        warnings.warn(f"unreadable point cloud {path}")
        raise exc
