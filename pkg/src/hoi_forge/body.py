"""Simplified articulated body standing in for SMPL-H.

A pose is a 159-vector laid out as::

    global_orient (3) | body_pose (21 x 3) | left_hand_pose (15 x 3)
    | right_hand_pose (15 x 3) | translation (3)

All rotations are axis-angle in the parent frame. The world is z-up with +y
facing forward from the body and +x toward the body's left. The zero pose is
a T-pose with open flat hands, palms down, pelvis at the translation.

Joint order (52, SMPL-H compatible)::

     0 pelvis        1 left_hip      2 right_hip     3 spine1
     4 left_knee     5 right_knee    6 spine2        7 left_ankle
     8 right_ankle   9 spine3       10 left_foot    11 right_foot
    12 neck         13 left_collar  14 right_collar 15 head
    16 left_shoulder 17 right_shoulder 18 left_elbow 19 right_elbow
    20 left_wrist   21 right_wrist
    22-36 left hand  (index1-3, middle1-3, pinky1-3, ring1-3, thumb1-3)
    37-51 right hand (same order)

Contact hand joints (30), left hand then right, each hand ordered
thumb, index, middle, ring, pinky with joints distal to proximal::

    idx  0- 2 thumb3 thumb2 thumb1    idx  3- 5 index3 index2 index1
    idx  6- 8 middle3 ...             idx  9-11 ring3 ...
    idx 12-14 pinky3 ...              (+15 for the right hand)
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import geometry as geo

POSE_DIM = 159
N_JOINTS = 52
N_CONTACT = 30
SLICES = {
    "global_orient": slice(0, 3),
    "body_pose": slice(3, 66),
    "left_hand_pose": slice(66, 111),
    "right_hand_pose": slice(111, 156),
    "translation": slice(156, 159),
}

BODY_JOINTS = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
]
BODY_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
FINGERS_SMPLH = ["index", "middle", "pinky", "ring", "thumb"]
FINGERS_CONTACT = ["thumb", "index", "middle", "ring", "pinky"]
THUMB_CONTACT = (0, 1, 2, 15, 16, 17)

# left-hand rest offsets (parent frame, meters): per finger, joint1..joint3
_LEFT_FINGERS = {
    "index": [(0.095, 0.025, 0.0), (0.038, 0.0, 0.0), (0.024, 0.0, 0.0)],
    "middle": [(0.095, 0.003, 0.0), (0.042, 0.0, 0.0), (0.027, 0.0, 0.0)],
    "pinky": [(0.078, -0.036, 0.0), (0.030, 0.0, 0.0), (0.020, 0.0, 0.0)],
    "ring": [(0.088, -0.018, 0.0), (0.038, 0.0, 0.0), (0.025, 0.0, 0.0)],
    "thumb": [(0.060, 0.035, 0.0), (0.040, 0.015, 0.0), (0.032, 0.005, 0.0)],
}
_FINGERTIP = {"index": 0.020, "middle": 0.022, "pinky": 0.017, "ring": 0.021, "thumb": 0.024}
# local pad normals: thumb faces the index finger (-y), index faces the thumb (+y),
# remaining fingers use the palmar side (-z)
_LEFT_NORMALS = {
    "thumb": (0.0, -1.0, 0.0),
    "index": (0.0, 1.0, 0.0),
    "middle": (0.0, 0.0, -1.0),
    "ring": (0.0, 0.0, -1.0),
    "pinky": (0.0, 0.0, -1.0),
}
_BODY_OFFSETS = {
    "pelvis": (0.0, 0.0, 0.0),
    "left_hip": (0.09, 0.0, -0.08), "right_hip": (-0.09, 0.0, -0.08),
    "spine1": (0.0, 0.0, 0.11),
    "left_knee": (0.0, 0.0, -0.40), "right_knee": (0.0, 0.0, -0.40),
    "spine2": (0.0, 0.0, 0.13),
    "left_ankle": (0.0, 0.0, -0.41), "right_ankle": (0.0, 0.0, -0.41),
    "spine3": (0.0, 0.0, 0.05),
    "left_foot": (0.0, 0.12, -0.05), "right_foot": (0.0, 0.12, -0.05),
    "neck": (0.0, 0.0, 0.22),
    "left_collar": (0.07, 0.0, 0.15), "right_collar": (-0.07, 0.0, 0.15),
    "head": (0.0, 0.02, 0.10),
    "left_shoulder": (0.12, 0.0, 0.02), "right_shoulder": (-0.12, 0.0, 0.02),
    "left_elbow": (0.26, 0.0, 0.0), "right_elbow": (-0.26, 0.0, 0.0),
    "left_wrist": (0.25, 0.0, 0.0), "right_wrist": (-0.25, 0.0, 0.0),
}
# heel and forefoot relative to each ankle
_SUPPORT = [("left_ankle", (0.0, -0.05, -0.08)), ("left_ankle", (0.0, 0.16, -0.08)),
            ("right_ankle", (0.0, 0.16, -0.08)), ("right_ankle", (0.0, -0.05, -0.08))]
PAD_OFFSET = 0.004
FINGER_RADIUS = 0.004


def mirror_rotvec(w) -> np.ndarray:
    """Rotation vector mirrored through the body's sagittal (x = 0) plane."""
    w = np.array(w, dtype=np.float64)
    w[..., 1:] *= -1.0
    return w


def _joint_names() -> list[str]:
    names = list(BODY_JOINTS)
    for side in ("left", "right"):
        for f in FINGERS_SMPLH:
            names += [f"{side}_{f}{k}" for k in (1, 2, 3)]
    return names


def _hand_surface(names, rest, parents) -> tuple[np.ndarray, np.ndarray]:
    """Low-poly rest surface: rings around finger segments plus a two-sided palm plate."""
    idx = {n: i for i, n in enumerate(names)}
    verts, bind = [], []
    ring = np.linspace(0.0, 2 * np.pi, 8, endpoint=False)
    for side in ("left", "right"):
        sx = 1.0 if side == "left" else -1.0
        wrist = idx[f"{side}_wrist"]
        for f in FINGERS_SMPLH:
            chain = [idx[f"{side}_{f}{k}"] for k in (1, 2, 3)]
            ends = [rest[c] for c in chain] + [rest[chain[-1]] + np.array([sx * _FINGERTIP[f], 0, 0])]
            if f == "thumb":
                d = rest[chain[-1]] - rest[chain[-2]]
                ends[-1] = rest[chain[-1]] + _FINGERTIP[f] * d / np.linalg.norm(d)
            for seg in range(3):
                a, b = ends[seg], ends[seg + 1]
                axis = (b - a) / np.linalg.norm(b - a)
                u = np.cross(axis, [0, 0, 1.0])
                u /= np.linalg.norm(u)
                v = np.cross(axis, u)
                n_along = max(2, int(np.ceil(np.linalg.norm(b - a) / 0.004)) + 1)
                for s in np.linspace(0, 1, n_along):
                    c = a + s * (b - a)
                    for th in ring:
                        verts.append(c + FINGER_RADIUS * (np.cos(th) * u + np.sin(th) * v))
                        bind.append(chain[seg])
        # palm plate between wrist and knuckles, bound to the wrist
        anchors = rest[[wrist] + [idx[f"{side}_{f}1"] for f in FINGERS_SMPLH]]
        for px in np.arange(0.01, 0.09, 0.006):
            for py in np.arange(-0.036, 0.027, 0.006):
                for pz in (-0.008, 0.008):
                    p = rest[wrist] + np.array([sx * px, py, pz])
                    # the plate stays within 2.8 cm of the wrist or a knuckle
                    if np.linalg.norm(anchors - p, axis=1).min() <= 0.028:
                        verts.append(p)
                        bind.append(wrist)
    return np.array(verts), np.array(bind, dtype=np.int64)


def default_template_dict() -> dict:
    names = _joint_names()
    parents = list(BODY_PARENTS)
    offsets = [list(_BODY_OFFSETS[n]) for n in BODY_JOINTS]
    for side in ("left", "right"):
        sx = 1.0 if side == "left" else -1.0
        wrist = BODY_JOINTS.index(f"{side}_wrist")
        for f in FINGERS_SMPLH:
            base = len(offsets)
            for k, off in enumerate(_LEFT_FINGERS[f]):
                parents.append(wrist if k == 0 else base + k - 1)
                offsets.append([sx * off[0], off[1], off[2]])
    offsets_arr = np.array(offsets)
    rest = np.zeros((len(names), 3))
    for j in range(1, len(names)):
        rest[j] = rest[parents[j]] + offsets_arr[j]

    contact_joints, contact_normals = [], []
    for side in ("left", "right"):
        sx = 1.0 if side == "left" else -1.0
        for f in FINGERS_CONTACT:
            for k in (3, 2, 1):
                contact_joints.append(names.index(f"{side}_{f}{k}"))
                n = _LEFT_NORMALS[f]
                contact_normals.append([sx * n[0], n[1], n[2]])
    verts, bind = _hand_surface(names, rest, parents)
    return {
        "joint_names": names,
        "parents": parents,
        "offsets": offsets_arr.tolist(),
        "contact_joints": contact_joints,
        "contact_normals": contact_normals,
        "pad_offset": PAD_OFFSET,
        "support_points": [{"joint": names.index(j), "offset": list(o)} for j, o in _SUPPORT],
        "hand_surface": {"vertices": verts.tolist(), "bind": bind.tolist()},
    }


@dataclass(frozen=True)
class BodyTemplate:
    joint_names: tuple[str, ...]
    parents: np.ndarray
    offsets: np.ndarray
    contact_joints: np.ndarray
    contact_normals: np.ndarray
    pad_offset: float
    support_joints: np.ndarray
    support_offsets: np.ndarray
    surface_local: np.ndarray
    surface_bind: np.ndarray
    rest: np.ndarray

    @classmethod
    def from_dict(cls, d: dict) -> "BodyTemplate":
        parents = np.array(d["parents"], dtype=np.int64)
        if parents[0] != -1 or any(parents[j] >= j for j in range(1, len(parents))):
            raise ValueError("parents must form a tree rooted at joint 0 in topological order")
        offsets = np.array(d["offsets"], dtype=np.float64)
        rest = np.zeros_like(offsets)
        for j in range(1, len(parents)):
            rest[j] = rest[parents[j]] + offsets[j]
        normals = np.array(d["contact_normals"], dtype=np.float64)
        if not np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12):
            raise ValueError("contact normals must be unit length")
        verts = np.array(d["hand_surface"]["vertices"], dtype=np.float64).reshape(-1, 3)
        bind = np.array(d["hand_surface"]["bind"], dtype=np.int64)
        return cls(
            joint_names=tuple(d["joint_names"]),
            parents=parents,
            offsets=offsets,
            contact_joints=np.array(d["contact_joints"], dtype=np.int64),
            contact_normals=normals,
            pad_offset=float(d.get("pad_offset", 0.0)),
            support_joints=np.array([s["joint"] for s in d["support_points"]], dtype=np.int64),
            support_offsets=np.array([s["offset"] for s in d["support_points"]], dtype=np.float64),
            surface_local=verts - rest[bind],
            surface_bind=bind,
            rest=rest,
        )

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def joint(self, name: str) -> int:
        return self.joint_names.index(name)


ASSET_DIR = Path(__file__).parent / "assets"


def template_path() -> Path:
    env = os.environ.get("HOI_FORGE_ASSETS")
    if env:
        p = Path(env)
        return p if p.suffix == ".json" else p / "body_template.json"
    return ASSET_DIR / "body_template.json"


def load_template(path=None) -> BodyTemplate:
    path = Path(path) if path is not None else template_path()
    return BodyTemplate.from_dict(json.loads(path.read_text()))


@lru_cache(maxsize=1)
def default_template() -> BodyTemplate:
    p = template_path()
    if p.exists():
        return load_template(p)
    return BodyTemplate.from_dict(default_template_dict())


def write_default_template(path=None) -> Path:
    path = Path(path) if path is not None else ASSET_DIR / "body_template.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(default_template_dict(), indent=1))
    return path


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------
def split_pose(pose) -> dict[str, np.ndarray]:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-1] != POSE_DIM:
        raise ValueError(f"human pose must have {POSE_DIM} values, got {pose.shape[-1]}")
    return {k: pose[..., s] for k, s in SLICES.items()}


@lru_cache(maxsize=8)
def _levels(parents_key: tuple[int, ...]):
    parents = np.array(parents_key)
    depth = np.zeros(len(parents), dtype=np.int64)
    for j in range(1, len(parents)):
        depth[j] = depth[parents[j]] + 1
    levels = [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]
    where = {}
    for li, lv in enumerate(levels):
        for k, j in enumerate(lv):
            where[int(j)] = (li, k)
    order = np.concatenate(levels)
    inverse = np.argsort(order)
    parent_pos = [None] + [np.array([where[int(parents[j])][1] for j in lv]) for lv in levels[1:]]
    return levels, parent_pos, inverse


@dataclass
class FKResult:
    positions: ag.Tensor   # (B, J, 3)
    rotations: ag.Tensor   # (B, J, 3, 3)


def forward_kinematics(pose, template: BodyTemplate | None = None) -> FKResult:
    """World joint positions and rotations for a (B, 159) or (159,) pose.

    Differentiable when ``pose`` is a Tensor recorded on a tape.
    """
    template = template or default_template()
    pose = ag.as_tensor(pose)
    squeeze = pose.ndim == 1
    if squeeze:
        pose = ag.reshape(pose, (1, POSE_DIM))
    if pose.shape[-1] != POSE_DIM:
        raise ValueError(f"human pose must have {POSE_DIM} values")
    b = pose.shape[0]
    J = template.n_joints
    rotvecs = ag.reshape(pose[:, :3 * J], (b, J, 3))
    local = geo.rotvec_to_matrix_t(rotvecs)  # (B, J, 3, 3)
    trans = pose[:, 156:159]
    levels, parent_pos, inverse = _levels(tuple(template.parents.tolist()))
    rots, poss = [], []
    for li, lv in enumerate(levels):
        loc = local[:, lv]
        if li == 0:
            rot = loc
            pos = ag.reshape(trans, (b, 1, 3))
        else:
            prot = rots[-1][:, parent_pos[li]]
            ppos = poss[-1][:, parent_pos[li]]
            off = template.offsets[lv][None, :, :, None]  # (1, n, 3, 1)
            pos = ppos + ag.reshape(ag.matmul(prot, off), (b, len(lv), 3))
            rot = ag.matmul(prot, loc)
        rots.append(rot)
        poss.append(pos)
    positions = ag.concat(poss, axis=1)[:, inverse]
    rotations = ag.concat(rots, axis=1)[:, inverse]
    if squeeze:
        positions = positions[0]
        rotations = rotations[0]
    return FKResult(positions, rotations)


@dataclass
class HandJoints30:
    positions: np.ndarray | ag.Tensor    # (..., 30, 3)
    normals: np.ndarray | ag.Tensor      # (..., 30, 3)
    pads: np.ndarray | ag.Tensor         # contact mapping points R(.)

    def numpy(self) -> "HandJoints30":
        cv = lambda x: x.data if isinstance(x, ag.Tensor) else x
        return HandJoints30(cv(self.positions), cv(self.normals), cv(self.pads))


def hand_joints_from_fk(fk: FKResult, template: BodyTemplate | None = None,
                        pad_offset: float | None = None) -> HandJoints30:
    template = template or default_template()
    off = template.pad_offset if pad_offset is None else pad_offset
    cj = template.contact_joints
    pos = fk.positions[..., cj, :]
    rot = fk.rotations[..., cj, :, :]
    n = ag.reshape(ag.matmul(rot, template.contact_normals[..., None]), pos.shape)
    pads = pos + n * off if off else pos
    return HandJoints30(pos, n, pads)


def hand_joints(pose, template: BodyTemplate | None = None,
                pad_offset: float | None = None) -> HandJoints30:
    """The 30 contact joints in canonical order, with world normals and pad points."""
    template = template or default_template()
    fk = forward_kinematics(pose, template)
    hj = hand_joints_from_fk(fk, template, pad_offset)
    return hj if isinstance(pose, ag.Tensor) else hj.numpy()


def support_points(pose, template: BodyTemplate | None = None) -> np.ndarray:
    template = template or default_template()
    fk = forward_kinematics(np.asarray(pose, dtype=np.float64), template)
    P = fk.positions.data
    R = fk.rotations.data
    j = template.support_joints
    return P[..., j, :] + np.einsum("...nij,nj->...ni", R[..., j, :, :], template.support_offsets)


@dataclass
class SupportPolygon:
    polygon: np.ndarray     # (K, 2) hull vertices, counter-clockwise
    hip_xy: np.ndarray
    distance: float         # hip projection to polygon, 0 inside
    closest: np.ndarray
    degenerate: bool


def support_polygon(pose, template: BodyTemplate | None = None) -> SupportPolygon:
    """Convex hull of the foot support points on z = 0 and the hip ground projection."""
    template = template or default_template()
    pts = support_points(pose, template)[:, :2]
    hip = np.asarray(pose, dtype=np.float64)[156:158]
    d, q, degen = geo.dist_to_hull(hip, pts)
    if degen:
        poly = np.unique(pts, axis=0)
    else:
        from scipy.spatial import ConvexHull
        poly = pts[ConvexHull(pts).vertices]
    return SupportPolygon(poly, hip.copy(), d, q, degen)


def hand_surface(pose, template: BodyTemplate | None = None, side: str | None = None) -> geo.PointCloud:
    """Rigidly skinned low-poly hand surface in world coordinates."""
    template = template or default_template()
    fk = forward_kinematics(np.asarray(pose, dtype=np.float64), template)
    P, R = fk.positions.data, fk.rotations.data
    b = template.surface_bind
    pts = P[b] + np.einsum("nij,nj->ni", R[b], template.surface_local)
    if side is not None:
        left_joints = {template.joint("left_wrist")} | set(range(22, 37))
        mask = np.array([int(j) in left_joints for j in b])
        pts = pts[mask if side == "left" else ~mask]
    return geo.PointCloud(pts)


def hand_side_mask(side: str) -> np.ndarray:
    """Boolean mask over the 30 contact joints for ``side``."""
    m = np.zeros(N_CONTACT, dtype=bool)
    if side in ("left", "both"):
        m[:15] = True
    if side in ("right", "both"):
        m[15:] = True
    return m


def contact_label_table(template: BodyTemplate | None = None) -> list[tuple[int, str, str, int]]:
    """(index, side, finger, joint number) for each of the 30 contact joints."""
    rows = []
    for i in range(N_CONTACT):
        side = "left" if i < 15 else "right"
        f = FINGERS_CONTACT[(i % 15) // 3]
        rows.append((i, side, f, 3 - (i % 3)))
    return rows
