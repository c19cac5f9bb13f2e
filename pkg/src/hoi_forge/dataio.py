"""HOI records, the dataset file format, and the synthetic grasp-scene generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import body
from . import geometry as geo
from .checkpoint import FormatError
from .contact import D_CONTACT, extract_contact_truth, stable_grasp_check
from .objects import KINDS, ObjectLibrary, SceneObject, pack_mask
from .text import ACTIONS, AnnotationError, format_prompt, parse_prompt

MAGIC = b"HOID"
VERSION = 1
HAND_THRESHOLD = 0.005
LIFT_MIN = 0.005


@dataclass
class HOIRecord:
    prompt: str
    action: int
    human: np.ndarray          # (159,)
    object_name: str
    object_pose: np.ndarray    # (6,)
    contact: np.ndarray        # (30, 4)
    rest_height: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.human = np.asarray(self.human, dtype=np.float64).reshape(body.POSE_DIM)
        self.object_pose = np.asarray(self.object_pose, dtype=np.float64).reshape(6)
        self.contact = np.asarray(self.contact, dtype=np.float64).reshape(body.N_CONTACT, 4)

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.human, self.object_pose])

    @property
    def hand(self) -> str:
        return parse_prompt(self.prompt).hand

    def validate(self, objects: ObjectLibrary) -> None:
        parse_prompt(self.prompt)
        if self.object_name not in objects:
            raise KeyError(f"object '{self.object_name}' is not in the library")


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------
def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps_dataset(records) -> bytes:
    records = list(records)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(records))]
    for r in records:
        parts.append(_pack_str(r.prompt))
        parts.append(struct.pack("<I", r.action))
        parts.append(np.asarray(r.human, dtype="<f8").tobytes())
        parts.append(_pack_str(r.object_name))
        parts.append(np.asarray(r.object_pose, dtype="<f8").tobytes())
        parts.append(np.asarray(r.contact, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", r.rest_height))
    return b"".join(parts)


def loads_dataset(buf: bytes) -> list[HOIRecord]:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 16

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    def f64(n: int, what: str) -> np.ndarray:
        return np.frombuffer(take(8 * n, what), dtype="<f8").astype(np.float64)

    def string(what: str) -> str:
        (n,) = struct.unpack("<I", take(4, what + " length"))
        return take(n, what).decode("utf-8")

    out = []
    for _ in range(count):
        prompt = string("prompt")
        (action,) = struct.unpack("<I", take(4, "action id"))
        human = f64(body.POSE_DIM, "human pose")
        name = string("object name")
        pose = f64(6, "object pose")
        contact = f64(body.N_CONTACT * 4, "contact block").reshape(body.N_CONTACT, 4)
        (rest,) = struct.unpack("<d", take(8, "rest height"))
        out.append(HOIRecord(prompt, action, human, name, pose, contact, rest))
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", pos)
    return out


def write_dataset(records, path) -> None:
    Path(path).write_bytes(dumps_dataset(records))


def read_dataset(path) -> list[HOIRecord]:
    return loads_dataset(Path(path).read_bytes())


def write_manifest(objects: ObjectLibrary, directory) -> Path:
    """Text manifest of object names with one bit-packed usual-contact mask file each."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, obj in objects.items():
        mask_file = f"{name}.mask"
        (d / mask_file).write_bytes(pack_mask(obj.contact_mask))
        lines.append(f"{name}\t{len(obj.points)}\t{mask_file}")
    path = d / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# annotation and filtering
# ---------------------------------------------------------------------------
def _surface_distance(points_world, obj: SceneObject, object_pose) -> np.ndarray:
    local = geo.apply_rigid_inverse(object_pose, points_world)
    return obj.index.query(local)[1]


def annotate_hand_type(human, obj: SceneObject, object_pose, threshold: float = HAND_THRESHOLD,
                       template=None) -> str:
    hj = body.hand_joints(np.asarray(human, dtype=np.float64), template)
    d = _surface_distance(hj.positions, obj, object_pose)
    left, right = d[:15].min() < threshold, d[15:].min() < threshold
    if left and right:
        return "both"
    if left:
        return "left"
    if right:
        return "right"
    raise AnnotationError(f"no hand within {threshold * 1000:.0f} mm of '{obj.name}'")


def filter_stable(record: HOIRecord, objects: ObjectLibrary | None = None,
                  d_contact: float = D_CONTACT, template=None) -> bool:
    if objects is not None:
        obj = objects[record.object_name]
        hj = body.hand_joints(record.human, template)
        dist = _surface_distance(hj.positions, obj, record.object_pose)
        active = np.flatnonzero(dist < d_contact)
    else:
        active = np.flatnonzero(record.contact[:, 3] > 0.5)
    if len(active) == 0:
        return False
    if abs(record.object_pose[5] - record.rest_height) < LIFT_MIN:
        return False
    return stable_grasp_check(active)


def correct_interpenetration(record: HOIRecord, obj: SceneObject, template=None) -> HOIRecord:
    """Shift the body translation so contacting pads sit on their object contact points."""
    active = np.flatnonzero(record.contact[:, 3] > 0.5)
    if len(active) == 0:
        return record

    def pads(human):
        return body.hand_joints(human, template).pads[active]

    tgt = geo.apply_rigid(record.object_pose, record.contact[active, :3])
    R = geo.rotvec_to_matrix(record.object_pose[:3])
    nidx = obj.index.query(record.contact[active, :3])[0]
    n_world = obj.normals[nidx] @ R.T
    hand = pads(record.human)
    before = geo.chamfer(hand, tgt)
    if before == 0.0:
        return record
    n_mean = n_world.mean(0)
    norm = np.linalg.norm(n_mean)
    if norm < 1e-12:
        return record
    n_mean /= norm
    # penetrating pads lie behind the surface: push out along the normal, else pull in
    signed = np.einsum("ij,ij->i", hand - tgt, n_world).mean()
    step = before if signed < 0 else -before
    human = record.human.copy()
    human[156:159] += step * n_mean
    after = geo.chamfer(pads(human), tgt)
    if not after < before:
        return record
    out = HOIRecord(record.prompt, record.action, human, record.object_name, record.object_pose,
                    record.contact, record.rest_height, dict(record.meta))
    out.meta["interpenetration_offset"] = float(step)
    return out


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------
def _rv(R: Rotation) -> np.ndarray:
    return R.as_rotvec()


_FINGER_BASE = {f: 22 + 3 * i for i, f in enumerate(body.FINGERS_SMPLH)}
_LEFT_THUMB_PAD, _LEFT_INDEX_PAD = 0, 4   # contact indices: thumb3, index2


def _set(pose: np.ndarray, joint: int, rotvec, mirror: bool) -> None:
    w = np.asarray(rotvec, dtype=np.float64)
    pose[3 * joint:3 * joint + 3] = body.mirror_rotvec(w) if mirror else w


def _arm_config(action: str, rng) -> tuple[Rotation, Rotation, Rotation, float]:
    """Left-side shoulder, elbow, wrist rotations and spine bend for an action."""
    u = rng.uniform
    if action == "lift":
        e, a, b = u(0.6, 0.9), u(0.2, 0.5), 0.0
        wrist = Rotation.from_rotvec([u(-0.6, -0.2), 0, 0])
        elbow = Rotation.from_rotvec([0, 0, a])
    elif action == "pass":
        e, b = u(-0.05, 0.2), 0.0
        wrist = Rotation.from_rotvec([u(-0.2, 0.2), 0, 0])
        elbow = Rotation.from_rotvec([0, 0, u(0.0, 0.2)])
    elif action == "place":
        e, b = u(-0.9, -0.6), u(0.25, 0.45)
        wrist = Rotation.from_rotvec([u(-1.2, -0.8), 0, 0])
        elbow = Rotation.from_rotvec([0, 0, u(0.1, 0.3)])
    elif action == "inspect":
        e, b = u(0.1, 0.4), 0.0
        wrist = Rotation.from_rotvec([u(-1.6, -1.2), 0, 0])
        elbow = Rotation.from_rotvec([0, -u(1.5, 1.9), 0])
    else:
        raise ValueError(f"unknown action '{action}'")
    shoulder = Rotation.from_rotvec([e, 0, 0]) * Rotation.from_rotvec([0, 0, np.pi / 2])
    return shoulder, elbow, wrist, b


def _hand_pose(pose: np.ndarray, side_joint_offset: int, mirror: bool, rng, grasping: bool,
               thumb_abduction: float) -> None:
    u = rng.uniform
    for f, base in _FINGER_BASE.items():
        for k in range(3):
            j = base + k + side_joint_offset
            if f == "thumb":
                w = [0, 0, thumb_abduction if k == 0 else u(-0.05, 0.05)]
            elif f == "index" and grasping:
                w = [0, 0, u(-0.05, 0.05)]
            elif grasping:
                w = [0, u(0.9, 1.3), 0]
            else:
                w = [0, u(0.15, 0.45), 0]
            _set(pose, j, w, mirror)


def _base_pose(action: str, side: str, rng) -> tuple[np.ndarray, float]:
    pose = np.zeros(body.POSE_DIM)
    u = rng.uniform
    mirror_grasp = side == "right"
    shoulder, elbow, wrist, bend = _arm_config(action, rng)
    g_sh, g_el, g_wr = (16, 18, 20) if side == "left" else (17, 19, 21)
    o_sh, o_el = (17, 19) if side == "left" else (16, 18)
    _set(pose, g_sh, _rv(shoulder), mirror_grasp)
    _set(pose, g_el, _rv(elbow), mirror_grasp)
    _set(pose, g_wr, _rv(wrist * Rotation.from_rotvec(u(-0.1, 0.1, 3))), mirror_grasp)
    # the free arm hangs beside the body
    _set(pose, o_sh, [u(-0.1, 0.1), u(1.25, 1.45), 0.0], not mirror_grasp)
    _set(pose, o_el, [0.0, 0.0, u(0.0, 0.3)], not mirror_grasp)
    # spine: forward bend shared over three joints, small noise elsewhere
    for j in (3, 6, 9):
        _set(pose, j, [-bend / 3 + u(-0.03, 0.03), u(-0.03, 0.03), u(-0.03, 0.03)], False)
    for j in (1, 2, 4, 5, 7, 8, 12, 15):
        _set(pose, j, u(-0.04, 0.04, 3), False)
    pose[0:3] = [0.0, 0.0, u(-0.3, 0.3)]
    pose[156:159] = [u(-0.3, 0.3), u(-0.3, 0.3), 0.97]
    free = 0 if side == "right" else 15
    _hand_pose(pose, free, side == "left", rng, False, u(0.0, 0.2))
    return pose, u(-0.05, 0.05)


def _pad_gap(pose, side, template) -> tuple[float, body.HandJoints30]:
    hj = body.hand_joints(pose, template)
    off = 0 if side == "left" else 15
    d = np.linalg.norm(hj.pads[off + _LEFT_THUMB_PAD] - hj.pads[off + _LEFT_INDEX_PAD])
    return float(d), hj


def _solve_abduction(pose, side, width, template, lo=-0.2, hi=1.0, iters=40):
    """Bisection on thumb abduction so the thumb and index pads sit ``width`` apart."""
    joint = _FINGER_BASE["thumb"] + (0 if side == "left" else 15)
    mirror = side == "right"

    def gap(beta):
        p = pose.copy()
        _set(p, joint, [0, 0, beta], mirror)
        return _pad_gap(p, side, template)[0] - width

    g_lo, g_hi = gap(lo), gap(hi)
    if not (g_lo < 0 < g_hi):
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    beta = 0.5 * (lo + hi)
    _set(pose, joint, [0, 0, beta], mirror)
    return beta


def _place_object(hj: body.HandJoints30, side: str, pose, template, rng) -> np.ndarray:
    off = 0 if side == "left" else 15
    pt, pi = hj.pads[off + _LEFT_THUMB_PAD], hj.pads[off + _LEFT_INDEX_PAD]
    center = 0.5 * (pt + pi)
    y_axis = (pi - pt) / np.linalg.norm(pi - pt)
    fk = body.forward_kinematics(pose, template)
    wrist = 20 if side == "left" else 21
    palm = fk.rotations.data[wrist] @ np.array([0.0, 0.0, -1.0])
    z_axis = palm - (palm @ y_axis) * y_axis
    z_axis /= np.linalg.norm(z_axis)
    x_axis = np.cross(y_axis, z_axis)
    R = Rotation.from_matrix(np.column_stack([x_axis, y_axis, z_axis]))
    spin = Rotation.from_rotvec(y_axis * rng.uniform(-0.25, 0.25))
    return np.concatenate([(spin * R).as_rotvec(), center])


class _Midpoint:
    """Stand-in generator returning the centre of every uniform range."""

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return np.full(size, 0.5 * (lo + hi)) if size is not None else 0.5 * (lo + hi)


def _nominal_rotvec(kind, action, side, obj, template) -> np.ndarray | None:
    key = (kind, action, side, id(template))
    if key not in _NOMINAL:
        rng = _Midpoint()
        pose, _ = _base_pose(action, side, rng)
        _hand_pose(pose, 0 if side == "left" else 15, side == "right", rng, True, 0.0)
        ok = _solve_abduction(pose, side, obj.grasp_width, template) is not None
        _NOMINAL[key] = _place_object(body.hand_joints(pose, template), side, pose, template,
                                      rng)[:3] if ok else None
    return _NOMINAL[key]


_NOMINAL: dict = {}


def unwrap_rotvec(w, reference) -> np.ndarray:
    """Of the two rotation vectors for the same rotation, the one nearer ``reference``."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    if th < 1e-12:
        return w.copy()
    alt = w * (1.0 - 2.0 * np.pi / th)
    return alt if np.linalg.norm(alt - reference) < np.linalg.norm(w - reference) else w.copy()


def generate_synthetic_scene(kind: str, rng: np.random.Generator, objects: ObjectLibrary | None = None,
                             action: str | None = None, side: str | None = None,
                             template=None, max_attempts: int = 100) -> HOIRecord:
    """One stable single-hand pinch grasp of ``kind`` with known contact truth."""
    objects = objects if objects is not None else default_library()
    if kind not in objects:
        raise KeyError(f"object '{kind}' is not in the library")
    obj = objects[kind]
    action = action or ACTIONS[rng.integers(len(ACTIONS))]
    side = side or ("left", "right")[rng.integers(2)]
    off = 0 if side == "left" else 15
    for attempt in range(max_attempts):
        pose, _ = _base_pose(action, side, rng)
        grasp_off = 0 if side == "left" else 15
        _hand_pose(pose, grasp_off, side == "right", rng, True, 0.0)
        if _solve_abduction(pose, side, obj.grasp_width, template) is None:
            continue
        hj = body.hand_joints(pose, template)
        obj_pose = _place_object(hj, side, pose, template, rng)
        ref = _nominal_rotvec(kind, action, side, obj, template)
        if ref is not None:
            # keep each prompt group on one branch of the axis-angle chart
            obj_pose[:3] = unwrap_rotvec(obj_pose[:3], ref)
        contact = extract_contact_truth(hj, obj, obj_pose)
        rest = obj_pose[5] - rng.uniform(0.02, 0.2)
        prompt = format_prompt(action, kind, side)
        rec = HOIRecord(prompt, ACTIONS.index(action), pose, kind, obj_pose, contact, rest,
                        {"attempts": attempt + 1})
        try:
            if annotate_hand_type(pose, obj, obj_pose, template=template) != side:
                continue
        except AnnotationError:
            continue
        if not stable_grasp_check(np.flatnonzero(contact[off:off + 15, 3] > 0.5) + off):
            continue
        if filter_stable(rec, objects, template=template):
            return rec
    raise RuntimeError(f"grasp generation for '{kind}' failed after {max_attempts} attempts")


_LIBRARY: ObjectLibrary | None = None


def default_library() -> ObjectLibrary:
    global _LIBRARY
    if _LIBRARY is None:
        _LIBRARY = ObjectLibrary.default()
    return _LIBRARY


def generate_dataset(count: int, seed: int, objects: ObjectLibrary | None = None,
                     kinds=KINDS, template=None) -> list[HOIRecord]:
    """``count`` records cycling through actions x hands x kinds, one derived seed each."""
    objects = objects if objects is not None else default_library()
    seqs = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, ss in enumerate(seqs):
        rng = np.random.default_rng(ss)
        action = ACTIONS[i % len(ACTIONS)]
        side = ("left", "right")[(i // len(ACTIONS)) % 2]
        kind = kinds[(i // (2 * len(ACTIONS))) % len(kinds)]
        out.append(generate_synthetic_scene(kind, rng, objects, action, side, template))
    return out
