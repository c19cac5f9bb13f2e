"""Contact-guided refinement of sampled human/object poses."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import autograd as ag
from . import geometry as geo
from .body import N_CONTACT, POSE_DIM, BodyTemplate, default_template, forward_kinematics, hand_joints_from_fk
from .contact import TAU, hand_indicator, masked_hand, select_contacts
from .diffusion import ConfigError
from .encoders import ConditionBundle


@dataclass
class GuidanceConfig:
    alpha: float = 0.1          # normal term weight
    beta: float = 0.5           # balance term weight
    lam: float = 0.1            # step size on the mean
    lam_schedule: str = "noise"  # "noise": lam * (1 - abar_t); "constant": lam
    t_guide: int | None = None  # last (largest) step index that is guided; None = all
    use_con: bool = True
    use_norm: bool = True
    use_balance: bool = True
    norm_sign: str = "plus"      # "plus": |n_h + n_o|^2, "minus": |n_h - n_o|^2
    tau: float = TAU
    space: str = "normalized"    # gradient w.r.t. the normalized or the data-space mean

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ConfigError("guidance weights and step size must be non-negative")
        if self.norm_sign not in ("plus", "minus"):
            raise ConfigError(f"unknown normal term sign '{self.norm_sign}'")
        if self.lam_schedule not in ("noise", "constant"):
            raise ConfigError(f"unknown step schedule '{self.lam_schedule}'")

    @property
    def active(self) -> bool:
        return self.lam > 0 and (self.use_con or (self.use_norm and self.alpha > 0)
                                 or (self.use_balance and self.beta > 0))

    def step_size(self, t: int, sched) -> float:
        if self.lam_schedule == "constant":
            return self.lam
        return self.lam * float(1.0 - sched.abar(t))


@dataclass
class ContactPairing:
    """Matched hand/object contact points and normals in world coordinates."""

    indices: np.ndarray
    hand_points: np.ndarray | ag.Tensor
    object_points: np.ndarray | ag.Tensor
    hand_normals: np.ndarray | ag.Tensor
    object_normals: np.ndarray | ag.Tensor

    @classmethod
    def empty(cls) -> "ContactPairing":
        z = np.zeros((0, 3))
        return cls(np.zeros(0, dtype=np.int64), z, z, z, z)


def _sqsum(x) -> ag.Tensor:
    x = ag.as_tensor(x)
    return ag.tsum(x * x)


def g_con(pairing: ContactPairing) -> ag.Tensor:
    return _sqsum(ag.as_tensor(pairing.hand_points) - pairing.object_points)


def g_norm(pairing: ContactPairing, sign: str = "plus") -> ag.Tensor:
    nh = ag.as_tensor(pairing.hand_normals)
    return _sqsum(nh + pairing.object_normals if sign == "plus" else nh - pairing.object_normals)


# ---------------------------------------------------------------------------
# balance: hip ground projection vs. the support hull
# ---------------------------------------------------------------------------
def _support_xy(fk, template: BodyTemplate) -> ag.Tensor:
    j = template.support_joints
    P = fk.positions[:, j]
    R = fk.rotations[:, j]
    pts = P + ag.reshape(ag.matmul(R, template.support_offsets[None, :, :, None]), P.shape)
    return pts[:, :, :2]


def _closest_feature(p: np.ndarray, pts: np.ndarray):
    """Nearest hull feature to ``p`` as (i, j) support indices; i == j for a vertex, None inside."""
    try:
        hull = ConvexHull(pts).vertices
    except QhullError:
        return None  # degenerate support: no balance signal
    poly = pts[hull]
    if geo.point_in_polygon(p, poly):
        return None
    best, feat = np.inf, None
    n = len(hull)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        ab = b - a
        s = float(np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0))
        d = float(np.linalg.norm(a + s * ab - p))
        if d < best:
            if s == 0.0:
                feat = (hull[k], hull[k])
            elif s == 1.0:
                feat = (hull[(k + 1) % n], hull[(k + 1) % n])
            else:
                feat = (hull[k], hull[(k + 1) % n])
            best = d
    return feat


def _balance_rows(human: ag.Tensor, fk, template: BodyTemplate) -> ag.Tensor:
    """(B,) hip-to-support distance; differentiable through FK."""
    b = human.shape[0]
    sup = _support_xy(fk, template)
    hip = human[:, 156:158]
    rows, ia, ib = [], [], []
    for r in range(b):
        f = _closest_feature(hip.data[r], sup.data[r])
        if f is not None:
            rows.append(r)
            ia.append(f[0])
            ib.append(f[1])
    out = ag.as_tensor(np.zeros(b))
    if not rows:
        return out
    rows, ia, ib = np.array(rows), np.array(ia), np.array(ib)
    a = sup[rows, ia]
    ab = sup[rows, ib] - a
    p = hip[rows]
    edge = ia != ib
    den = ag.tsum(ab * ab, axis=-1, keepdims=True)
    den = ag.where(edge[:, None], den, np.ones((len(rows), 1)))
    s = ag.tsum((p - a) * ab, axis=-1, keepdims=True) / den
    q = a + ab * ag.where(edge[:, None], s, np.zeros((len(rows), 1)))
    dist = ag.sqrt(ag.tsum((p - q) * (p - q), axis=-1))
    scatter = np.zeros((b, len(rows)))
    scatter[rows, np.arange(len(rows))] = 1.0
    return ag.reshape(ag.matmul(scatter, ag.reshape(dist, (-1, 1))), (b,))


def g_balance(pose, template: BodyTemplate | None = None) -> ag.Tensor:
    """Hip projection distance to the support polygon (0 inside)."""
    template = template or default_template()
    pose = ag.as_tensor(pose)
    human = ag.reshape(pose, (1, POSE_DIM)) if pose.ndim == 1 else pose
    return ag.tsum(_balance_rows(human, forward_kinematics(human, template), template))


# ---------------------------------------------------------------------------
# batched objective on the joint state
# ---------------------------------------------------------------------------
@dataclass
class ContactTargets:
    """Selected canonical contact points per row, padded to 30 with a 0/1 mask."""

    points: np.ndarray    # (B, 30, 3) canonical object frame
    normals: np.ndarray   # (B, 30, 3) canonical object normals at those points
    mask: np.ndarray      # (B, 30)

    @property
    def empty(self) -> np.ndarray:
        return self.mask.sum(1) == 0

    @classmethod
    def from_prediction(cls, contacts, objects, tau: float = TAU) -> "ContactTargets":
        contacts = np.asarray(contacts, dtype=np.float64).reshape(-1, N_CONTACT, 4)
        b = len(contacts)
        pts = np.zeros((b, N_CONTACT, 3))
        nrm = np.zeros((b, N_CONTACT, 3))
        mask = np.zeros((b, N_CONTACT))
        for r in range(b):
            sel = select_contacts(contacts[r], tau)
            if sel.empty:
                continue
            obj = objects[r]
            idx, _ = obj.index.query(sel.points)
            pts[r, sel.indices] = sel.points
            nrm[r, sel.indices] = obj.normals[idx]
            mask[r, sel.indices] = 1.0
        return cls(pts, nrm, mask)


def pairing_rows(human, obj_pose, targets: ContactTargets, template: BodyTemplate, fk=None):
    """Differentiable world-frame pairing; returns (fk, hand pads, object points, n_h, n_o)."""
    human, obj_pose = ag.as_tensor(human), ag.as_tensor(obj_pose)
    fk = fk or forward_kinematics(human, template)
    hj = hand_joints_from_fk(fk, template)
    objp = geo.apply_rigid_t(obj_pose, targets.points)
    R = geo.rotvec_to_matrix_t(obj_pose[:, :3])
    n_o = ag.matmul(targets.normals, ag.swap_last(R))
    return fk, hj.pads, objp, hj.normals, n_o


def g_total_rows(human, obj_pose, targets: ContactTargets, cfg: GuidanceConfig,
                 template: BodyTemplate | None = None) -> tuple[ag.Tensor, dict]:
    """(B,) weighted objective and its per-term parts."""
    template = template or default_template()
    human, obj_pose = ag.as_tensor(human), ag.as_tensor(obj_pose)
    fk, pads, objp, n_h, n_o = pairing_rows(human, obj_pose, targets, template)
    m = targets.mask[..., None]
    b = human.shape[0]
    total = ag.as_tensor(np.zeros(b))
    parts = {}
    if cfg.use_con:
        d = (pads - objp) * m
        parts["con"] = ag.tsum(ag.reshape(d * d, (b, -1)), axis=1)
        total = total + parts["con"]
    if cfg.use_norm and cfg.alpha > 0:
        n = (n_h + n_o if cfg.norm_sign == "plus" else n_h - n_o) * m
        parts["norm"] = ag.tsum(ag.reshape(n * n, (b, -1)), axis=1)
        total = total + parts["norm"] * cfg.alpha
    if cfg.use_balance and cfg.beta > 0:
        parts["balance"] = _balance_rows(human, fk, template)
        total = total + parts["balance"] * cfg.beta
    return total, parts


def g_total(pairing: ContactPairing, pose, cfg: GuidanceConfig,
            template: BodyTemplate | None = None) -> ag.Tensor:
    """Weighted objective on an explicit pairing plus the body pose balance term."""
    out = ag.as_tensor(np.zeros(()))
    if cfg.use_con:
        out = out + g_con(pairing)
    if cfg.use_norm and cfg.alpha > 0:
        out = out + g_norm(pairing, cfg.norm_sign) * cfg.alpha
    if cfg.use_balance and cfg.beta > 0:
        out = out + g_balance(pose, template) * cfg.beta
    return out


def objective_grad(state, targets: ContactTargets, cfg: GuidanceConfig,
                   template: BodyTemplate | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row objective value and gradient w.r.t. the (B, 165) data-space state."""
    state = np.asarray(state, dtype=np.float64)
    human = ag.Tensor(state[:, :POSE_DIM].copy(), requires_grad=True)
    obj = ag.Tensor(state[:, POSE_DIM:].copy(), requires_grad=True)
    with ag.Tape() as tape:
        rows, _ = g_total_rows(human, obj, targets, cfg, template)
        loss = ag.tsum(rows)
    g = ag.backward(tape, loss, [human, obj])
    return rows.data.copy(), np.concatenate([g[human], g[obj]], axis=1)


# ---------------------------------------------------------------------------
# guided sampling
# ---------------------------------------------------------------------------
@dataclass
class RefineResult:
    states: np.ndarray            # refined (B, 165)
    coarse: np.ndarray            # stage-1 sample (B, 165)
    contacts: np.ndarray          # (B, 30, 4)
    targets: ContactTargets
    flagged: np.ndarray           # rows whose contact set was empty
    trace: list[tuple[int, np.ndarray]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def contact_condition(cond: ConditionBundle, prompts, human) -> ConditionBundle:
    ind = np.array([hand_indicator(p) for p in prompts])
    return ConditionBundle(cond.token_ids, cond.object_points, cond.null_text.copy(),
                           masked_hand(human, ind))


def guided_sample(prior, contact_model, cond: ConditionBundle, prompts, objects, cfg: GuidanceConfig,
                  rng: np.random.Generator, template: BodyTemplate | None = None,
                  trace: bool = False) -> RefineResult:
    """Coarse sample, one contact prediction, then a guided re-run with the same noise."""
    template = template or default_template()
    start = rng.bit_generator.state
    coarse = prior.sample(cond, rng)
    ccond = contact_condition(cond, prompts, coarse[:, :POSE_DIM])
    contacts = contact_model.predict(ccond, rng)
    targets = ContactTargets.from_prediction(contacts, objects, cfg.tau)
    flagged = targets.empty
    notes = []
    if flagged.any():
        msg = f"{int(flagged.sum())} row(s) without predicted contacts; guidance off for them"
        warnings.warn(msg)
        notes.append(msg)
    steps: list[tuple[int, np.ndarray]] = []
    if not cfg.active or flagged.all():
        return RefineResult(coarse, coarse, contacts, targets, flagged, steps, notes)
    t_guide = prior.sched.T if cfg.t_guide is None else cfg.t_guide
    norm, sched = prior.norm, prior.sched

    def hook(mu, t, x0_hat):
        if t > t_guide:
            return mu
        val, grad = objective_grad(norm.decode(mu), targets, cfg, template)
        if trace:
            steps.append((t, val))
        if cfg.space == "data":
            return mu - cfg.step_size(t, sched) * grad / norm.std
        return mu - cfg.step_size(t, sched) * grad * norm.std

    replay = np.random.default_rng()
    replay.bit_generator.state = start
    refined = prior.sample(cond, replay, guidance=hook)
    refined[flagged] = coarse[flagged]
    return RefineResult(refined, coarse, contacts, targets, flagged, steps, notes)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------
def central_difference(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn(x)
        flat[i] = old - eps
        lo = fn(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
