"""Evaluation: action classifier features, top-3 accuracy, FID, diversity, multimodality, IV."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import body, checkpoint, nn
from . import geometry as geo
from .autograd import ContractViolation
from .diffusion import ConfigError
from .optim import AdamW

VOXEL = 0.005
CM3_PER_VOXEL = (VOXEL * 100) ** 3   # 0.125


@dataclass
class ClassifierConfig:
    hidden: int = 64
    feature_dim: int = 64
    kind: str = "gru"          # gru | mlp
    steps: int = 2000
    batch: int = 64
    lr: float = 3e-3
    holdout: float = 0.2


class FeatureExtractor(nn.Module):
    """Reads a pose as 53 tokens of 3 values; penultimate activations are the features."""

    def __init__(self, n_classes: int, cfg: ClassifierConfig, rng):
        self.cfg = cfg
        self.n_classes = n_classes
        if cfg.kind == "gru":
            self.rnn = nn.GRU(3, cfg.hidden, rng)
            self.fc = nn.Linear(cfg.hidden, cfg.feature_dim, rng)
        elif cfg.kind == "mlp":
            self.mlp = nn.Linear(body.POSE_DIM, cfg.hidden, rng)
            self.fc = nn.Linear(cfg.hidden, cfg.feature_dim, rng)
        else:
            raise ConfigError(f"unknown classifier kind '{cfg.kind}'")
        self.head = nn.Linear(cfg.feature_dim, n_classes, rng)
        self.mean = np.zeros(body.POSE_DIM)
        self.std = np.ones(body.POSE_DIM)

    def _forward(self, poses) -> tuple[ag.Tensor, ag.Tensor]:
        x = (np.asarray(poses, dtype=np.float64).reshape(-1, body.POSE_DIM) - self.mean) / self.std
        if self.cfg.kind == "gru":
            h = self.rnn(x.reshape(len(x), 53, 3), pool="mean")
        else:
            h = ag.gelu(self.mlp(x))
        feats = ag.gelu(self.fc(h))
        return feats, self.head(feats)

    def features(self, poses) -> np.ndarray:
        with ag.no_grad():
            return self._forward(poses)[0].data

    def logits(self, poses) -> np.ndarray:
        with ag.no_grad():
            return self._forward(poses)[1].data

    def state(self) -> dict[str, np.ndarray]:
        s = {f"model.{k}": v for k, v in self.state_dict().items()}
        s["norm.mean"], s["norm.std"] = self.mean, self.std
        return s

    def save(self, path) -> None:
        path = Path(path)
        checkpoint.save(path.with_suffix(".hoif"), self.state())
        meta = {"kind": "classifier", "n_classes": self.n_classes, "config": asdict(self.cfg)}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("kind") != "classifier":
            raise ConfigError(f"{path} is not a classifier checkpoint")
        t = checkpoint.load(path.with_suffix(".hoif"))
        ext = cls(meta["n_classes"], ClassifierConfig(**meta["config"]), np.random.default_rng(0))
        ext.load_state_dict({k[6:]: v for k, v in t.items() if k.startswith("model.")})
        ext.mean, ext.std = t["norm.mean"], t["norm.std"]
        return ext


@dataclass
class ClassifierResult:
    extractor: FeatureExtractor
    holdout_accuracy: float
    losses: list[float] = field(default_factory=list)


def train_classifier(poses, labels, cfg: ClassifierConfig | None, rng: np.random.Generator,
                     log_every: int = 50) -> ClassifierResult:
    cfg = cfg or ClassifierConfig()
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, body.POSE_DIM)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("classifier needs at least 2 classes")
    n_classes = int(labels.max()) + 1
    perm = rng.permutation(len(poses))
    n_hold = int(round(cfg.holdout * len(poses)))
    hold, tr = perm[:n_hold], perm[n_hold:]
    ext = FeatureExtractor(n_classes, cfg, rng)
    ext.mean = poses[tr].mean(0)
    ext.std = np.maximum(poses[tr].std(0), 1e-3)
    opt = AdamW(ext.parameters(), lr=cfg.lr)
    losses, acc = [], 0.0
    for step in range(1, cfg.steps + 1):
        idx = tr[rng.integers(0, len(tr), size=min(cfg.batch, len(tr)))]
        with ag.Tape() as tape:
            loss = nn.cross_entropy(ext._forward(poses[idx])[1], labels[idx])
        opt.step(ag.backward(tape, loss, opt.params))
        acc += float(loss.data)
        if step % log_every == 0:
            losses.append(acc / log_every)
            acc = 0.0
    ext.eval()
    held = float(np.mean(ext.logits(poses[hold]).argmax(1) == labels[hold])) if n_hold else float("nan")
    return ClassifierResult(ext, held, losses)


def top3_hits(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[1] < 3:
        raise ConfigError("top-3 accuracy needs at least 3 classes")
    # stable sort on negated logits keeps the lower class index first among ties
    top = np.argsort(-logits, axis=1, kind="stable")[:, :3]
    return (top == np.asarray(labels)[:, None]).any(axis=1)


def accuracy_top3(logits, labels) -> float:
    return float(np.mean(top3_hits(logits, labels)))


def _cov(x: np.ndarray, eps: float) -> np.ndarray:
    n, d = x.shape
    c = np.cov(x, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    if n <= d:
        c = c + eps * np.eye(d)
    return c


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a, b, eps: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractViolation("non-finite features")
    ca, cb = _cov(a, eps), _cov(b, eps)
    sa = _psd_sqrt(ca)
    w = np.linalg.eigvalsh(0.5 * ((sa @ cb @ sa) + (sa @ cb @ sa).T))
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    dmu = a.mean(0) - b.mean(0)
    return float(max(0.0, dmu @ dmu + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt))


def diversity(features, pair_count: int = 300, rng: np.random.Generator | None = None) -> float:
    """Mean distance over random disjoint pairs."""
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(len(f), -1)
    if len(f) < 2:
        raise ContractViolation("diversity needs at least 2 samples")
    rng = rng or np.random.default_rng(0)
    k = min(pair_count, len(f) // 2)
    perm = rng.permutation(len(f))[:2 * k]
    return float(np.linalg.norm(f[perm[:k]] - f[perm[k:]], axis=1).mean())


def multimodality(groups, per_group_pairs: int | None = None,
                  rng: np.random.Generator | None = None) -> float:
    """Mean within-group pairwise distance, averaged over groups.

    ``per_group_pairs=None`` uses every pair; otherwise that many random pairs.
    """
    items = groups.values() if isinstance(groups, dict) else groups
    rng = rng or np.random.default_rng(0)
    vals = []
    for g in items:
        g = np.asarray(g, dtype=np.float64)
        g = g.reshape(len(g), -1)
        if len(g) < 2:
            warnings.warn("multimodality: skipping a group with fewer than 2 samples")
            continue
        if per_group_pairs is None:
            i, j = np.triu_indices(len(g), 1)
        else:
            i = rng.integers(0, len(g), per_group_pairs)
            j = (i + rng.integers(1, len(g), per_group_pairs)) % len(g)
        vals.append(np.linalg.norm(g[i] - g[j], axis=1).mean())
    if not vals:
        raise ContractViolation("no group has at least 2 samples")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# intersection volume
# ---------------------------------------------------------------------------
def _bounds(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return pts.min(0), pts.max(0)


def probe_volume(probe, mesh: geo.TriMesh, voxel: float = VOXEL) -> tuple[int, float]:
    """(shared voxels, cm^3) between a probe and the solid of a watertight mesh.

    Point clouds are voxelized by surface occupancy; a watertight probe mesh is
    voxelized solid so that closed test shapes measure their overlap volume.
    """
    if isinstance(probe, geo.TriMesh):
        ppts = probe.vertices
    else:
        ppts = probe.points if isinstance(probe, geo.PointCloud) else np.asarray(probe).reshape(-1, 3)
    plo, phi = _bounds(ppts)
    mlo, mhi = _bounds(mesh.vertices)
    lo, hi = np.maximum(plo, mlo), np.minimum(phi, mhi)
    if np.any(hi < lo):
        return 0, 0.0
    pad = 2 * voxel
    bbox = (np.minimum(plo, mlo) - pad, np.maximum(phi, mhi) + pad)
    solid = geo.voxelize_solid(mesh, voxel, bbox)
    if isinstance(probe, geo.TriMesh) and probe.is_watertight():
        occ = geo.voxelize_solid(probe, voxel, bbox)
    else:
        occ = geo.voxelize_surface(probe, voxel, bbox)
    n = geo.shared_voxels(occ, solid)
    return n, n * (voxel * 100) ** 3


def intersect_volume(human, obj, object_pose, template=None, voxel: float = VOXEL) -> float:
    """Hand/object intersection volume in cm^3."""
    hand = body.hand_surface(np.asarray(human, dtype=np.float64), template)
    mesh = obj.mesh.transformed(np.asarray(object_pose, dtype=np.float64))
    return probe_volume(hand, mesh, voxel)[1]


def penetration_depth(human, obj, object_pose, template=None) -> float:
    """Deepest hand-surface point inside the object, in meters (0 if none)."""
    hand = body.hand_surface(np.asarray(human, dtype=np.float64), template).points
    local = geo.apply_rigid_inverse(np.asarray(object_pose, dtype=np.float64), hand)
    lo, hi = _bounds(obj.mesh.vertices)
    near = np.all((local >= lo) & (local <= hi), axis=1)
    if not near.any():
        return 0.0
    cand = local[near]
    inside = geo.point_in_mesh(obj.mesh, cand)
    if not inside.any():
        return 0.0
    return float(obj.index.query(cand[inside])[1].max())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class MetricReport:
    accuracy_top3: float
    fid: float
    diversity: float
    multimodality: float
    iv_cm3: float
    counts: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("accuracy_top3", "fid", "diversity", "multimodality", "iv_cm3"):
            v = getattr(self, k)
            if not (v >= 0.0):
                raise ContractViolation(f"metric {k} must be non-negative, got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["accuracy_top3", "fid", "diversity", "multimodality", "iv_cm3", "counts",
                 "config_fingerprint"],
    "properties": {
        "accuracy_top3": {"type": "number", "minimum": 0, "maximum": 1},
        "fid": {"type": "number", "minimum": 0},
        "diversity": {"type": "number", "minimum": 0},
        "multimodality": {"type": "number", "minimum": 0},
        "iv_cm3": {"type": "number", "minimum": 0},
        "counts": {"type": "object"},
        "config_fingerprint": {"type": "string"},
    },
}


def fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]
