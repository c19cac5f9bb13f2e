"""Hand-joint contact anchors: ground truth, thresholding, grasp validity."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint, nn
from . import geometry as geo
from .body import N_CONTACT, THUMB_CONTACT, HandJoints30
from .text import AnnotationError

D_CONTACT = 0.01
TAU = 0.8


def hand_indicator(prompt: str) -> tuple[int, int]:
    """(left, right) flags from the hand words of a prompt; 'both' wins, then 'left'."""
    if not prompt or not prompt.strip():
        raise AnnotationError("empty prompt")
    words = set(prompt.lower().split())
    if "both" in words:
        return 1, 1
    if "left" in words:
        return 1, 0
    if "right" in words:
        return 0, 1
    raise AnnotationError(f"no hand type in prompt {prompt!r}")


def extract_contact_truth(joints, obj, object_pose, d_contact: float = D_CONTACT) -> np.ndarray:
    """(30, 4) closest canonical object points to each joint, plus a 0/1 contact label."""
    pos = joints.positions if isinstance(joints, HandJoints30) else joints
    pos = np.asarray(pos, dtype=np.float64).reshape(N_CONTACT, 3)
    local = geo.apply_rigid_inverse(np.asarray(object_pose, dtype=np.float64), pos)
    points = obj.points if hasattr(obj, "points") else np.asarray(obj)
    index = obj.index if hasattr(obj, "index") else geo.NearestIndex(points)
    idx, dist = index.query(local)
    out = np.empty((N_CONTACT, 4))
    out[:, :3] = points[idx]
    # rigid motions preserve distance, so canonical-frame distance is the world distance
    out[:, 3] = (dist < d_contact).astype(np.float64)
    return out


@dataclass
class Selection:
    indices: np.ndarray
    points: np.ndarray
    empty: bool


def select_contacts(y, tau: float = TAU) -> Selection:
    y = np.asarray(y, dtype=np.float64).reshape(N_CONTACT, 4)
    if not 0.0 <= tau < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    idx = np.flatnonzero(y[:, 3] >= tau)
    return Selection(idx, y[idx, :3].copy(), len(idx) == 0)


def stable_grasp_check(active) -> bool:
    """A thumb joint and a non-thumb joint of the same hand are both active."""
    s = {int(i) for i in active}
    for base in (0, 15):
        thumb = any(base + k in s for k in range(3))
        other = any(base + k in s for k in range(3, 15))
        if thumb and other:
            return True
    return False


# ---------------------------------------------------------------------------
# contact diffusion model
# ---------------------------------------------------------------------------
HAND_SLICE = slice(66, 156)


def masked_hand(human, indicator) -> np.ndarray:
    """(B, 90) left+right hand pose with the inactive side zeroed."""
    h = np.array(np.asarray(human, dtype=np.float64)[..., HAND_SLICE], dtype=np.float64)
    ind = np.asarray(indicator, dtype=np.float64).reshape(-1, 2)
    h = h.reshape(-1, 90)
    h[:, :45] *= ind[:, :1]
    h[:, 45:] *= ind[:, 1:]
    return h


def side_mask(indicator) -> np.ndarray:
    """(B, 30) 1 for joints of an active hand."""
    ind = np.asarray(indicator, dtype=np.float64).reshape(-1, 2)
    return np.repeat(ind, 15, axis=1)


@dataclass
class ContactConfig:
    d: int = 64
    depth: int = 2
    heads: int = 4
    d_ff: int = 128
    T: int = 100
    schedule: str = "cosine"
    n_points: int = 16
    dropout: float = 0.1
    cfg_scale: float = 0.0
    p_uncond: float = 0.1
    posterior_variance: bool = False
    noncontact_weight: float = 0.1
    squash_gain: float = 4.0
    d_contact: float = D_CONTACT

    @classmethod
    def full_scale(cls, **kw) -> "ContactConfig":
        return cls(**{"d": 512, "d_ff": 1024, "T": 500, **kw})


class ContactNet(nn.Module):
    """Encoder over 30 contact tokens followed by text, step, hand and object tokens."""

    def __init__(self, cfg: ContactConfig, vocab_size: int, rng: np.random.Generator):
        from .encoders import SetEncoder, StepEmbedding, TextEncoder
        self.cfg = cfg
        d = cfg.d
        self.text = TextEncoder(vocab_size, d, rng)
        self.objset = SetEncoder(d, rng)
        self.step = StepEmbedding(d, rng)
        self.hand1 = nn.Linear(90, d, rng)
        self.hand2 = nn.Linear(d, d, rng)
        self.y_in = nn.Linear(4, d, rng)
        self.y_out = nn.Linear(d, 4, rng)
        self.joint_emb = ag.parameter(rng.normal(0, 0.02, size=(N_CONTACT, d)))
        self.type_emb = ag.parameter(rng.normal(0, 0.02, size=(4, d)))
        self.layers = [nn.EncoderLayer(d, cfg.heads, cfg.d_ff, rng, cfg.dropout)
                       for _ in range(cfg.depth)]

    def __call__(self, y, t, cond, rng=None) -> ag.Tensor:
        y = ag.reshape(ag.as_tensor(y), (-1, N_CONTACT, 4))
        toks = self.y_in(y) + self.joint_emb
        hand = self.hand2(ag.gelu(self.hand1(cond.hand)))
        head = ag.stack([self.text(cond.token_ids, cond.null_text), self.step(t), hand], axis=1)
        feats, _ = self.objset(cond.object_points)
        x = ag.concat([toks, head + self.type_emb[:3], feats + self.type_emb[3]], axis=1)
        for layer in self.layers:
            x = layer(x, rng)
        return ag.reshape(self.y_out(x[:, :N_CONTACT]), (-1, N_CONTACT * 4))


def denoise_contact(y_t, t, cond, model: ContactNet, rng=None) -> ag.Tensor:
    return model(y_t, np.asarray(t), cond, rng)


class ContactPredictor:
    """Contact model with its position normalizer; probabilities live in [-1, 1] while diffusing."""

    def __init__(self, cfg: ContactConfig, vocab, pos_mean, pos_std, seed: int = 0):
        from .diffusion import make_schedule
        self.cfg, self.vocab = cfg, vocab
        self.pos_mean = np.asarray(pos_mean, dtype=np.float64).reshape(N_CONTACT, 3)
        self.pos_std = np.asarray(pos_std, dtype=np.float64).reshape(N_CONTACT, 3)
        self.model = ContactNet(cfg, len(vocab), np.random.default_rng(seed))
        self.sched = make_schedule(cfg.T, cfg.schedule)

    @classmethod
    def for_data(cls, cfg: ContactConfig, vocab, targets, seed: int = 0) -> "ContactPredictor":
        pos = np.asarray(targets, dtype=np.float64).reshape(-1, N_CONTACT, 4)[..., :3]
        return cls(cfg, vocab, pos.mean(0), np.maximum(pos.std(0), 1e-3), seed)

    def encode(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1, N_CONTACT, 4)
        z = np.empty_like(y)
        z[..., :3] = (y[..., :3] - self.pos_mean) / self.pos_std
        z[..., 3] = 2.0 * y[..., 3] - 1.0
        return z.reshape(-1, N_CONTACT * 4)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(-1, N_CONTACT, 4)
        y = np.empty_like(z)
        y[..., :3] = z[..., :3] * self.pos_std + self.pos_mean
        y[..., 3] = 1.0 / (1.0 + np.exp(-self.cfg.squash_gain * z[..., 3]))
        return np.clip(y, [-np.inf, -np.inf, -np.inf, 0.0], [np.inf, np.inf, np.inf, 1.0])

    def loss_weight(self, targets) -> np.ndarray:
        y = np.asarray(targets, dtype=np.float64).reshape(-1, N_CONTACT, 4)
        w = np.ones_like(y)
        w[..., :3] = np.where(y[..., 3:] > 0.5, 1.0, self.cfg.noncontact_weight)
        return w.reshape(-1, N_CONTACT * 4)

    def fit(self, targets, cond, steps: int, rng: np.random.Generator, batch: int = 32,
            lr: float = 1e-3, log_every: int = 50, callback=None):
        from .prior import fit_denoiser
        return fit_denoiser(self.model, self.encode(targets), cond, self.sched, steps, rng, batch,
                            lr, self.cfg.p_uncond, weight=self.loss_weight(targets),
                            log_every=log_every, callback=callback)

    def denoiser(self, cond, rng=None):
        def f(z, t, c):
            return self.model(z, t, cond if c is not None else cond.null(), rng)
        return f

    def predict(self, cond, rng: np.random.Generator, cfg_scale: float | None = None) -> np.ndarray:
        """(B, 30, 4) contact records with probabilities in [0, 1]."""
        from .diffusion import sample
        self.model.eval()
        s = self.cfg.cfg_scale if cfg_scale is None else cfg_scale
        z = sample(self.denoiser(cond), cond, self.sched, (len(cond), N_CONTACT * 4), rng,
                   cfg_scale=s, posterior_variance=self.cfg.posterior_variance)
        return self.decode(z)

    def save(self, path) -> None:
        path = Path(path)
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors["pos.mean"], tensors["pos.std"] = self.pos_mean, self.pos_std
        checkpoint.save(path.with_suffix(".hoif"), tensors)
        meta = {"kind": "contact", "config": asdict(self.cfg), "vocab": self.vocab.tokens}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "ContactPredictor":
        from .diffusion import ConfigError
        from .text import Vocab
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("kind") != "contact":
            raise ConfigError(f"{path} is not a contact checkpoint")
        tensors = checkpoint.load(path.with_suffix(".hoif"))
        obj = cls(ContactConfig(**meta["config"]), Vocab(meta["vocab"][1:]),
                  tensors["pos.mean"], tensors["pos.std"])
        obj.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        return obj
