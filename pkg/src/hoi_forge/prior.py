"""Text- and object-conditioned diffusion prior over the joint human/object pose state."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint, nn
from .autograd import ContractViolation
from .body import POSE_DIM, SLICES
from .diffusion import ConfigError, DiffusionSchedule, make_schedule, sample, training_loss
from .encoders import ConditionBundle, SetEncoder, StepEmbedding, TextEncoder
from .optim import AdamW
from .text import Vocab

STATE_DIM = POSE_DIM + 6
VARIANTS = ("single", "dual", "rm_enc", "rm")
_PART_KEYS = ("global_orient", "body_pose", "left_hand_pose", "right_hand_pose", "translation")


@dataclass
class PriorConfig:
    variant: str = "rm"
    d: int = 64
    depth: int = 2
    heads: int = 4
    d_ff: int = 128
    T: int = 100
    schedule: str = "cosine"
    n_points: int = 16
    human_tokens: int = 5
    dropout: float = 0.1
    cfg_scale: float = 2.5
    p_uncond: float = 0.1
    posterior_variance: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown prior variant '{self.variant}'")
        if self.human_tokens not in (1, 5):
            raise ConfigError("human pose is split into 1 or 5 tokens")

    @classmethod
    def full_scale(cls, **kw) -> "PriorConfig":
        return cls(**{"d": 512, "d_ff": 1024, "heads": 4, "T": 1000, **kw})


class Normalizer:
    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, x, floor: float = 1e-3) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(0), np.maximum(x.std(0), floor))

    def encode(self, x):
        return (x - self.mean) / self.std

    def decode(self, z):
        return z * self.std + self.mean


class CrossAttention(nn.Module):
    """Queries from one feature set, keys and values from another."""

    def __init__(self, d: int, heads: int, rng):
        self.heads = heads
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.q = nn.Linear(d, d, rng)
        self.k = nn.Linear(d, d, rng)
        self.v = nn.Linear(d, d, rng)
        self.o = nn.Linear(d, d, rng, bias=False)

    def __call__(self, x, memory) -> ag.Tensor:
        hq, hm = self.norm_q(x), self.norm_kv(memory)
        return self.o(ag.multi_head_attention(self.q(hq), self.k(hm), self.v(hm), self.heads))


class ReciprocalBlock(nn.Module):
    """Two-way feature exchange with a residual around each direction."""

    def __init__(self, d: int, heads: int, rng):
        self.h_from_o = CrossAttention(d, heads, rng)
        self.o_from_h = CrossAttention(d, heads, rng)

    def __call__(self, f_h, f_o) -> tuple[ag.Tensor, ag.Tensor]:
        if f_h.shape[-1] != f_o.shape[-1]:
            raise ContractViolation(f"feature widths differ: {f_h.shape[-1]} vs {f_o.shape[-1]}")
        return f_h + self.h_from_o(f_h, f_o), f_o + self.o_from_h(f_o, f_h)


def reciprocal_exchange(f_h, f_o, block: ReciprocalBlock):
    return block(ag.as_tensor(f_h), ag.as_tensor(f_o))


class DualBranchModel(nn.Module):
    def __init__(self, cfg: PriorConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d
        self.text = TextEncoder(vocab_size, d, rng)
        self.objset = SetEncoder(d, rng)
        self.step = StepEmbedding(d, rng)
        if cfg.human_tokens == 5:
            self.parts = [SLICES[k] for k in _PART_KEYS]
        else:
            self.parts = [slice(0, POSE_DIM)]
        widths = [s.stop - s.start for s in self.parts]
        self.h_in = [nn.Linear(w, d, rng) for w in widths]
        self.h_out = [nn.Linear(d, w, rng) for w in widths]
        self.o_in = nn.Linear(6, d, rng)
        self.o_out = nn.Linear(d, 6, rng)
        n_h = len(widths)
        # token-type embeddings: human parts, text, step | object, text, step, points
        self.h_type = ag.parameter(rng.normal(0, 0.02, size=(n_h + 2, d)))
        self.o_type = ag.parameter(rng.normal(0, 0.02, size=(4, d)))
        half = max(1, cfg.depth // 2)
        mk = lambda n: [nn.EncoderLayer(d, cfg.heads, cfg.d_ff, rng, cfg.dropout) for _ in range(n)]
        if cfg.variant == "single":
            self.joint_layers = mk(cfg.depth)
        else:
            self.h_layers_a, self.h_layers_b = mk(half), mk(cfg.depth - half)
            self.o_layers_a, self.o_layers_b = mk(half), mk(cfg.depth - half)
        if cfg.variant == "rm":
            self.exchange = ReciprocalBlock(d, cfg.heads, rng)
        elif cfg.variant == "rm_enc":
            self.exchange_enc = nn.EncoderLayer(d, cfg.heads, cfg.d_ff, rng, cfg.dropout)
        self.n_h = n_h

    # -- token construction ------------------------------------------------
    def _tokens(self, z, t, cond: ConditionBundle):
        z = ag.as_tensor(z)
        b = z.shape[0]
        text = self.text(cond.token_ids, cond.null_text)
        step = self.step(t)
        feats, _ = self.objset(cond.object_points)
        htoks = [self.h_in[i](z[:, s]) for i, s in enumerate(self.parts)]
        hseq = ag.stack(htoks + [text, step], axis=1) + self.h_type
        otok = self.o_in(z[:, POSE_DIM:])
        o_head = ag.stack([otok, text, step], axis=1) + self.o_type[:3]
        oseq = ag.concat([o_head, feats + self.o_type[3]], axis=1)
        return hseq, oseq

    def _run(self, layers, x, rng):
        for layer in layers:
            x = layer(x, rng)
        return x

    def features(self, z, t, cond: ConditionBundle, rng=None):
        hseq, oseq = self._tokens(z, t, cond)
        v = self.cfg.variant
        if v == "single":
            n = hseq.shape[1]
            x = self._run(self.joint_layers, ag.concat([hseq, oseq], axis=1), rng)
            return x[:, :n], x[:, n:]
        hseq = self._run(self.h_layers_a, hseq, rng)
        oseq = self._run(self.o_layers_a, oseq, rng)
        if v == "rm":
            hseq, oseq = self.exchange(hseq, oseq)
        elif v == "rm_enc":
            n = hseq.shape[1]
            x = self.exchange_enc(ag.concat([hseq, oseq], axis=1), rng)
            hseq, oseq = x[:, :n], x[:, n:]
        return self._run(self.h_layers_b, hseq, rng), self._run(self.o_layers_b, oseq, rng)

    def __call__(self, z, t, cond: ConditionBundle, rng=None) -> ag.Tensor:
        fh, fo = self.features(z, t, cond, rng)
        human = [self.h_out[i](fh[:, i]) for i in range(self.n_h)]
        return ag.concat(human + [self.o_out(fo[:, 0])], axis=1)


def denoise_pose(z_t, t, cond: ConditionBundle, model: DualBranchModel, rng=None) -> ag.Tensor:
    return model(z_t, np.asarray(t), cond, rng)


def ablation_variant(cfg: PriorConfig, vocab_size: int, rng) -> DualBranchModel:
    return DualBranchModel(cfg, vocab_size, rng)


# ---------------------------------------------------------------------------
# training and sampling
# ---------------------------------------------------------------------------
@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        rows = ["step,loss"] + [f"{s},{l:.17g}" for s, l in zip(self.steps, self.losses)]
        Path(path).write_text("\n".join(rows) + "\n")


def fit_denoiser(model: nn.Module, z_all, cond: ConditionBundle, sched: DiffusionSchedule,
                 steps: int, rng: np.random.Generator, batch: int, lr: float, p_uncond: float,
                 weight=None, weight_decay: float = 0.0, log_every: int = 50,
                 callback=None) -> TrainLog:
    """AdamW on the x0-MSE; ``weight`` (N, dim) optionally weights each target entry."""
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    log = TrainLog()
    model.train()
    acc, n_acc = 0.0, 0
    for step in range(1, steps + 1):
        idx = rng.choice(len(z_all), size=min(batch, len(z_all)), replace=False)
        c = cond.take(idx)
        w = None if weight is None else weight[idx]
        with ag.Tape() as tape:
            loss = training_loss(lambda z, t, cc: model(z, t, cc, rng), z_all[idx], c, sched, rng,
                                 p_uncond, weight=w, drop_condition=lambda cc, m: cc.with_null(m))
        opt.step(ag.backward(tape, loss, opt.params))
        acc += float(loss.data)
        n_acc += 1
        if step % log_every == 0 or step == steps:
            log.steps.append(step)
            log.losses.append(acc / n_acc)
            acc, n_acc = 0.0, 0
            if callback is not None:
                callback(step, log.losses[-1])
    model.eval()
    return log


class PosePrior:
    """Model + normalizer + vocabulary + schedule."""

    def __init__(self, cfg: PriorConfig, vocab: Vocab, norm: Normalizer, seed: int = 0):
        self.cfg, self.vocab, self.norm = cfg, vocab, norm
        self.model = DualBranchModel(cfg, len(vocab), np.random.default_rng(seed))
        self.sched: DiffusionSchedule = make_schedule(cfg.T, cfg.schedule)

    def denoiser(self, cond: ConditionBundle, rng=None):
        def f(z, t, c):
            bundle = cond if c is not None else cond.null()
            return self.model(z, t, bundle, rng)
        return f

    def fit(self, states, cond: ConditionBundle, steps: int, rng: np.random.Generator,
            batch: int = 32, lr: float = 1e-3, weight_decay: float = 0.0,
            log_every: int = 50, callback=None) -> TrainLog:
        z_all = self.norm.encode(np.asarray(states, dtype=np.float64))
        return fit_denoiser(self.model, z_all, cond, self.sched, steps, rng, batch, lr,
                            self.cfg.p_uncond, weight_decay=weight_decay, log_every=log_every,
                            callback=callback)

    def sample(self, cond: ConditionBundle, rng: np.random.Generator, guidance=None,
               cfg_scale: float | None = None, z_T=None) -> np.ndarray:
        """Data-space states (B, 165). ``guidance`` acts on normalized means."""
        self.model.eval()
        s = self.cfg.cfg_scale if cfg_scale is None else cfg_scale
        z = sample(self.denoiser(cond), cond, self.sched, (len(cond), STATE_DIM), rng,
                   cfg_scale=s, guidance=guidance, posterior_variance=self.cfg.posterior_variance,
                   x_T=z_T)
        return self.norm.decode(z)

    # -- persistence: <stem>.hoif tensors + <stem>.json config ---------------
    def save(self, path) -> None:
        path = Path(path)
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors["norm.mean"], tensors["norm.std"] = self.norm.mean, self.norm.std
        checkpoint.save(path.with_suffix(".hoif"), tensors)
        meta = {"kind": "prior", "config": asdict(self.cfg), "vocab": self.vocab.tokens}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "PosePrior":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("kind") != "prior":
            raise ConfigError(f"{path} is not a prior checkpoint")
        tensors = checkpoint.load(path.with_suffix(".hoif"))
        vocab = Vocab(meta["vocab"][1:])
        obj = cls(PriorConfig(**meta["config"]), vocab,
                  Normalizer(tensors["norm.mean"], tensors["norm.std"]))
        obj.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        return obj
