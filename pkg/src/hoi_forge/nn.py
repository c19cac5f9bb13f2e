"""Neural layers built on :mod:`hoi_forge.autograd`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Minimal parameter container; children and parameters found by attribute scan."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = ag.parameter(_glorot(rng, d_in, d_out))
        self.bias = ag.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ag.parameter(np.ones(d))
        self.bias = ag.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 1.0):
        self.table = ag.parameter(rng.normal(0.0, scale, size=(n, d)))

    def __call__(self, idx) -> Tensor:
        return ag.getitem(self.table, np.asarray(idx))


class Dropout(Module):
    """Inverted dropout; masks drawn from the generator handed to ``__call__``."""

    def __init__(self, rate: float):
        self.rate = rate

    def __call__(self, x, rng: np.random.Generator | None) -> Tensor:
        if not self.training or self.rate == 0.0 or rng is None:
            return ag.as_tensor(x)
        keep = rng.random(x.shape) >= self.rate
        return x * (keep / (1.0 - self.rate))


class MultiHeadAttention(Module):
    """Projected attention. Query, key and value sources may differ."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, xq, xk=None, xv=None, mask=None) -> Tensor:
        xk = xq if xk is None else xk
        xv = xk if xv is None else xv
        out = ag.multi_head_attention(self.q(xq), self.k(xk), self.v(xv), self.heads, mask)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer (self-attention + GeLU feed-forward)."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.1):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)
        self.drop = Dropout(dropout)

    def __call__(self, x, rng=None, mask=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, mask=mask), rng)
        x = x + self.drop(self.ff(self.norm2(x)), rng)
        return x


class Encoder(Module):
    def __init__(self, depth: int, d: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.1):
        self.layers = [EncoderLayer(d, heads, d_ff, rng, dropout) for _ in range(depth)]

    def __call__(self, x, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, rng)
        return x


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRU(Module):
    """Single-layer GRU over a (batch, time, features) sequence.

    Returns the last state, or the time-average of all states with
    ``pool="mean"``. Runs as one fused tape op with explicit backpropagation
    through time.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_hidden = d_hidden
        self.wx = Linear(d_in, 3 * d_hidden, rng)
        self.wh = Linear(d_hidden, 3 * d_hidden, rng, bias=False)

    def __call__(self, seq, pool: str = "last") -> Tensor:
        if pool not in ("last", "mean"):
            raise ValueError(f"unknown pooling '{pool}'")
        seq = ag.as_tensor(seq)
        b, steps, d_in = seq.shape
        hd = self.d_hidden
        Wx, bx, Wh = self.wx.weight.data, self.wx.bias.data, self.wh.weight.data
        xs = (seq.data.reshape(-1, d_in) @ Wx + bx).reshape(b, steps, 3 * hd)
        h = np.zeros((b, hd))
        cache = []
        total = np.zeros((b, hd))
        for t in range(steps):
            hh = h @ Wh
            z = _sig(xs[:, t, :hd] + hh[:, :hd])
            r = _sig(xs[:, t, hd:2 * hd] + hh[:, hd:2 * hd])
            hn = hh[:, 2 * hd:]
            n = np.tanh(xs[:, t, 2 * hd:] + r * hn)
            cache.append((h, z, r, n, hn))
            h = (1.0 - z) * n + z * h
            total += h
        out = h if pool == "last" else total / steps

        def vjp(g):
            dxs = np.empty((b, steps, 3 * hd))
            dWh = np.zeros_like(Wh)
            dh = np.zeros((b, hd))
            for t in range(steps - 1, -1, -1):
                h_prev, z, r, n, hn = cache[t]
                if pool == "mean":
                    dh = dh + g / steps
                elif t == steps - 1:
                    dh = dh + g
                dn = dh * (1.0 - z) * (1.0 - n * n)
                dz = dh * (h_prev - n) * z * (1.0 - z)
                dr = dn * hn * r * (1.0 - r)
                dhh = np.concatenate([dz, dr, dn * r], axis=1)
                dxs[:, t] = np.concatenate([dz, dr, dn], axis=1)
                dWh += h_prev.T @ dhh
                dh = dh * z + dhh @ Wh.T
            flat = dxs.reshape(-1, 3 * hd)
            dseq = (flat @ Wx.T).reshape(seq.shape) if seq.requires_grad else None
            return dseq, seq.data.reshape(-1, d_in).T @ flat, flat.sum(0), dWh

        return ag.custom("gru", out, (seq, self.wx.weight, self.wx.bias, self.wh.weight), vjp)


def sinusoidal_embedding(t: np.ndarray, d: int) -> np.ndarray:
    """Transformer-style position encoding of integer steps ``t`` -> (len(t), d)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if d % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def mse(pred, target, weight=None) -> Tensor:
    diff = pred - ag.as_tensor(target)
    sq = diff * diff
    if weight is not None:
        sq = sq * weight
    return ag.mean(sq)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    lp = ag.log_softmax(logits, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    picked = lp[np.arange(len(labels)), labels]
    return -ag.mean(picked)
