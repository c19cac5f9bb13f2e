"""Condition encoders shared by the pose prior and the contact predictor."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import ContractViolation
from .text import Vocab


def farthest_point_subsample(points, n: int) -> np.ndarray:
    """``n`` centered points chosen by farthest-point sampling.

    The points are first put in lexicographic order and every argmax takes the
    first hit, so the result depends on the point set only, not its order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < n:
        raise ContractViolation(f"set encoder needs at least {n} points, got {len(pts)}")
    pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
    pts = pts - pts.mean(0)
    chosen = np.empty(n, dtype=np.int64)
    d = np.einsum("ij,ij->i", pts, pts)
    chosen[0] = int(np.argmax(d))
    d = np.full(len(pts), np.inf)
    for i in range(1, n):
        diff = pts - pts[chosen[i - 1]]
        d = np.minimum(d, np.einsum("ij,ij->i", diff, diff))
        chosen[i] = int(np.argmax(d))
    return pts[chosen]


@dataclass
class ConditionBundle:
    """Per-row conditioning inputs. ``null_text`` rows use the learned null token."""

    token_ids: list[list[int]]
    object_points: np.ndarray          # (B, N_s, 3) centered subsample
    null_text: np.ndarray              # (B,) bool
    hand: np.ndarray | None = None     # (B, 90) masked hand pose, contact stage only

    def __len__(self) -> int:
        return len(self.token_ids)

    def take(self, idx) -> "ConditionBundle":
        idx = np.asarray(idx)
        return ConditionBundle([self.token_ids[i] for i in idx], self.object_points[idx],
                               self.null_text[idx], None if self.hand is None else self.hand[idx])

    def null(self) -> "ConditionBundle":
        return replace(self, null_text=np.ones(len(self), dtype=bool))

    def with_null(self, mask) -> "ConditionBundle":
        return replace(self, null_text=self.null_text | np.asarray(mask, dtype=bool))


def make_condition(prompts, clouds, vocab: Vocab, n_points: int, hand=None,
                   cache: dict | None = None) -> ConditionBundle:
    """Bundle prompts and object clouds; subsamples are cached by object identity."""
    cache = {} if cache is None else cache
    subs = []
    for c in clouds:
        key = id(c)
        if key not in cache:
            cache[key] = (c, farthest_point_subsample(c, n_points))
        subs.append(cache[key][1])
    ids = [vocab.ids(p) for p in prompts]
    if any(len(i) == 0 for i in ids):
        raise ContractViolation("empty prompt")
    return ConditionBundle(ids, np.stack(subs), np.zeros(len(ids), dtype=bool),
                           None if hand is None else np.asarray(hand, dtype=np.float64))


class TextEncoder(nn.Module):
    """Mean of learned token rows, linearly projected; row 0 is the shared unknown token."""

    def __init__(self, vocab_size: int, d: int, rng):
        self.table = ag.parameter(rng.normal(0.0, 1.0, size=(vocab_size, d)))
        self.proj = nn.Linear(d, d, rng)
        self.null = ag.parameter(rng.normal(0.0, 1.0, size=(d,)))

    def __call__(self, token_ids, null_mask=None) -> ag.Tensor:
        b, v = len(token_ids), self.table.shape[0]
        avg = np.zeros((b, v))
        for r, ids in enumerate(token_ids):
            if not ids:
                raise ContractViolation("empty prompt")
            np.add.at(avg[r], np.minimum(ids, v - 1), 1.0 / len(ids))
        emb = self.proj(ag.matmul(avg, self.table))
        if null_mask is not None and np.any(null_mask):
            nb = ag.broadcast_to(self.null, emb.shape)
            emb = ag.where(np.asarray(null_mask)[:, None], nb, emb)
        return emb


class SetEncoder(nn.Module):
    """Per-point MLP on centered coordinates with a max-pooled summary."""

    def __init__(self, d: int, rng, hidden: int | None = None):
        h = hidden or d
        self.fc1 = nn.Linear(3, h, rng)
        self.fc2 = nn.Linear(h, d, rng)

    def __call__(self, points) -> tuple[ag.Tensor, ag.Tensor]:
        # scale meters to roughly unit range
        f = self.fc2(ag.gelu(self.fc1(ag.as_tensor(np.asarray(points) * 20.0))))
        return f, ag.reduce_max(f, axis=-2)


class StepEmbedding(nn.Module):
    def __init__(self, d: int, rng):
        self.d = d
        self.fc1 = nn.Linear(d, d, rng)
        self.fc2 = nn.Linear(d, d, rng)

    def __call__(self, t) -> ag.Tensor:
        return self.fc2(ag.gelu(self.fc1(nn.sinusoidal_embedding(t, self.d))))
