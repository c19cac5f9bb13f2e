"""Central-difference checks for the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import geometry as geo
from . import nn
from .body import N_CONTACT, POSE_DIM, default_template
from .refiner import ContactTargets, GuidanceConfig, g_total_rows

EPS = 1e-6
TOL = 1e-4


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    configs: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.op:<14} max rel err {self.max_rel_err:.3e} over {self.configs} configs"


def rel_err(a, b, floor: float = 1e-7) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def numeric_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    xf, gf = x.reshape(-1), g.reshape(-1)
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + eps
        hi = f(x)
        xf[i] = old - eps
        lo = f(x)
        xf[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_fn(fn, arrays, eps: float = EPS) -> float:
    """Max relative error over all inputs of a scalar Tensor function."""
    _, grads = ag.grad(fn, *arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = list(arrays)
            args[k] = x
            with ag.no_grad():
                return float(fn(*[ag.as_tensor(np.asarray(v)) for v in args]).data)
        worst = max(worst, rel_err(grads[k], numeric_grad(f, a, eps)))
    return worst


# ---------------------------------------------------------------------------
# ad-core layers on small random inputs
# ---------------------------------------------------------------------------
def _layer_cases(rng: np.random.Generator):
    d, n = 6, 4
    W = rng.standard_normal((n, d))  # random projection to a scalar loss
    lin = nn.Linear(d, d, rng)
    gru = nn.GRU(3, 5, rng)
    x = rng.standard_normal((n, d))
    head = rng.standard_normal((2, 5))
    yield "linear", lambda a, w, b: ag.tsum((ag.matmul(a, w) + b) * W), \
        [x, lin.weight.data.copy(), lin.bias.data.copy()]
    yield "layer_norm", lambda a, g, b: ag.tsum(ag.layer_norm(a, g, b) * W), \
        [x, 1 + 0.1 * rng.standard_normal(d), 0.1 * rng.standard_normal(d)]
    yield "gelu", lambda a: ag.tsum(ag.gelu(a) * W), [x]
    yield "softmax", lambda a: ag.tsum(ag.softmax(a, axis=-1) * W), [x]
    yield "log_softmax", lambda a: ag.tsum(ag.log_softmax(a, axis=-1) * W), [x]
    q, k, v = (rng.standard_normal((1, 3, 4)) for _ in range(3))
    Wm = rng.standard_normal((1, 3, 4))
    yield "attention", lambda q, k, v: ag.tsum(ag.multi_head_attention(q, k, v, 2) * Wm), [q, k, v]
    seq = rng.standard_normal((2, 4, 3))
    for pool in ("last", "mean"):
        def gru_fn(s, wx, bx, wh, pool=pool):
            gru.wx.weight, gru.wx.bias, gru.wh.weight = wx, bx, wh
            return ag.tsum(gru(s, pool=pool) * head)
        yield f"gru_{pool}", gru_fn, [seq, gru.wx.weight.data.copy(), gru.wx.bias.data.copy(),
                                      gru.wh.weight.data.copy()]
    w = rng.normal(0, 1.0, size=(2, 3))
    Wr = rng.standard_normal((2, 3, 3))
    yield "rotvec", lambda a: ag.tsum(geo.rotvec_to_matrix_t(a) * Wr), [w]


def check_layers(n_configs: int, rng: np.random.Generator, tol: float) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for _ in range(n_configs):
        for name, fn, arrays in _layer_cases(rng):
            worst[name] = max(worst.get(name, 0.0), check_fn(fn, arrays))
    return [CheckResult(k, v, n_configs, tol) for k, v in worst.items()]


# ---------------------------------------------------------------------------
# guidance terms through forward kinematics and the object transform
# ---------------------------------------------------------------------------
def random_scene(rng: np.random.Generator, lean: float = 0.0):
    """A random pose, an object near one hand, and 1-6 random active contacts."""
    from .body import hand_joints
    human = rng.normal(0, 0.25, size=POSE_DIM)
    human[156:159] = rng.normal(0, 0.3, size=3) + [0.0, 0.0, 0.9]
    if lean:
        human[:3] = rng.normal(0, lean, size=3)
    side = int(rng.integers(2))
    hj = hand_joints(human)
    wrist = hj.positions[15 * side + 4]
    obj = np.concatenate([rng.normal(0, 1.0, 3), wrist + rng.normal(0, 0.05, 3)])
    k = int(rng.integers(1, 7))
    idx = rng.choice(np.arange(15 * side, 15 * side + 15), size=k, replace=False)
    pts = np.zeros((1, N_CONTACT, 3))
    nrm = np.zeros((1, N_CONTACT, 3))
    mask = np.zeros((1, N_CONTACT))
    pts[0, idx] = rng.normal(0, 0.03, size=(k, 3))
    n = rng.standard_normal((k, 3))
    nrm[0, idx] = n / np.linalg.norm(n, axis=1, keepdims=True)
    mask[0, idx] = 1.0
    return np.concatenate([human, obj]), ContactTargets(pts, nrm, mask)


def _rows_value(states, targets: ContactTargets, cfg: GuidanceConfig, template) -> np.ndarray:
    b = len(states)
    tg = ContactTargets(np.repeat(targets.points, b, 0), np.repeat(targets.normals, b, 0),
                        np.repeat(targets.mask, b, 0))
    with ag.no_grad():
        v, _ = g_total_rows(states[:, :POSE_DIM], states[:, POSE_DIM:], tg, cfg, template)
    return v.data


def check_state_grad(state, targets: ContactTargets, cfg: GuidanceConfig, coords,
                     template=None, eps: float = EPS) -> float:
    from .refiner import objective_grad
    template = template or default_template()
    _, g = objective_grad(state[None], targets, cfg, template)
    coords = np.asarray(coords)
    rows = np.repeat(state[None], 2 * len(coords), 0)
    rows[np.arange(len(coords)), coords] += eps
    rows[len(coords) + np.arange(len(coords)), coords] -= eps
    v = _rows_value(rows, targets, cfg, template)
    fd = (v[:len(coords)] - v[len(coords):]) / (2 * eps)
    return rel_err(g[0, coords], fd)


_OBJ = POSE_DIM + np.arange(6)
_TRANS = np.arange(156, 159)
# pelvis, spine, collars, shoulders, elbows, wrists
_ARMS = (3 * np.array([0, 3, 6, 9, 13, 14, 16, 17, 18, 19, 20, 21])[:, None] + np.arange(3)).ravel()


def check_guidance(n_configs: int, rng: np.random.Generator, tol: float,
                   band: float = 1e-6) -> list[CheckResult]:
    template = default_template()
    con = GuidanceConfig(use_norm=False, use_balance=False)
    nrm = GuidanceConfig(alpha=1.0, use_con=False, use_balance=False)
    bal = GuidanceConfig(use_con=False, use_norm=False, beta=1.0)
    tot = GuidanceConfig()
    worst = {"g_con": 0.0, "g_norm": 0.0, "g_balance": 0.0, "g_total": 0.0}
    for _ in range(n_configs):
        state, tg = random_scene(rng)
        chain = np.concatenate([_ARMS, rng.choice(np.arange(66, 156), size=12, replace=False)])
        worst["g_con"] = max(worst["g_con"], check_state_grad(
            state, tg, con, np.concatenate([_TRANS, _OBJ, chain]), template))
        worst["g_norm"] = max(worst["g_norm"], check_state_grad(
            state, tg, nrm, np.concatenate([_OBJ[:3], chain]), template))
        worst["g_total"] = max(worst["g_total"], check_state_grad(
            state, tg, tot, np.concatenate([_TRANS, _OBJ, chain]), template))
        # balance needs the hip outside the support by more than the band
        while True:
            s2, tg2 = random_scene(rng, lean=0.3)
            d = _rows_value(s2[None], tg2, bal, template)[0]
            if d > 10 * band + 10 * EPS:
                break
        legs = np.concatenate([np.arange(0, 3), np.arange(3, 18), _TRANS])
        worst["g_balance"] = max(worst["g_balance"], check_state_grad(s2, tg2, bal, legs, template))
    return [CheckResult(k, v, n_configs, tol) for k, v in worst.items()]


def fd_suite(n_configs: int = 100, tol: float = TOL, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return check_layers(n_configs, rng, tol) + check_guidance(n_configs, rng, tol)
