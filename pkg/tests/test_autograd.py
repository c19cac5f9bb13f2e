import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hoi_forge import autograd as ag
from hoi_forge import checkpoint, nn
from hoi_forge.autograd import ContractViolation, NumericFailure
from hoi_forge.gradcheck import check_fn
from hoi_forge.optim import AdamW

finite = st.floats(-3, 3, allow_nan=False, width=64)


def test_sum_of_squares_grad():
    _, (g,) = ag.grad(lambda w: ag.tsum(w * w), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_constant_loss_has_zero_grads():
    w = ag.parameter(np.ones(3))
    with ag.Tape() as tape:
        loss = ag.as_tensor(np.array(5.0)) + 0.0 * ag.tsum(ag.as_tensor(np.ones(2)))
    grads = ag.backward(tape, loss, [w])
    np.testing.assert_array_equal(grads[w], 0.0)


def test_non_scalar_loss_rejected():
    w = ag.parameter(np.ones(3))
    with ag.Tape() as tape:
        y = w * 2.0
    with pytest.raises(ContractViolation):
        ag.backward(tape, y, [w])


def test_nan_gradient_names_operation():
    w = ag.parameter(np.array([0.0, 1.0]))
    with ag.Tape() as tape:
        loss = ag.tsum(ag.sqrt(w))
    with pytest.raises(NumericFailure) as err:
        ag.backward(tape, loss, [w])
    assert "sqrt" in str(err.value)


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((2, 3, 8))
    k = rng.standard_normal((2, 1, 8))
    v = rng.standard_normal((2, 1, 8))
    out = ag.multi_head_attention(q, k, v, heads=2).data
    np.testing.assert_allclose(out, np.repeat(v, 3, axis=1), atol=1e-12)


def test_attention_indivisible_heads():
    x = np.zeros((1, 2, 6))
    with pytest.raises(Exception) as err:
        ag.multi_head_attention(x, x, x, heads=4)
    assert "head" in str(err.value).lower()


@given(st.integers(0, 10_000))
def test_attention_key_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((1, 4, 6)) for _ in range(3))
    perm = rng.permutation(4)
    a = ag.multi_head_attention(q, k, v, 3).data
    b = ag.multi_head_attention(q, k[:, perm], v[:, perm], 3).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_layer_norm_examples():
    zero = ag.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4)).data
    np.testing.assert_array_equal(zero, 0.0)
    pm = ag.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-12).data
    np.testing.assert_allclose(pm, [[1.0, -1.0]], atol=1e-9)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_layer_norm_rows_standardized(x):
    x = x + np.arange(5) * 0.5  # keep rows from being constant
    out = ag.layer_norm(x, np.ones(5), np.zeros(5), eps=1e-12).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-9)


def test_gelu_values():
    g = ag.gelu(np.array([0.0, 10.0])).data
    assert g[0] == 0.0
    assert abs(g[1] - 10.0) < 1e-6


@given(arrays(np.float64, (2, 4), elements=finite))
def test_softmax_is_distribution(x):
    p = ag.softmax(x, axis=-1).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.log(p), ag.log_softmax(x, axis=-1).data, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_small_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    W = rng.standard_normal((3, 4))
    fns = [
        lambda a: ag.tsum(ag.exp(a) * W),
        lambda a: ag.tsum(ag.log(a) * W),
        lambda a: ag.tsum(ag.tanh(a) * ag.sigmoid(a) * W),
        lambda a: ag.tsum(ag.power(a, 1.5) / (a + 1.0) * W),
        lambda a: ag.tsum(ag.reduce_max(a, axis=1) * W[:, 0]),
        lambda a: ag.tsum(ag.transpose(a) @ ag.as_tensor(W)),
    ]
    for fn in fns:
        assert check_fn(fn, [x]) < 1e-6


def test_adamw_first_step():
    p = ag.parameter(np.array(1.0))
    opt = AdamW([p], lr=1e-4, weight_decay=0.0)
    opt.step({p: np.array(1.0)})
    assert abs((1.0 - p.data) - 1e-4) <= 1e-6


def test_adamw_zero_grad_no_decay_is_noop():
    p = ag.parameter(np.array([0.3, -2.0]))
    opt = AdamW([p], lr=1e-2)
    for _ in range(5):
        opt.step({p: np.zeros(2)})
    np.testing.assert_array_equal(p.data, [0.3, -2.0])


def test_adamw_weight_decay_is_decoupled():
    p = ag.parameter(np.array([2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step({p: np.zeros(1)})
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])


def test_adamw_shape_mismatch():
    p = ag.parameter(np.zeros(3))
    with pytest.raises(ContractViolation):
        AdamW([p]).step({p: np.zeros(2)})


def test_module_state_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    enc = nn.Encoder(2, 8, 2, 16, rng)
    state = enc.state_dict()
    checkpoint.save(tmp_path / "m.hoif", state)
    back = checkpoint.load(tmp_path / "m.hoif")
    assert list(back) == list(state)
    for k in state:
        assert back[k].tobytes() == np.asarray(state[k], dtype="<f8").tobytes()
    raw = (tmp_path / "m.hoif").read_bytes()
    assert checkpoint.dumps(back) == raw


def test_checkpoint_bad_magic_offset_zero():
    buf = bytearray(checkpoint.dumps({"a": np.ones(2)}))
    buf[0] ^= 0xFF
    with pytest.raises(checkpoint.FormatError) as err:
        checkpoint.loads(bytes(buf))
    assert err.value.offset == 0


def test_checkpoint_truncated_payload():
    buf = checkpoint.dumps({"a": np.ones(4)})
    with pytest.raises(checkpoint.FormatError) as err:
        checkpoint.loads(buf[:-3])
    assert err.value.offset > 0


def test_cross_entropy_matches_manual():
    logits = np.array([[2.0, 0.0, -1.0], [0.1, 0.2, 0.3]])
    labels = np.array([0, 2])
    got = float(nn.cross_entropy(logits, labels).data)
    lse = np.log(np.exp(logits).sum(1))
    assert abs(got - np.mean(lse - logits[[0, 1], labels])) < 1e-12
