import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sliceprof import tensorcore as tc
from sliceprof.tensorcore import Tensor

from oracles import central_difference, conv1d_naive, largest_singular_value, rel_error


def _grad(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with tc.Tape() as tape:
        out = fn(*ts)
    return out, tc.backward(tape, out, ts)


# --- forward examples ------------------------------------------------------

def conv(x, k):
    x = Tensor(np.asarray(x, float).reshape(1, 1, -1))
    k = Tensor(np.asarray(k, float).reshape(1, 1, -1))
    return tc.conv1d_valid(x, k).data.ravel().tolist()


def test_conv_examples():
    assert conv([1, 2, 3, 4], [1]) == [1, 2, 3, 4]
    assert conv([1, 2, 3, 4], [1, 1]) == [3, 5, 7]
    assert conv([0, 0, 1, 0, 0], [0.25, 0.5, 0.25]) == [0.25, 0.5, 0.25]


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        tc.conv1d_valid(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 3, 2))))
    with pytest.raises(ValueError, match="shorter"):
        tc.conv1d_valid(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_naive(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 3, 17))
    w = rng.uniform(-1, 1, (4, 3, 5))
    got = tc.conv1d_valid(Tensor(x), Tensor(w)).data
    assert np.abs(got - conv1d_naive(x, w)).max() <= 1e-12


def test_downsample():
    x = Tensor([1, 2, 3, 4, 5, 6])
    assert tc.downsample(x, 2, 0).data.tolist() == [1, 3, 5]
    assert tc.downsample(x, 2, 1).data.tolist() == [2, 4, 6]
    assert tc.downsample(x, 1, 0).data.tolist() == [1, 2, 3, 4, 5, 6]
    assert tc.downsample(Tensor(np.arange(7.0)), 3, 1).shape == (2,)
    with pytest.raises(ValueError):
        tc.downsample(x, 2, 2)


def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax(Tensor([0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)
    assert tc.softmax(Tensor([20.0, 0.0, 0.0])).data[0] > 1 - 1e-8
    e = np.e
    np.testing.assert_allclose(tc.softmax(Tensor([1, 2])).data, [1 / (1 + e), e / (1 + e)], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    p = tc.softmax(Tensor(logits)).data
    q = tc.softmax(Tensor(np.array(logits) - shift)).data
    assert p.min() > 0
    assert abs(p.sum() - 1) <= 1e-12
    assert np.abs(p - q).max() <= 1e-12


def test_leaky_relu():
    assert tc.leaky_relu(Tensor([-1, 0, 2]), 0.1).data.tolist() == pytest.approx([-0.1, 0, 2])
    assert tc.leaky_relu(Tensor([0, 3, 4]), 0.1).data.tolist() == [0, 3, 4]
    assert tc.leaky_relu(Tensor([-10]), 0.1).data.tolist() == pytest.approx([-1])


# --- spectral normalization ------------------------------------------------

def test_spectral_identity():
    u = np.array([0.6, 0.8, 0.0])
    wn, _, sigma = tc.spectral_normalize(Tensor(np.eye(3)), u, 1)
    assert sigma == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(wn.data, np.eye(3), atol=1e-12)


def test_spectral_diag():
    w = Tensor(np.diag([3.0, 1.0]))
    wn, u, sigma = tc.spectral_normalize(w, np.array([1.0, 0.3]), 60)
    assert sigma == pytest.approx(3.0, abs=1e-12)
    np.testing.assert_allclose(wn.data, np.diag([1.0, 1 / 3]), atol=1e-12)


def test_spectral_scale_invariance():
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal((4, 6))
    u = rng.standard_normal(4)
    ref = tc.spectral_normalize(Tensor(w0), u, 5)[0].data
    for c in (1e-3, 0.5, 7.0, 1e4):
        np.testing.assert_allclose(tc.spectral_normalize(Tensor(c * w0), u, 5)[0].data, ref, atol=1e-12)


def test_spectral_zero_weight_clamped():
    wn, _, sigma = tc.spectral_normalize(Tensor(np.zeros((2, 3))), np.ones(2), 1)
    assert sigma == 0.0
    assert np.all(np.isfinite(wn.data))


# 50 iterations is too few when the top two singular values nearly tie
# (seed 2 is off by 1.3e-4); 200 converges for every seed here
@pytest.mark.parametrize("seed", range(20))
def test_spectral_sigma_matches_jacobi(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((8, 8))
    _, _, sigma = tc.spectral_normalize(Tensor(w), rng.standard_normal(8), 200)
    truth = largest_singular_value(w)
    assert truth == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-12)
    assert abs(sigma - truth) <= 1e-6


# --- optimizer primitives --------------------------------------------------

def test_adam_zero_grad_is_fixed_point():
    p = Tensor([1.0, -2.0, 3.0])
    st0 = tc.AdamState.zeros_like(p)
    q, st1 = tc.adam_step(p, np.zeros(3), st0, lr=0.1)
    assert q.data.tolist() == p.data.tolist()
    assert st1.t == 1


def test_adam_hand_evaluated():
    p = Tensor([1.0])
    q, _ = tc.adam_step(p, np.array([1.0]), tc.AdamState.zeros_like(p), lr=0.1,
                        beta1=0.0, beta2=0.0, eps=0.0)
    assert q.data[0] == pytest.approx(0.9, abs=1e-15)


def test_adam_weight_decay_pulls_toward_zero():
    for val in (2.0, -2.0):
        p = Tensor([val])
        q, _ = tc.adam_step(p, np.zeros(1), tc.AdamState.zeros_like(p), lr=0.01, weight_decay=0.05)
        assert abs(q.data[0]) < abs(val)


def test_adam_state_nonnegative_second_moment():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal(5))
    s = tc.AdamState.zeros_like(p)
    for _ in range(10):
        p, s = tc.adam_step(p, rng.standard_normal(5), s, lr=0.01)
    assert s.v.min() >= 0 and s.m.shape == p.shape and s.t == 10


def test_clip_grad_norm():
    g = [np.array([0.3, 0.4])]
    assert tc.clip_grad_norm(g, 1.0)[0].tolist() == [0.3, 0.4]
    np.testing.assert_allclose(tc.clip_grad_norm([np.array([3.0, 4.0])], 1.0)[0], [0.6, 0.8])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5), min_size=1, max_size=4),
       st.floats(1e-3, 10))
def test_clip_postcondition(grads, max_norm):
    out = tc.clip_grad_norm([np.array(g) for g in grads], max_norm)
    total = np.sqrt(sum(np.sum(o**2) for o in out))
    assert total <= max_norm + 1e-9


# --- backward --------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = np.arange(6.0).reshape(2, 3)
    _, (g,) = _grad(lambda t: tc.sum(t), x)
    assert g.tolist() == np.ones((2, 3)).tolist()


def test_backward_disconnected_is_zero():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    with tc.Tape() as tape:
        loss = tc.sum(tc.mul(a, a))
    ga, gb = tc.backward(tape, loss, [a, b])
    assert ga.tolist() == [2.0, 4.0]
    assert gb.tolist() == [0.0]


def test_backward_requires_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with tc.Tape() as tape:
        out = tc.mul(a, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tc.backward(tape, out)


def test_backward_returns_leaf_dict():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with tc.Tape() as tape:
        loss = tc.sum(tc.mul(tc.add(a, 1.0), 3.0))
    grads = tc.backward(tape, loss)
    assert list(grads) == [a]
    assert grads[a].tolist() == [3.0, 3.0]


def test_tape_is_topological():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with tc.Tape() as tape:
        b = tc.mul(a, a)
        c = tc.add(b, a)
        tc.sum(c)
    seen = {id(a)}
    for rec in tape.records:
        assert all(id(i) in seen or not i.requires_grad for i in rec.inputs)
        seen.add(id(rec.output))


def test_conv_sum_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 3, 9))
    w = rng.uniform(-1, 1, (2, 3, 3))
    _, (gx, gw) = _grad(lambda a, b: tc.sum(tc.conv1d_valid(a, b)), x, w)
    fx = central_difference(lambda v: np.sum(conv1d_naive(v, w)), x)
    fw = central_difference(lambda v: np.sum(conv1d_naive(x, v)), w)
    assert rel_error(gx, fx) < 1e-6
    assert rel_error(gw, fw) < 1e-6


# one entry per differentiable op: (name, builder, input shapes)
# builder maps tensors to a tensor; the test contracts it with a fixed random weight
OPS = [
    ("add", lambda a, b: tc.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: tc.sub(a, b), [(3, 4), (3, 1)]),
    ("mul", lambda a, b: tc.mul(a, b), [(2, 5), (2, 5)]),
    ("neg", lambda a: tc.neg(a), [(4,)]),
    ("sum_axis", lambda a: tc.sum(a, axis=1), [(3, 4)]),
    ("mean", lambda a: tc.mean(a), [(3, 4)]),
    ("log", lambda a: tc.log(tc.add(tc.mul(a, a), 0.5)), [(6,)]),
    ("clamp", lambda a: tc.clamp(a, -0.6, 0.7), [(8,)]),
    ("sigmoid", lambda a: tc.sigmoid(tc.mul(a, 4.0)), [(7,)]),
    ("leaky_relu", lambda a: tc.leaky_relu(a, 0.1), [(9,)]),
    ("softmax", lambda a: tc.softmax(a), [(2, 7)]),
    ("reshape", lambda a: tc.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: tc.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("getitem", lambda a: a[1:, ::2], [(3, 5)]),
    ("concat", lambda a, b: tc.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("pad1d", lambda a: tc.pad1d(a, 2, 1), [(2, 4)]),
    ("conv1d_valid", lambda a, b: tc.conv1d_valid(a, b), [(2, 3, 8), (2, 3, 3)]),
    ("downsample", lambda a: tc.downsample(a, 3, 1), [(2, 10)]),
    ("take_last", lambda a: tc.take_last(a, np.array([[[0, 2, 4]], [[1, 3, 5]]])), [(2, 3, 7)]),
]


def gradcheck_op(builder, shapes, seed, h=1e-5):
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-1, 1, s) for s in shapes]
    out_shape = builder(*[Tensor(a) for a in arrays]).shape
    proj = rng.uniform(-1, 1, out_shape)

    def scalar(*arrs):
        return float(np.sum(builder(*[Tensor(a) for a in arrs]).data * proj))

    _, grads = _grad(lambda *ts: tc.sum(tc.mul(builder(*ts), proj)), *arrays)
    worst = 0.0
    for i, g in enumerate(grads):
        def f(v, i=i):
            args = list(arrays)
            args[i] = v
            return scalar(*args)
        worst = max(worst, rel_error(g, central_difference(f, arrays[i], h)))
    return worst


@pytest.mark.parametrize("name,builder,shapes", OPS, ids=[o[0] for o in OPS])
def test_op_gradients_100_seeds(name, builder, shapes):
    worst = max(gradcheck_op(builder, shapes, seed) for seed in range(100))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_tensor_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_spectral_normalize_gradients_100_seeds():
    # u and v are constants of the derivative, so the oracle freezes them at the base point
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = rng.uniform(-1, 1, (3, 2, 2))
        u0 = rng.uniform(-1, 1, 3)
        proj = rng.uniform(-1, 1, w.shape)
        w2 = w.reshape(3, -1)
        v = w2.T @ u0
        v /= np.linalg.norm(v)
        u = w2 @ v
        u /= np.linalg.norm(u)

        def f(arr):
            return float(np.sum(arr / (u @ arr.reshape(3, -1) @ v) * proj))

        _, (g,) = _grad(lambda t: tc.sum(tc.mul(tc.spectral_normalize(t, u0, 1)[0], proj)), w)
        worst = max(worst, rel_error(g, central_difference(f, w)))
    assert worst < 1e-4
