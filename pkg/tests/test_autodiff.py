import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specfuse import autodiff as ad
from specfuse.autodiff import BatchNormState, Param, ShapeError, Tensor
from specfuse.gt import MIX, U_DONT_CARE, UNITY
from specfuse.pyramid import DONT_CARE

SEEDS = range(10)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def loop_conv3x3(x, w, b):
    cin, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for r in range(h):
            for c in range(wd):
                acc = b[o]
                for i in range(cin):
                    for dy in range(3):
                        for dx in range(3):
                            rr, cc = r + dy - 1, c + dx - 1
                            if 0 <= rr < h and 0 <= cc < wd:
                                acc += w[o, i, dy, dx] * x[i, rr, cc]
                out[o, r, c] = acc
    return out


# ---------------------------------------------------------------- forward oracles

def test_conv1x1_identity_and_matvec(rng):
    x = rng.normal(size=(3, 4, 5))
    assert np.array_equal(ad.conv1x1(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    w, b, v = rng.normal(size=(2, 3)), rng.normal(size=2), rng.normal(size=(3, 1, 1))
    np.testing.assert_allclose(ad.conv1x1(Tensor(v), Tensor(w), Tensor(b)).data[:, 0, 0], w @ v[:, 0, 0] + b)


def test_conv1x1_loop_oracle(rng):
    x, w, b = rng.normal(size=(3, 2, 2)), rng.normal(size=(4, 3)), rng.normal(size=4)
    ref = np.array([[[sum(w[o, i] * x[i, r, c] for i in range(3)) + b[o] for c in range(2)]
                     for r in range(2)] for o in range(4)])
    np.testing.assert_allclose(ad.conv1x1(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)


def test_conv3x3_examples(rng):
    x = rng.normal(size=(2, 5, 4))
    delta = np.zeros((2, 2, 3, 3))
    delta[0, 0, 1, 1] = delta[1, 1, 1, 1] = 1
    np.testing.assert_allclose(ad.conv3x3(Tensor(x), Tensor(delta)).data, x)
    ones = np.ones((1, 1, 3, 3))
    out = ad.conv3x3(Tensor(np.full((1, 4, 4), 2.0)), Tensor(ones)).data[0]
    assert out[1, 1] == 18 and out[0, 0] == 8 and out[0, 1] == 12


def test_conv3x3_loop_oracle(rng):
    for seed in range(3):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(3, 4, 5)), r.normal(size=(2, 3, 3, 3)), r.normal(size=2)
        np.testing.assert_allclose(ad.conv3x3(Tensor(x), Tensor(w), Tensor(b)).data, loop_conv3x3(x, w, b),
                                   atol=1e-12)


def test_conv_batched_equals_per_sample(rng):
    x, w = rng.normal(size=(2, 3, 3, 4, 4)), rng.normal(size=(5, 3, 3, 3))
    out = ad.conv3x3(Tensor(x), Tensor(w)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(out[i, j], ad.conv3x3(Tensor(x[i, j]), Tensor(w)).data, atol=1e-12)


def test_batch_norm_examples(rng):
    st = BatchNormState(2, dtype=np.float64)
    out = ad.batch_norm(Tensor(np.full((4, 2, 3, 3), 7.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), st)
    assert np.allclose(out.data, 0)
    x = rng.normal(size=(4, 2, 3, 3))
    out = ad.batch_norm(Tensor(x), Tensor(np.zeros(2)), Tensor(np.array([1.5, -2.0])), BatchNormState(2))
    assert np.allclose(out.data[:, 0], 1.5) and np.allclose(out.data[:, 1], -2.0)


def test_batch_norm_two_pass_oracle(rng):
    x = rng.normal(2.0, 3.0, size=(5, 3, 4, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    st = BatchNormState(3, dtype=np.float64)
    out = ad.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), st, training=True).data
    for c in range(3):
        v = x[:, c].ravel()
        mu = sum(v) / len(v)
        var = sum((t - mu) ** 2 for t in v) / len(v)
        ref = gamma[c] * (x[:, c] - mu) / math.sqrt(var + 1e-5) + beta[c]
        np.testing.assert_allclose(out[:, c], ref, atol=1e-10)
        assert st.running_mean[c] == pytest.approx(0.1 * mu, abs=1e-12)
        assert st.running_var[c] == pytest.approx(0.9 + 0.1 * var * len(v) / (len(v) - 1), abs=1e-12)
    ev = ad.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), st, training=False).data
    ref = gamma[:, None, None] * (x - st.running_mean[:, None, None]) / np.sqrt(st.running_var[:, None, None] + 1e-5)
    np.testing.assert_allclose(ev, ref + beta[:, None, None], atol=1e-10)


def test_pool_examples(rng):
    for k in (1, 2, 4):
        assert np.allclose(ad.avg_pool(Tensor(np.full((2, 8, 8), 3.5)), k).data, 3.5)
    x = leaf(np.array([[[1.0, 2.0], [3.0, 0.0]]]))
    out = ad.min_pool(x, 2)
    assert out.data.item() == 0
    ad.sum_all(out).backward()
    assert np.array_equal(x.grad, [[[0, 0], [0, 1]]])
    block = np.repeat(np.repeat(rng.normal(size=(3, 2, 2)), 4, 1), 4, 2)
    np.testing.assert_allclose(ad.nearest_upsample(ad.avg_pool(Tensor(block), 4), 4).data, block)


def test_adaptive_pool_region_oracle(rng):
    x = rng.normal(size=(2, 8, 7))
    for n in (1, 3, 6, 7):
        out = ad.adaptive_avg_pool(Tensor(x), n).data
        for i in range(n):
            for j in range(n):
                r0, r1 = (i * 8) // n, math.ceil((i + 1) * 8 / n)
                c0, c1 = (j * 7) // n, math.ceil((j + 1) * 7 / n)
                np.testing.assert_allclose(out[:, i, j], x[:, r0:r1, c0:c1].mean((1, 2)), atol=1e-12)
    np.testing.assert_allclose(ad.adaptive_avg_pool(Tensor(x), 1).data[:, 0, 0], x.mean((1, 2)))
    with pytest.raises(ShapeError):
        ad.adaptive_avg_pool(Tensor(x), 8)


def test_attention_examples(rng):
    q, v = rng.normal(size=(5, 3)), rng.normal(size=(1, 4))
    out = ad.attention(Tensor(q), Tensor(rng.normal(size=(1, 3))), Tensor(v)).data
    np.testing.assert_allclose(out, np.repeat(v, 5, 0))
    k = np.repeat(rng.normal(size=(1, 3)), 6, 0)
    v = rng.normal(size=(6, 2))
    np.testing.assert_allclose(ad.attention(Tensor(q), Tensor(k), Tensor(v)).data, np.repeat(v.mean(0, keepdims=True), 5, 0))


def test_attention_hand_case():
    q = np.array([[1.0], [-0.5]])
    k = np.array([[2.0], [0.25]])
    v = np.array([[3.0, 1.0], [-1.0, 0.5]])
    for i in range(2):
        s = [q[i, 0] * k[j, 0] for j in range(2)]
        e = [math.exp(t) for t in s]
        a = [t / sum(e) for t in e]
        expected = [a[0] * v[0, c] + a[1] * v[1, c] for c in range(2)]
        np.testing.assert_allclose(ad.attention(Tensor(q), Tensor(k), Tensor(v)).data[i], expected, atol=1e-12)


def test_softmax_sums_to_one(rng):
    out = ad.softmax(Tensor(rng.normal(size=(3, 4)) * 50), axis=-1).data
    np.testing.assert_allclose(out.sum(-1), 1)


def test_masked_losses_match_numpy_metrics(rng):
    from specfuse import metrics

    logits = rng.normal(size=(3, 4, 4))
    target = rng.integers(-1, 3, size=(4, 4))
    assert ad.masked_ce(Tensor(logits), target).item() == pytest.approx(metrics.masked_ce(logits, target), rel=1e-12)
    probs = rng.uniform(size=(4, 4))
    codes = rng.choice([MIX, UNITY, U_DONT_CARE], size=(4, 4)).astype(np.uint8)
    assert ad.masked_bce(Tensor(probs), codes).item() == pytest.approx(metrics.masked_bce(probs, codes), rel=1e-12)
    assert ad.masked_ce(Tensor(logits), np.full((4, 4), DONT_CARE)).item() == 0


# ---------------------------------------------------------------- gradients

def check(fn, *arrays, tol=1e-6):
    tensors = [leaf(a) for a in arrays]
    err = ad.grad_check(lambda: fn(*tensors), tensors, step=1e-5)
    assert err < tol, err


def sq(t):
    """Generic scalar head: weighted sum of squares so every output entry matters."""
    w = np.cos(np.arange(t.data.size)).reshape(t.shape)
    return ad.sum_all(ad.mul(t, ad.mul(t, Tensor(w))))


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv(seed):
    r = np.random.default_rng(seed)
    check(lambda x, w, b: sq(ad.conv3x3(x, w, b)), r.normal(size=(2, 2, 4, 3)), r.normal(size=(3, 2, 3, 3)),
          r.normal(size=3))
    check(lambda x, w, b: sq(ad.conv1x1(x, w, b)), r.normal(size=(2, 3, 3, 2)), r.normal(size=(4, 3)), r.normal(size=4))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_grad_batch_norm(seed, training):
    r = np.random.default_rng(seed)
    st = BatchNormState(3, dtype=np.float64)
    st.running_mean[:] = r.normal(size=3)
    st.running_var[:] = r.uniform(0.5, 2, size=3)
    check(lambda x, g, b: sq(ad.batch_norm(x, g, b, st, training)), r.normal(size=(2, 3, 3, 3)),
          r.normal(size=3), r.normal(size=3))


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_pools_and_resampling(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 4, 6))
    check(lambda t: sq(ad.avg_pool(t, 2)), x)
    check(lambda t: sq(ad.min_pool(t, 2)), x)
    check(lambda t: sq(ad.nearest_upsample(t, 3)), x)
    check(lambda t: sq(ad.adaptive_avg_pool(t, 3)), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    a[np.abs(a) < 1e-3] = 0.5  # stay away from the relu kink
    check(lambda x: sq(ad.relu(x)), a)
    check(lambda x: sq(ad.sigmoid(x)), a)
    check(lambda x: sq(ad.softmax(x, axis=0)), a)
    check(lambda x, y: sq(x * y - y + x), a, b)
    check(lambda x: sq(ad.swapaxes(ad.reshape(x, (2, 6)), 0, 1) * 0.5), a)
    check(lambda x, y: sq(ad.concat([x, y], axis=0)), a, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul_attention(seed):
    r = np.random.default_rng(seed)
    check(lambda x, y: sq(ad.matmul(x, y)), r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5)))
    check(lambda q, k, v: sq(ad.attention(q, k, v)), r.normal(size=(2, 5, 3)), r.normal(size=(2, 4, 3)),
          r.normal(size=(2, 4, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_losses(seed):
    r = np.random.default_rng(seed)
    target = r.integers(-1, 4, size=(2, 3, 3))
    target[0, 0, 0] = 1
    check(lambda z: ad.masked_ce(z, target), r.normal(size=(2, 4, 3, 3)))
    codes = r.choice([MIX, UNITY, U_DONT_CARE], size=(3, 3)).astype(np.uint8)
    codes[0, 0] = UNITY
    check(lambda p: ad.masked_bce(p, codes), r.uniform(0.05, 0.95, size=(3, 3)))


def test_grad_check_quadratic(rng):
    x = leaf(rng.normal(size=(4, 3)))
    assert ad.grad_check(lambda: ad.sum_all(x * x), [x]) < 1e-9


def test_grad_check_detects_wrong_gradient(rng):
    x = leaf(rng.normal(size=5))

    def wrong(t):
        out = ad.sum_all(t * t)
        return ad._make(out.data, (t,), lambda g: (g * t.data,))  # missing factor 2

    assert ad.grad_check(lambda: wrong(x), [x]) > 0.1


# ---------------------------------------------------------------- graph semantics

def test_shared_leaf_accumulates():
    x = leaf([1.0, 2.0])
    y = ad.sum_all(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_unreachable_grads_stay_zero(rng):
    a, b = Param(rng.normal(size=3), "a"), Param(rng.normal(size=3), "b")
    ad.zero_grad([a, b])
    ad.sum_all(a * a).backward()
    assert np.array_equal(b.grad, np.zeros(3))
    assert not np.array_equal(a.grad, np.zeros(3))


def test_backward_needs_scalar(rng):
    with pytest.raises(ShapeError):
        leaf(rng.normal(size=3)).backward()


def test_shape_errors(rng):
    x = Tensor(rng.normal(size=(3, 4, 4)))
    with pytest.raises(ShapeError):
        ad.conv1x1(x, Tensor(np.zeros((2, 4))))
    with pytest.raises(ShapeError):
        ad.add(x, Tensor(np.zeros((3, 4, 5))))
    with pytest.raises(ShapeError):
        ad.avg_pool(x, 3)


def test_glorot_bounds():
    w = ad.glorot_uniform(np.random.default_rng(0), (64, 32), 32, 64)
    a = math.sqrt(6 / 96)
    assert w.dtype == np.float32 and np.abs(w).max() <= a and np.abs(w).max() > 0.9 * a


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_avg_pool_preserves_mean(c, hb, wb, seed):
    x = np.random.default_rng(seed).normal(size=(c, 2 * hb, 2 * wb))
    np.testing.assert_allclose(ad.avg_pool(Tensor(x), 2).data.mean(), x.mean(), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 32 - 1))
def test_adaptive_pool_rows_are_averages(size, n, seed):
    n = min(n, size)
    m = ad.adaptive_pool_matrix(size, n)
    np.testing.assert_allclose(m.sum(1), 1)
    assert (m > 0).any(0).all()  # every input position is covered
