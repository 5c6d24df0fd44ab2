import math

import numpy as np
import pytest

import mobiforge.nn as nn
from mobiforge.nn import tensor as T


rng = np.random.default_rng(2024)


def test_matmul_identity():
    a = np.array([[1.0, 2, 3], [4, 5, 6], [7, 8, 9]])
    out = nn.matmul(nn.Tensor(np.eye(3)), nn.Tensor(a))
    np.testing.assert_allclose(out.data, a, atol=1e-6)


def test_softmax_uniform():
    out = nn.softmax(nn.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)


def test_softmax_rows_sum_to_one():
    x = nn.Tensor(rng.normal(size=(8, 11)))
    s = nn.softmax(x, axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_moments():
    x = nn.Tensor(rng.normal(2.0, 3.0, size=(5, 16)))
    out = nn.layer_norm(x).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_shape_mismatch_errors_name_shapes():
    with pytest.raises(nn.ShapeError, match=r"\(2, 3\)"):
        nn.matmul(nn.Tensor(np.zeros((2, 3))), nn.Tensor(np.zeros((2, 3))))


def test_nan_trap():
    with np.errstate(over="ignore"), \
            pytest.raises(nn.NumericError, match="mul"):
        big = nn.Tensor(np.array([1e38], dtype=np.float32))
        nn.mul(big, big)


def conv_loop_oracle(x, w, b, dilation):
    batch, seq, cin = x.shape
    kernel, _, cout = w.shape
    y = np.zeros((batch, seq, cout))
    for bi in range(batch):
        for t in range(seq):
            for k in range(kernel):
                src = t - (kernel - 1 - k) * dilation
                if src >= 0:
                    y[bi, t] += x[bi, src] @ w[k]
            y[bi, t] += b
    return y


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_dilated_conv_matches_loop_oracle(dilation):
    x = rng.normal(size=(2, 10, 3))
    w = rng.normal(size=(3, 3, 5))
    b = rng.normal(size=5)
    out = nn.dilated_causal_conv1d(nn.Tensor(x), nn.Tensor(w), nn.Tensor(b),
                                   dilation=dilation)
    np.testing.assert_allclose(out.data, conv_loop_oracle(x, w, b, dilation),
                               atol=1e-5)


def test_kl_self_is_zero():
    p = rng.dirichlet(np.ones(9), size=4)
    with nn.use_float64():
        loss = nn.kl_div(nn.Tensor(np.log(p)), p)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_kl_reference_value():
    # direct summation: 0.25*ln(0.25/0.5) + 0.75*ln(0.75/0.5)
    expected = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
    with nn.use_float64():
        loss = nn.kl_div(nn.Tensor(np.log([[0.5, 0.5]])), np.array([[0.25, 0.75]]))
    assert loss.item() == pytest.approx(expected, abs=1e-4)
    assert loss.item() == pytest.approx(0.1308, abs=1e-4)


def test_kl_nonnegative_random():
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        with nn.use_float64():
            loss = nn.kl_div(nn.Tensor(np.log(q[None])), p[None])
        assert loss.item() >= -1e-12


def test_kl_rejects_non_simplex():
    with pytest.raises(nn.ShapeError):
        nn.kl_div(nn.Tensor(np.log([[0.5, 0.5]])), np.array([[0.7, 0.7]]))


def test_mse_self_zero():
    x = rng.normal(size=(4, 7))
    assert nn.mse(nn.Tensor(x), nn.Tensor(x.copy())).item() == 0.0


def test_cross_entropy_matches_manual():
    logits = rng.normal(size=(5, 4))
    targets = rng.integers(0, 4, 5)
    with nn.use_float64():
        loss = nn.cross_entropy(nn.Tensor(logits), targets)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expected = -logp[np.arange(5), targets].mean()
    assert loss.item() == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------------------
# Gradients

def test_square_gradient():
    x = nn.Parameter(np.array(3.0))
    nn.backward(nn.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_grad_accumulates_without_zero():
    x = nn.Parameter(np.array(3.0))
    nn.backward(nn.mul(x, x))
    first = x.grad.copy()
    loss = nn.mul(x, x)
    nn.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * first)


def test_backward_rejects_nonscalar():
    x = nn.Parameter(np.ones(3))
    with pytest.raises(nn.ShapeError):
        nn.backward(nn.mul(x, x))


def test_unreached_parameter_keeps_zero_grad():
    x = nn.Parameter(np.array(2.0))
    y = nn.Parameter(np.array(5.0))
    nn.backward(nn.mul(x, x))
    assert y.grad == 0.0


PRIMITIVE_CASES = {
    "add": lambda p: nn.reduce_sum(nn.mul(nn.add(p, nn.Tensor(np.ones(p.shape))),
                                          nn.Tensor(_cw(p.shape)))),
    "sub": lambda p: nn.reduce_sum(nn.mul(nn.sub(p, nn.Tensor(np.ones(p.shape))),
                                          nn.Tensor(_cw(p.shape)))),
    "scale": lambda p: nn.reduce_sum(nn.mul(nn.scale(p, 1.7), nn.Tensor(_cw(p.shape)))),
    "mul": lambda p: nn.reduce_sum(nn.mul(nn.mul(p, p), nn.Tensor(_cw(p.shape)))),
    "sigmoid": lambda p: nn.reduce_sum(nn.mul(nn.sigmoid(p), nn.Tensor(_cw(p.shape)))),
    "gelu": lambda p: nn.reduce_sum(nn.mul(nn.gelu(p), nn.Tensor(_cw(p.shape)))),
    "softmax": lambda p: nn.reduce_sum(nn.mul(nn.softmax(p, axis=-1),
                                              nn.Tensor(_cw(p.shape)))),
    "log_softmax": lambda p: nn.reduce_sum(nn.mul(nn.log_softmax(p, axis=-1),
                                                  nn.Tensor(_cw(p.shape)))),
    "layer_norm": lambda p: nn.reduce_sum(nn.mul(nn.layer_norm(p),
                                                 nn.Tensor(_cw(p.shape)))),
    "mean": lambda p: nn.reduce_mean(nn.mul(p, p)),
    "concat": lambda p: nn.reduce_sum(
        nn.mul(nn.concat([p, nn.scale(p, 2.0)], axis=-1),
               nn.Tensor(_cw((p.shape[0], p.shape[1] * 2))))),
    "reshape": lambda p: nn.reduce_sum(nn.mul(nn.reshape(p, (p.data.size,)),
                                              nn.Tensor(_cw((p.data.size,))))),
    "transpose": lambda p: nn.reduce_sum(nn.mul(nn.transpose(p, (1, 0)),
                                                nn.Tensor(_cw(p.shape[::-1])))),
}


def _cw(shape):
    # fixed pseudo-random cotangent weights so the loss is a general projection
    r = np.random.default_rng(99)
    return r.normal(size=shape)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_finite_difference(name):
    x0 = np.random.default_rng(hash(name) % 2**32).normal(size=(4, 6))
    err = nn.check_gradient(PRIMITIVE_CASES[name], x0, h=1e-5)
    assert err < 1e-3, f"{name}: rel error {err}"


def test_matmul_gradient():
    b = np.random.default_rng(1).normal(size=(6, 5))

    def loss(p):
        return nn.reduce_sum(nn.mul(nn.matmul(p, nn.Tensor(b)), nn.Tensor(_cw((4, 5)))))

    assert nn.check_gradient(loss, rng.normal(size=(4, 6))) < 1e-3


def test_matmul_gradient_wrt_rhs():
    a = np.random.default_rng(2).normal(size=(4, 6))

    def loss(p):
        return nn.reduce_sum(nn.mul(nn.matmul(nn.Tensor(a), p), nn.Tensor(_cw((4, 5)))))

    assert nn.check_gradient(loss, rng.normal(size=(6, 5))) < 1e-3


def test_conv_gradients():
    w = np.random.default_rng(3).normal(size=(3, 4, 2))
    b = np.zeros(2)

    def loss_x(p):
        return nn.reduce_sum(nn.mul(
            nn.dilated_causal_conv1d(p, nn.Tensor(w), nn.Tensor(b), dilation=2),
            nn.Tensor(_cw((2, 6, 2)))))

    assert nn.check_gradient(loss_x, rng.normal(size=(2, 6, 4))) < 1e-3

    x = np.random.default_rng(4).normal(size=(2, 6, 4))

    def loss_w(p):
        return nn.reduce_sum(nn.mul(
            nn.dilated_causal_conv1d(nn.Tensor(x), nn.reshape(p, (3, 4, 2)),
                                     nn.Tensor(b), dilation=2),
            nn.Tensor(_cw((2, 6, 2)))))

    assert nn.check_gradient(loss_w, rng.normal(size=(3, 8)).reshape(3, 8)) < 1e-3


def test_embedding_gradient():
    idx = np.array([0, 2, 1, 2])

    def loss(p):
        return nn.reduce_sum(nn.mul(nn.embedding_lookup(p, idx),
                                    nn.Tensor(_cw((4, 5)))))

    assert nn.check_gradient(loss, rng.normal(size=(3, 5))) < 1e-3


def test_mha_gradient():
    d, heads, s = 8, 2, 3
    r = np.random.default_rng(5)
    wk = nn.Tensor(r.normal(size=(d, d)) * 0.3)
    wv = nn.Tensor(r.normal(size=(d, d)) * 0.3)
    wo = nn.Tensor(r.normal(size=(d, d)) * 0.3)
    x = r.normal(size=(1, s, d))

    def loss_wq(p):
        out = nn.multi_head_attention(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x),
                                      p, wk, wv, wo, n_heads=heads)
        return nn.reduce_sum(nn.mul(out, nn.Tensor(_cw((1, s, d)))))

    assert nn.check_gradient(loss_wq, r.normal(size=(d, d)) * 0.3) < 1e-3

    wq = nn.Tensor(r.normal(size=(d, d)) * 0.3)

    def loss_x(p):
        out = nn.multi_head_attention(p, p, p, wq, wk, wv, wo, n_heads=heads)
        return nn.reduce_sum(nn.mul(out, nn.Tensor(_cw((1, s, d)))))

    assert nn.check_gradient(loss_x, x) < 1e-3


def test_loss_gradients():
    t = np.random.default_rng(6).normal(size=(3, 4))

    def loss_mse(p):
        return nn.mse(p, nn.Tensor(t))

    assert nn.check_gradient(loss_mse, rng.normal(size=(3, 4))) < 1e-3

    idx = np.array([1, 3, 0])

    def loss_ce(p):
        return nn.cross_entropy(p, idx)

    assert nn.check_gradient(loss_ce, rng.normal(size=(3, 4))) < 1e-3

    target = np.random.default_rng(7).dirichlet(np.ones(4), size=3)

    def loss_kl(p):
        return nn.kl_div(nn.log_softmax(p, axis=-1), target)

    assert nn.check_gradient(loss_kl, rng.normal(size=(3, 4))) < 1e-3


# ---------------------------------------------------------------------------
# Optimizer / init

def test_adam_zero_grad_keeps_value():
    p = nn.Parameter(np.array([1.0, 2.0]))
    opt = nn.Adam([p], lr=0.1)
    p.grad[...] = 0.0
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert p.step_count == 1


def test_adam_single_step_matches_formula():
    p = nn.Parameter(np.array(2.0))
    opt = nn.Adam([p], lr=0.1)
    p.grad[...] = 0.5
    opt.step()
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    m_hat = m / 0.1
    v_hat = v / 0.001
    expected = 2.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data == pytest.approx(expected, rel=1e-6)


def test_adam_converges_on_quadratic():
    p = nn.Parameter(np.array(0.0))
    opt = nn.Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        loss = nn.mul(nn.sub(p, 5.0), nn.sub(p, 5.0))
        nn.backward(loss)
        opt.step()
    assert abs(float(p.data) - 5.0) < 1e-2


def test_xavier_bound_and_determinism():
    a = nn.xavier_init((100, 100), np.random.default_rng(8))
    b = nn.xavier_init((100, 100), np.random.default_rng(8))
    bound = math.sqrt(6 / 200)
    assert np.all(np.abs(a) <= bound)
    np.testing.assert_array_equal(a, b)


def test_xavier_variance():
    draws = nn.xavier_init((200, 500), np.random.default_rng(9))
    target = 2.0 / (200 + 500)
    assert draws.var() == pytest.approx(target, rel=0.1)


# ---------------------------------------------------------------------------
# Checkpoints

def test_checkpoint_roundtrip(tmp_path):
    params = {"w": nn.Parameter(rng.normal(size=(3, 4)).astype(np.float32)),
              "b": nn.Parameter(np.zeros(4, dtype=np.float32))}
    path = tmp_path / "model.bin"
    nn.save_checkpoint(params, path)
    loaded = nn.load_checkpoint(path)
    assert set(loaded) == {"w", "b"}
    np.testing.assert_array_equal(loaded["w"].data, params["w"].data)

    fresh = {"w": nn.Parameter(np.zeros((3, 4), dtype=np.float32)),
             "b": nn.Parameter(np.ones(4, dtype=np.float32))}
    nn.load_into(fresh, path)
    np.testing.assert_array_equal(fresh["w"].data, params["w"].data)


def test_checkpoint_shape_mismatch(tmp_path):
    params = {"w": nn.Parameter(np.zeros((2, 2), dtype=np.float32))}
    path = tmp_path / "m.bin"
    nn.save_checkpoint(params, path)
    with pytest.raises(ValueError, match="shape"):
        nn.load_into({"w": nn.Parameter(np.zeros((3, 3), dtype=np.float32))}, path)
