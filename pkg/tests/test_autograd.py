import math

import numpy as np
import pytest

from fwl.nn import autograd as ag
from fwl.nn.autograd import Tensor

from .gradcheck import check_grad

SEEDS = range(5)


def _rand(rng, shape, positive=False):
    x = rng.normal(size=shape)
    return np.abs(x) + 0.5 if positive else x


def _shapes(rng, ndim=2, lo=2, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi, ndim))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grad(seed):
    rng = np.random.default_rng(seed)
    b, n, k, m = _shapes(rng, 4)
    a, w = _rand(rng, (b, n, k)), _rand(rng, (k, m))
    assert check_grad(lambda x, y: ag.matmul(x, y), [a, w]) < 1e-4
    c = _rand(rng, (b, k, m))
    assert check_grad(lambda x, y: ag.matmul(x, y), [a, c]) < 1e-4


def test_matmul_identity_passes_gradient_through():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), True)
    y = ag.matmul(x, np.eye(2))
    np.testing.assert_array_equal(y.data, x.data)
    up = np.array([[0.5, -1.0], [2.0, 3.0]])
    y.backward(up)
    np.testing.assert_array_equal(x.grad, up)


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_add_mul_grad(seed):
    rng = np.random.default_rng(seed)
    n, d = _shapes(rng)
    x, b = _rand(rng, (3, n, d)), _rand(rng, (d,))
    assert check_grad(lambda u, v: ag.add(u, v), [x, b]) < 1e-4
    assert check_grad(lambda u, v: ag.mul(u, v), [x, b]) < 1e-4
    assert check_grad(lambda u, v: ag.sub(u, v), [x, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_grad(seed):
    rng = np.random.default_rng(seed)
    n, d = _shapes(rng, 2, 2, 7)
    args = [_rand(rng, (2, n, d)), _rand(rng, (d,)), _rand(rng, (d,))]
    assert check_grad(lambda x, g, b: ag.layer_norm(x, g, b), args) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_attention_grad(seed):
    rng = np.random.default_rng(seed)
    h, n, dh = _shapes(rng, 3)
    q, k, v = (_rand(rng, (2, h, n, dh)) for _ in range(3))
    assert check_grad(lambda a, b, c: ag.softmax_attention(a, b, c), [q, k, v]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", ["gelu", "sigmoid", "softplus", "exp", "absolute"])
def test_unary_grad(seed, op):
    rng = np.random.default_rng(seed)
    x = _rand(rng, _shapes(rng, 3))
    if op == "absolute":
        x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep away from the kink
    assert check_grad(getattr(ag, op), [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_grad_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, _shapes(rng, 3))
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    assert check_grad(ag.relu, [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_log_power_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, _shapes(rng, 3), positive=True)
    assert check_grad(ag.log, [x]) < 1e-4
    assert check_grad(lambda u: ag.power(u, 2.0), [x]) < 1e-4
    assert check_grad(lambda u: ag.power(u, 1.5), [x]) < 1e-4
    y = _rand(rng, _shapes(rng, 3))
    assert check_grad(lambda u: ag.softmax(u, -1), [y]) < 1e-4
    assert check_grad(lambda u: ag.softmax(u, 0), [y]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_grad_with_fixed_mask(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, _shapes(rng, 3))
    # same seed per call -> same mask, so FD sees a fixed linear map
    f = lambda u: ag.dropout(u, 0.3, np.random.default_rng(seed + 100), True)
    assert check_grad(f, [x]) < 1e-4
    out = ag.dropout(Tensor(x), 0.3, np.random.default_rng(1), False)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_ops_grad(seed):
    rng = np.random.default_rng(seed)
    a, b, c = _shapes(rng, 3)
    x = _rand(rng, (a, b, c))
    assert check_grad(lambda u: ag.reshape(u, (a * b, c)), [x]) < 1e-4
    assert check_grad(lambda u: ag.transpose(u, (2, 0, 1)), [x]) < 1e-4
    assert check_grad(lambda u: ag.index(u, (slice(None), 1)), [x]) < 1e-4
    assert check_grad(lambda u: ag.sum_(u, axis=1), [x]) < 1e-4
    assert check_grad(lambda u: ag.mean(u, axis=(0, 2), keepdims=True), [x]) < 1e-4
    idx = rng.integers(0, c, (a, b, 1))
    assert check_grad(lambda u: ag.take_along(u, idx, -1), [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_gather_scatter_grad(seed):
    rng = np.random.default_rng(seed)
    B, N, d = 2, int(rng.integers(4, 8)), 3
    x = _rand(rng, (B, N, d))
    idx = np.stack([np.sort(rng.permutation(N)[:3]) for _ in range(B)])
    assert check_grad(lambda u: ag.gather_rows(u, idx), [x]) < 1e-4
    y = _rand(rng, (B, 3, d))
    assert check_grad(lambda u: ag.scatter_rows(u, idx, N), [y]) < 1e-4


def test_scatter_rejects_overlap():
    with pytest.raises(ValueError):
        ag.scatter_rows(Tensor(np.zeros((1, 2, 3))), np.array([[1, 1]]), 4)


@pytest.mark.parametrize("seed", SEEDS)
def test_patchify_grad_and_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    patch = (2, 2, int(rng.integers(1, 4)))
    g = rng.integers(1, 3, 3)
    H, W, T = (int(g[i] * patch[i]) for i in range(3))
    x = _rand(rng, (2, H, W, T))
    assert check_grad(lambda u: ag.patchify(u, patch), [x]) < 1e-4
    out = ag.patchify(Tensor(x), patch).data
    # explicit loop oracle
    n = 0
    for i in range(H // patch[0]):
        for j in range(W // patch[1]):
            for k in range(T // patch[2]):
                blk = x[:, i * patch[0]:(i + 1) * patch[0], j * patch[1]:(j + 1) * patch[1],
                        k * patch[2]:(k + 1) * patch[2]]
                np.testing.assert_array_equal(out[:, n], blk.reshape(2, -1))
                n += 1
    back = ag.unpatchify(Tensor(out), patch, (H, W, T)).data
    np.testing.assert_array_equal(back, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_unpatchify_channels_grad(seed):
    rng = np.random.default_rng(seed)
    patch, dims, C = (2, 2, 2), (4, 2, 2), 3
    x = _rand(rng, (1, 2, 8 * C))
    assert check_grad(lambda u: ag.unpatchify(u, patch, dims, channels=C), [x]) < 1e-4


def test_patchify_rejects_non_divisible():
    with pytest.raises(ValueError):
        ag.patchify(Tensor(np.zeros((1, 5, 4, 4))), (2, 2, 2))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softplus_zero():
    assert ag.softplus(Tensor(0.0)).data == pytest.approx(math.log(2.0), abs=1e-15)


def test_softplus_sigmoid_stable_for_large_inputs():
    x = Tensor(np.array([-800.0, 800.0]))
    np.testing.assert_allclose(ag.softplus(x).data, [0.0, 800.0])
    np.testing.assert_allclose(ag.sigmoid(x).data, [0.0, 1.0])


def test_log_clamp_never_nan():
    x = Tensor(np.array([0.0, 1e-20, 0.5]), True)
    y = ag.log(x, clamp=1e-12)
    assert np.all(np.isfinite(y.data))
    ag.sum_(y).backward()
    assert np.all(np.isfinite(x.grad))
    assert x.grad[0] == 0.0


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([1.0, 2.0]), True)
    y = ag.sum_(ag.add(ag.mul(x, x), x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), True)
    with pytest.raises(ValueError):
        ag.mul(x, 2.0).backward()
