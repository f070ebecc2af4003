import numpy as np
import pytest

from evdetect import ndkernel as nd
from gradcheck import numeric_grad, rel_error

SEEDS = range(20)


def scalar(out, r):
    return float(np.sum(out * r))


# -- convolution ---------------------------------------------------------------


def test_conv_all_ones_example():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
    w = np.ones((1, 1, 1, 3))
    out, _ = nd.conv2d_forward(x, w, np.zeros(1), pad=(0, 1))
    np.testing.assert_array_equal(out.reshape(-1), [3, 6, 5])


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 2, 10))
    w = np.zeros((3, 3, 1, 3))
    for c in range(3):
        w[c, c, 0, 1] = 1.0
    out, _ = nd.conv2d_forward(x, w, None, pad=(0, 1))
    np.testing.assert_array_equal(out, x)


def test_conv_block1_shape():
    x = np.zeros((1, 1, 1, 5120), np.float32)
    w = np.zeros((8, 1, 1, 3), np.float32)
    out, _ = nd.conv2d_forward(x, w, None, pad=(0, 1))
    assert out.shape == (1, 8, 1, 5120)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 7))
    w = rng.standard_normal((5, 3, 4, 3))
    b = rng.standard_normal(5)
    out, _ = nd.conv2d_forward(x, w, b, pad=(0, 1))
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1)))
    ref = np.zeros((2, 5, 1, 7))
    for n in range(2):
        for o in range(5):
            for t in range(7):
                ref[n, o, 0, t] = np.sum(xp[n, :, :, t : t + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(nd.ContractError):
        nd.conv2d_forward(np.zeros((1, 2, 1, 8)), np.zeros((4, 3, 1, 3)))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kernel,pad", [((1, 3), (0, 1)), ((3, 3), (0, 1)), ((3, 1), (0, 0))])
def test_conv_gradients(seed, kernel, pad, both_paths):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 8))
    w = rng.standard_normal((4, 2) + kernel)
    b = rng.standard_normal(4)
    out, cache = nd.conv2d_forward(x, w, b, pad)
    r = rng.standard_normal(out.shape)
    dx, dw, db = nd.conv2d_backward(r, cache)

    def f():
        return scalar(nd.conv2d_forward(x, w, b, pad)[0], r)

    assert rel_error(dx, numeric_grad(f, x)) < 1e-6
    assert rel_error(dw, numeric_grad(f, w)) < 1e-6
    assert rel_error(db, numeric_grad(f, b)) < 1e-6


def test_conv_backward_zero_and_linear():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 1, 16))
    w = rng.standard_normal((4, 3, 1, 3))
    out, cache = nd.conv2d_forward(x, w, np.zeros(4), (0, 1))
    for g in nd.conv2d_backward(np.zeros_like(out), cache):
        assert not np.any(g)
    r = rng.standard_normal(out.shape)
    g1 = nd.conv2d_backward(r, cache)
    g3 = nd.conv2d_backward(3.0 * r, cache)
    for a, b in zip(g1, g3):
        np.testing.assert_allclose(3.0 * a, b, rtol=1e-12)


def test_conv_backward_without_cache():
    with pytest.raises(nd.ContractError):
        nd.conv2d_backward(np.zeros((1, 1, 1, 1)), None)


# -- batch norm ----------------------------------------------------------------


def test_bn_identity_on_standardised_batch():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 3, 2, 16))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    st = nd.BatchNormState.fresh(3, np.float64)
    out, _ = nd.batchnorm2d_forward(x, np.ones(3), np.zeros(3), st, "train")
    # only eps separates the output from the input
    np.testing.assert_allclose(out, x, atol=1e-5 * np.abs(x).max())


def test_bn_constant_channel_gives_shift():
    x = np.full((4, 2, 1, 8), 7.0)
    st = nd.BatchNormState.fresh(2, np.float64)
    out, _ = nd.batchnorm2d_forward(x, np.array([2.0, 3.0]), np.array([0.5, -1.0]), st, "train")
    np.testing.assert_allclose(out[:, 0], 0.5)
    np.testing.assert_allclose(out[:, 1], -1.0)


def test_bn_running_stats_update():
    rng = np.random.default_rng(1)
    x = 2.0 + 3.0 * rng.standard_normal((16, 2, 1, 64))
    st = nd.BatchNormState.fresh(2, np.float64)
    nd.batchnorm2d_forward(x, np.ones(2), np.zeros(2), st, "train")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(st.running_mean, 0.1 * mean)
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * var)


def test_bn_eval_before_training_uses_init_stats():
    x = np.random.default_rng(2).standard_normal((2, 3, 1, 4))
    st = nd.BatchNormState.fresh(3, np.float64)
    out, _ = nd.batchnorm2d_forward(x, np.ones(3), np.zeros(3), st, "eval")
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_bn_gradients(seed, mode, both_paths):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3, 2, 8)) * 2 + 1
    gamma = rng.uniform(0.5, 2.0, 3)
    beta = rng.standard_normal(3)
    st = nd.BatchNormState(rng.standard_normal(3), rng.uniform(0.5, 2, 3))

    def fwd():
        s = nd.BatchNormState(st.running_mean.copy(), st.running_var.copy())
        return nd.batchnorm2d_forward(x, gamma, beta, s, mode)

    out, cache = fwd()
    r = rng.standard_normal(out.shape)
    dx, dg, dbeta = nd.batchnorm2d_backward(r, cache)

    def f():
        return scalar(fwd()[0], r)

    assert rel_error(dx, numeric_grad(f, x)) < 1e-5
    assert rel_error(dg, numeric_grad(f, gamma)) < 1e-5
    assert rel_error(dbeta, numeric_grad(f, beta)) < 1e-5


# -- relu / pool / softmax -----------------------------------------------------


def test_relu_examples():
    out, cache = nd.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    x = -np.arange(1.0, 5.0)
    out, cache = nd.relu_forward(x)
    assert not out.any()
    assert not nd.relu_backward(np.ones(4), cache).any()


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 1, 10))
    x[np.abs(x) < 0.1] += 0.3  # keep away from the kink
    r = rng.standard_normal(x.shape)
    out, cache = nd.relu_forward(x)
    dx = nd.relu_backward(r, cache)
    assert rel_error(dx, numeric_grad(lambda: scalar(nd.relu_forward(x)[0], r), x)) < 1e-6


def test_maxpool_examples(both_paths):
    out, arg = nd.maxpool2d_forward(np.array([1.0, 3.0, 2.0, 5.0]).reshape(1, 1, 1, 4))
    np.testing.assert_array_equal(out.reshape(-1), [3, 5])
    x = np.arange(10.0).reshape(1, 1, 1, 10)
    out, _ = nd.maxpool2d_forward(x)
    np.testing.assert_array_equal(out.reshape(-1), x.reshape(-1)[1::2])


def test_maxpool_tie_goes_to_first(both_paths):
    x = np.array([2.0, 2.0]).reshape(1, 1, 1, 2)
    out, arg = nd.maxpool2d_forward(x)
    dx = nd.maxpool2d_backward(np.ones((1, 1, 1, 1)), arg)
    np.testing.assert_array_equal(dx.reshape(-1), [1, 0])


def test_maxpool_odd_rejected():
    with pytest.raises(nd.ContractError):
        nd.maxpool2d_forward(np.zeros((1, 1, 1, 5)))


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradient(seed, both_paths):
    rng = np.random.default_rng(seed)
    x = rng.permutation(48).reshape(2, 2, 1, 12).astype(np.float64) * 0.1  # tie-free
    r = rng.standard_normal((2, 2, 1, 6))
    out, cache = nd.maxpool2d_forward(x)
    dx = nd.maxpool2d_backward(r, cache)
    assert rel_error(dx, numeric_grad(lambda: scalar(nd.maxpool2d_forward(x)[0], r), x)) < 1e-6


def test_softmax_examples():
    p = nd.grouped_softmax(np.zeros((1, 6, 1, 2)), 3)
    np.testing.assert_allclose(p, 1 / 3)
    p = nd.grouped_softmax(np.array([50.0, -50.0, -50.0]).reshape(1, 3, 1, 1), 3)
    np.testing.assert_allclose(p.reshape(-1), [1, 0, 0], atol=1e-12)
    with pytest.raises(nd.ContractError):
        nd.grouped_softmax(np.zeros((1, 5, 1, 1)), 3)


def test_softmax_groups_normalised():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 12, 1, 20)) * 5
    p = nd.grouped_softmax(x, 3)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(p.reshape(4, 4, 3, 1, 20).sum(axis=2), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 1, 5))
    r = rng.standard_normal(x.shape)
    p = nd.grouped_softmax(x, 3)
    dx = nd.grouped_softmax_backward(p, r, 3)
    num = numeric_grad(lambda: scalar(nd.grouped_softmax(x, 3), r), x)
    assert rel_error(dx, num) < 1e-6


# -- optimiser -----------------------------------------------------------------


def test_sgd_examples():
    p = {"w": np.zeros(1)}
    nd.SGD(lr=0.1, momentum=0.0).step(p, {"w": np.ones(1)})
    assert p["w"][0] == pytest.approx(-0.1)

    p = {"w": np.array([1.5, -2.0])}
    opt = nd.SGD(lr=0.1, momentum=0.9)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])

    p = {"w": np.zeros(1)}
    opt = nd.SGD(lr=0.1, momentum=0.9)
    opt.step(p, {"w": np.ones(1)})
    assert opt.velocity["w"][0] == pytest.approx(1.0) and p["w"][0] == pytest.approx(-0.1)
    opt.step(p, {"w": np.ones(1)})
    assert opt.velocity["w"][0] == pytest.approx(1.9) and p["w"][0] == pytest.approx(-0.29)


def test_sgd_rejects_non_finite():
    p = {"w": np.zeros(2)}
    with pytest.raises(nd.NonFiniteGradient):
        nd.SGD().step(p, {"w": np.array([1.0, np.nan])})
    np.testing.assert_array_equal(p["w"], 0)


# -- tensor container ----------------------------------------------------------


def test_tensor_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    path = tmp_path / "t.bin"
    nd.save_tensors(path, t, {"x": 1})
    back, meta = nd.load_tensors(path)
    assert meta == {"x": 1}
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])
    raw = path.read_bytes()
    assert raw[:4] == b"EVDT"
    nd.save_tensors(tmp_path / "u.bin", t, {"x": 1})
    assert (tmp_path / "u.bin").read_bytes() == raw


def test_tensor_file_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        nd.load_tensors(p)


@pytest.mark.parametrize("value, expected", [("1", "False"), ("0", "True"), ("", "True")])
def test_env_flag_selects_kernel_path(value, expected):
    import os
    import subprocess
    import sys

    env = dict(os.environ, EVDETECT_DISABLE_NUMBA=value)
    out = subprocess.run(
        [sys.executable, "-c", "from evdetect import _accel; print(_accel.enabled())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
