import numpy as np
import pytest

from osxray.errors import ContractError, DimensionError
from osxray.layers import (LayerSpec, ModelParams, ModelSpec, batchnorm, build_darkcovidnet,
                           conv2d, forward, init_params, load_checkpoint, maxpool,
                           save_checkpoint)
from osxray.tensor import Tensor, grad_check

# Reference per-conv trainable-parameter counts of the full-width 3-class
# model, keyed by zero-based conv index.
REFERENCE_COUNTS = {
    0: 216, 1: 1152, 2: 4608, 3: 512, 4: 4608, 5: 18432, 6: 2048, 7: 18432,
    8: 73728, 9: 8192, 11: 294912, 12: 32768, 13: 294912, 15: 294912, 16: 6915,
}


def conv_param_counts(spec, params):
    counts = {}
    for name, t in params.named():
        if name.startswith("conv"):
            idx = int(name.split(".")[0][4:])
            counts[idx] = counts.get(idx, 0) + t.size
    return counts


# ----------------------------------------------------------------- conv2d

def test_conv_first_layer_shape_and_weight_count():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 3, 256, 256)).astype(np.float32))
    w = Tensor(rng.normal(size=(8, 3, 3, 3)).astype(np.float32))
    out = conv2d(x, w, None, stride=1, pad=1)
    assert out.shape == (1, 8, 256, 256)
    assert w.size == 216


def test_conv_1x1_weight_count():
    w = np.zeros((32, 16, 1, 1))
    assert w.size == 512


def test_conv_1x1_pad1_grows_spatial():
    x = Tensor(np.zeros((1, 16, 64, 64), dtype=np.float32))
    w = Tensor(np.zeros((32, 16, 1, 1), dtype=np.float32))
    out = conv2d(x, w, None, stride=1, pad=1)
    assert out.shape == (1, 32, 66, 66)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((2, 3, 3, 3))), None, 1, 1)


def test_conv_gradcheck():
    rng = np.random.default_rng(1)
    x_np = rng.normal(size=(2, 2, 5, 5))
    w_np = rng.normal(size=(3, 2, 3, 3))
    b_np = rng.normal(size=3)

    def f_w(w):
        return conv2d(Tensor(x_np, dtype=np.float64), w, Tensor(b_np, dtype=np.float64), 1, 1).frobenius_sq()

    def f_x(x):
        return conv2d(x, Tensor(w_np, dtype=np.float64), Tensor(b_np, dtype=np.float64), 1, 1).frobenius_sq()

    assert grad_check(f_w, Tensor(w_np, dtype=np.float64), tol=1e-6)["pass"]
    assert grad_check(f_x, Tensor(x_np, dtype=np.float64), tol=1e-6)["pass"]


# ---------------------------------------------------------------- maxpool

def test_maxpool_single_window():
    out = maxpool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data[0, 0, 0, 0] == 4.0


def test_maxpool_tie_breaks_to_first_element():
    x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    out = maxpool(x)
    assert out.data[0, 0, 0, 0] == 7.0
    out.sum().backward()
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_halves_256():
    out = maxpool(Tensor(np.zeros((1, 2, 256, 256), dtype=np.float32)))
    assert out.shape == (1, 2, 128, 128)


def test_maxpool_odd_sizes_floor():
    # floor halving on odd inputs: 35 -> 17, 19 -> 9
    assert maxpool(Tensor(np.zeros((1, 1, 35, 35)))).shape == (1, 1, 17, 17)
    assert maxpool(Tensor(np.zeros((1, 1, 19, 19)))).shape == (1, 1, 9, 9)


def test_maxpool_gradcheck():
    rng = np.random.default_rng(2)
    x_np = rng.normal(size=(1, 2, 6, 6))  # distinct values, no ties

    def f(x):
        return maxpool(x).frobenius_sq()

    assert grad_check(f, Tensor(x_np, dtype=np.float64), tol=1e-6)["pass"]


# -------------------------------------------------------------- batchnorm

def _bn_params(c):
    params = ModelParams()
    params.tensors["bn0.gamma"] = Tensor(np.ones((1, c, 1, 1), dtype=np.float32), requires_grad=True)
    params.tensors["bn0.beta"] = Tensor(np.zeros((1, c, 1, 1), dtype=np.float32), requires_grad=True)
    params.buffers["bn0.mean"] = np.zeros((1, c, 1, 1), dtype=np.float32)
    params.buffers["bn0.var"] = np.ones((1, c, 1, 1), dtype=np.float32)
    return params


def test_batchnorm_constant_input_returns_shift():
    params = _bn_params(2)
    params.tensors["bn0.beta"] = Tensor(np.array([1.0, -2.0]).reshape(1, 2, 1, 1).astype(np.float32),
                                        requires_grad=True)
    x = Tensor(np.full((4, 2, 3, 3), 5.0, dtype=np.float32))
    out = batchnorm(x, params, "bn0", "train")
    assert np.allclose(out.data[:, 0], 1.0, atol=1e-4)
    assert np.allclose(out.data[:, 1], -2.0, atol=1e-4)


def test_batchnorm_zero_mean_unit_var_passthrough():
    rng = np.random.default_rng(4)
    x_np = rng.normal(size=(8, 1, 16, 16)).astype(np.float32)
    x_np = (x_np - x_np.mean()) / x_np.std()
    params = _bn_params(1)
    # tiny eps so the variance floor does not mask the passthrough check
    out = batchnorm(Tensor(x_np), params, "bn0", "train", eps=1e-10)
    assert np.abs(out.data - x_np).max() < 1e-5


def test_batchnorm_running_stats_closed_form():
    rng = np.random.default_rng(5)
    x_np = rng.normal(loc=2.0, scale=3.0, size=(16, 1, 4, 4)).astype(np.float32)
    params = _bn_params(1)
    batchnorm(Tensor(x_np), params, "bn0", "train")
    mu = x_np.mean()
    var = x_np.var()
    assert params.buffers["bn0.mean"].ravel()[0] == pytest.approx(0.9 * 0.0 + 0.1 * mu, rel=1e-5)
    assert params.buffers["bn0.var"].ravel()[0] == pytest.approx(0.9 * 1.0 + 0.1 * var, rel=1e-5)


def test_batchnorm_eval_before_train_warns():
    params = _bn_params(1)
    with pytest.warns(UserWarning, match="eval before any train-mode update"):
        batchnorm(Tensor(np.ones((2, 1, 2, 2), dtype=np.float32)), params, "bn0", "eval")


def test_batchnorm_gradcheck():
    # probe with a fixed random linear functional; the naive sum-of-squares
    # of a standardized batch is nearly constant and ill-conditioned for FD
    rng = np.random.default_rng(6)
    x_np = rng.normal(size=(4, 2, 3, 3))
    w_np = rng.normal(size=(4, 2, 3, 3))

    def f(x):
        params = _bn_params(2)
        params.tensors["bn0.gamma"] = Tensor(np.full((1, 2, 1, 1), 1.5), dtype=np.float64)
        params.tensors["bn0.beta"] = Tensor(np.full((1, 2, 1, 1), 0.3), dtype=np.float64)
        return (batchnorm(x, params, "bn0", "train") * Tensor(w_np, dtype=np.float64)).sum()

    assert grad_check(f, Tensor(x_np, dtype=np.float64), eps=1e-6, tol=1e-6)["pass"]


# ---------------------------------------------------------------- builder

def test_backbone_has_17_convs_and_5_pools():
    spec = build_darkcovidnet(3)
    assert spec.conv_count == 17
    assert spec.pool_count == 5


def test_reference_parameter_counts_exact():
    spec = build_darkcovidnet(3)
    params = init_params(spec, seed=0)
    counts = conv_param_counts(spec, params)
    for idx, expected in REFERENCE_COUNTS.items():
        assert counts[idx] == expected, f"conv {idx}: {counts[idx]} != {expected}"


def test_flatten_lengths():
    assert build_darkcovidnet(3).flatten_length() == 507
    assert build_darkcovidnet(3, os_k=3).flatten_length() == 507
    assert build_darkcovidnet(3, os_k=4).flatten_length() == 676


def test_final_spatial_is_13x13():
    spec = build_darkcovidnet(3, os_k=4)
    assert spec.flatten_length() == 4 * 13 * 13


def test_unsupported_num_classes():
    with pytest.raises(ContractError):
        build_darkcovidnet(5)


def test_layer12_conv_param_count():
    spec = build_darkcovidnet(3)
    params = init_params(spec, seed=0)
    assert conv_param_counts(spec, params)[11] == 294912


# ---------------------------------------------------------------- forward

def desk_spec(os_k=None, num_classes=3, side=32):
    return build_darkcovidnet(num_classes, os_k, image_side=side, width_divisor=8)


def test_forward_zero_linear_gives_uniform_softmax():
    spec = desk_spec()
    params = init_params(spec, seed=1)
    params.tensors["linear.w"] = Tensor(np.zeros_like(params.tensors["linear.w"].data),
                                        requires_grad=True)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32))
    out = forward(spec, params, x, mode="train")
    assert np.array_equal(out.logits.data, np.zeros((2, 3)))


def test_forward_eval_batch_independence():
    spec = desk_spec()
    params = init_params(spec, seed=2)
    rng = np.random.default_rng(1)
    a = rng.normal(size=(1, 3, 32, 32)).astype(np.float32)
    b = rng.normal(size=(1, 3, 32, 32)).astype(np.float32)
    # one training pass so running stats are populated
    forward(spec, params, Tensor(np.concatenate([a, b])), mode="train")
    solo = forward(spec, params, Tensor(a), mode="eval").logits.data
    pair = forward(spec, params, Tensor(np.concatenate([a, b])), mode="eval").logits.data
    assert np.abs(solo[0] - pair[0]).max() < 1e-6


def test_forward_eval_is_pure():
    spec = desk_spec()
    params = init_params(spec, seed=3)
    forward(spec, params, Tensor(np.ones((2, 3, 32, 32), dtype=np.float32)), mode="train")
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 32, 32)).astype(np.float32))
    first = forward(spec, params, x, mode="eval").logits.data
    second = forward(spec, params, x, mode="eval").logits.data
    assert np.array_equal(first, second)


def test_forward_shape_error_names_layer():
    spec = build_darkcovidnet(3)
    params = init_params(spec, seed=0)
    with pytest.raises(DimensionError, match="forward"):
        forward(spec, params, Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)))


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    spec = desk_spec(os_k=3)
    params = init_params(spec, seed=7)
    forward(spec, params, Tensor(np.ones((2, 3, 32, 32), dtype=np.float32)), mode="train")
    path = tmp_path / "model.osx"
    save_checkpoint(path, spec, params, seed=7)
    spec2, params2, seed2 = load_checkpoint(path)
    assert seed2 == 7
    assert spec2 == spec
    for name, t in params.named():
        assert np.array_equal(t.data, params2.tensors[name].data)
    for name, buf in params.buffers.items():
        assert np.array_equal(buf, params2.buffers[name])
    # saving the loaded model reproduces the file byte for byte
    path2 = tmp_path / "model2.osx"
    save_checkpoint(path2, spec2, params2, seed=seed2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_corrupt_rejected(tmp_path):
    path = tmp_path / "bad.osx"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(path)
