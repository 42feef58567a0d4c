import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from boxboot import diffnet, loss_core, loss_multiclass
from boxboot.diffnet import AdamState, CheckpointError, NonFiniteError
from boxboot.gradcheck import network_error


def zero_params(n_classes=1):
    return {k: np.zeros_like(v) for k, v in diffnet.init_params(n_classes).items()}


def random_params(n_classes, seed=0):
    rng = np.random.default_rng(seed)
    params = diffnet.init_params(n_classes, seed=seed)
    for name in diffnet.LAYERS:
        params[f"{name}.bias"] = rng.normal(0, 0.3, size=params[f"{name}.bias"].shape)
    return params


# init / forward


def test_init_shapes_and_log_var_bias():
    p = diffnet.init_params(3, seed=1)
    assert p["conv1.weight"].shape == (16, 3, 3, 3)
    assert p["conv2.weight"].shape == (16, 16, 3, 3)
    assert p["conv3.weight"].shape == (6, 16, 3, 3)
    assert np.all(p["conv3.bias"][:3] == 0) and np.all(p["conv3.bias"][3:] == diffnet.LOG_VAR_BIAS)
    a = np.sqrt(6 / (9 * 16 + 9 * 16))
    assert np.abs(p["conv2.weight"]).max() <= a
    assert diffnet.n_classes_of(p) == 3
    with pytest.raises(ValueError):
        diffnet.init_params(0)


def test_zero_network_outputs_zero():
    out, _ = diffnet.forward(zero_params(2), np.random.default_rng(0).random((2, 3, 9, 7)))
    assert np.all(out.mu == 0) and np.all(out.log_var == 0)


@pytest.mark.parametrize("hw", [(64, 64), (17, 33)])
def test_output_shape_matches_input(hw):
    out, _ = diffnet.forward(diffnet.init_params(2), np.ones((1, 3, *hw)))
    assert out.mu.shape == (1, 2, *hw) and out.log_var.shape == (1, 2, *hw)


def test_single_image_input():
    image = np.random.default_rng(0).random((3, 5, 6))
    out, _ = diffnet.forward(diffnet.init_params(1), image)
    assert out.mu.shape == (1, 1, 5, 6)


def test_forward_deterministic():
    image = np.random.default_rng(3).random((2, 3, 12, 10))
    a, _ = diffnet.forward(diffnet.init_params(2, seed=5), image)
    b, _ = diffnet.forward(diffnet.init_params(2, seed=5), image)
    assert a.mu.tobytes() == b.mu.tobytes() and a.log_var.tobytes() == b.log_var.tobytes()


@pytest.mark.parametrize("n_classes", [1, 2, 3])
def test_forward_matches_direct_convolution(n_classes):
    rng = np.random.default_rng(n_classes)
    params = random_params(n_classes, seed=n_classes)
    images = rng.random((2, 3, 7, 9))
    out, _ = diffnet.forward(params, images)
    for i in range(2):
        ref = oracles.reference_net(params, images[i])
        assert np.allclose(out.mu[i], ref[:n_classes], rtol=0, atol=1e-12)
        assert np.allclose(out.log_var[i], ref[n_classes:], rtol=0, atol=1e-12)


def test_forward_shape_errors():
    params = diffnet.init_params(1)
    with pytest.raises(ValueError):
        diffnet.forward(params, np.zeros((1, 4, 8, 8)))
    with pytest.raises(ValueError):
        diffnet.forward(params, np.zeros((1, 3, 2, 8)))
    with pytest.raises(ValueError):
        diffnet.forward(params, np.zeros((8, 8)))


@settings(max_examples=15, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 2**31 - 1))
def test_translation_equivariance(dy, dx, seed):
    rng = np.random.default_rng(seed)
    params = random_params(1, seed=seed % 1000)
    image = rng.random((3, 20, 20))
    shifted = np.roll(image, (dy, dx), axis=(1, 2))
    a, _ = diffnet.forward(params, image)
    b, _ = diffnet.forward(params, shifted)
    # the receptive field is 7x7, so stay 3 pixels clear of both the border and the wrap seam
    m = 3 + 3
    inner = (slice(m, 20 - m), slice(m, 20 - m))
    a_shift = np.roll(a.mu[0, 0], (dy, dx), axis=(0, 1))
    assert np.allclose(b.mu[0, 0][inner], a_shift[inner], rtol=0, atol=1e-12)


# backward


def test_backward_zero_output_gradient():
    params = diffnet.init_params(2, seed=1)
    out, cache = diffnet.forward(params, np.random.default_rng(0).random((1, 3, 8, 8)))
    grads = diffnet.backward(params, cache, np.zeros_like(out.mu), np.zeros_like(out.log_var))
    assert set(grads) == set(params)
    assert all(np.all(g == 0) for g in grads.values())


@pytest.mark.parametrize("n_classes", [1, 2, 3])
def test_backward_random_direction_matches_finite_differences(n_classes):
    rng = np.random.default_rng(10 + n_classes)
    params = random_params(n_classes, seed=n_classes)
    images = rng.random((2, 3, 8, 8))
    probe = rng.normal(size=(2, 2 * n_classes, 8, 8))

    def f(p):
        out, cache = diffnet.forward(p, images)
        value = float((out.mu * probe[:, :n_classes]).sum() + (out.log_var * probe[:, n_classes:]).sum())
        return value, diffnet.backward(p, cache, probe[:, :n_classes], probe[:, n_classes:])

    assert diffnet.finite_diff_check(f, params, n_probes=60, h=1e-6, seed=n_classes) <= 1e-4


def test_backward_every_parameter_small_net():
    # every coordinate of a narrow net, not just a sample
    rng = np.random.default_rng(0)
    params = diffnet.init_params(1, seed=2, hidden=2)
    for name in diffnet.LAYERS:
        params[f"{name}.bias"] = rng.normal(0, 0.3, size=params[f"{name}.bias"].shape)
    images = rng.random((1, 3, 5, 5))
    probe = rng.normal(size=(1, 2, 5, 5))

    def f(p):
        out, cache = diffnet.forward(p, images)
        return float((out.mu * probe[:, :1]).sum() + (out.log_var * probe[:, 1:]).sum()), diffnet.backward(
            p, cache, probe[:, :1], probe[:, 1:]
        )

    total = sum(v.size for v in params.values())
    assert diffnet.finite_diff_check(f, params, n_probes=total, h=1e-6) <= 1e-4


def test_dead_relu_blocks_gradient():
    params = diffnet.init_params(1, seed=0)
    params["conv1.bias"][:] = -1e3  # every first-layer unit is dead for inputs in [0, 1]
    out, cache = diffnet.forward(params, np.random.default_rng(0).random((1, 3, 6, 6)))
    grads = diffnet.backward(params, cache, np.ones_like(out.mu), np.ones_like(out.log_var))
    assert np.all(grads["conv1.weight"] == 0) and np.all(grads["conv1.bias"] == 0)
    assert np.all(grads["conv2.weight"] == 0)


def test_backward_shape_mismatch():
    params = diffnet.init_params(1)
    out, cache = diffnet.forward(params, np.zeros((1, 3, 8, 8)))
    with pytest.raises(ValueError):
        diffnet.backward(params, cache, np.zeros((1, 1, 8, 7)), np.zeros((1, 1, 8, 7)))


@pytest.mark.parametrize("n_classes", [1, 2, 3])
def test_end_to_end_composite_gradients(n_classes):
    if n_classes == 1:
        loss = lambda lg, t, fr: loss_core.composite_binary_loss(lg, t, detached=fr)  # noqa: E731
    else:
        loss = lambda lg, t, fr: loss_multiclass.composite_multiclass_loss(lg, t, tau=0.5, detached=fr)  # noqa: E731
    assert network_error(loss, n_classes, seed=n_classes) <= 1e-4


# finite_diff_check


def test_finite_diff_check_linear_function():
    # round-off in f(x+h) - f(x-h) is about ulp(f) / h, so keep |f| below 1
    params = {k: 0.01 * v for k, v in diffnet.init_params(2, seed=0).items()}

    def f(p):
        return float(sum(v.sum() for v in p.values())), {k: np.ones_like(v) for k, v in p.items()}

    assert diffnet.finite_diff_check(f, params, n_probes=50) <= 1e-10


def test_finite_diff_check_catches_wrong_gradient():
    params = diffnet.init_params(1, seed=0)

    def f(p):
        return float(sum((v**2).sum() for v in p.values())), {k: -2 * v for k, v in p.items()}

    assert diffnet.finite_diff_check(f, params, n_probes=20) > 1.0


def test_finite_diff_check_preconditions():
    params = diffnet.init_params(1)
    f = lambda p: (0.0, {k: np.zeros_like(v) for k, v in p.items()})  # noqa: E731
    with pytest.raises(ValueError):
        diffnet.finite_diff_check(f, params, h=0.0)
    with pytest.raises(ValueError):
        diffnet.finite_diff_check(f, params, n_probes=0)
    with pytest.raises(NonFiniteError):
        diffnet.finite_diff_check(lambda p: (float("nan"), {}), params)


# Adam


def test_adam_first_step_example():
    params = {"w": np.array([1.0])}
    diffnet.adam_step(params, {"w": np.array([3.0])}, AdamState(lr=0.1))
    assert abs(params["w"][0] - (1.0 - 0.1 * 3 / (3 + 1e-8))) <= 1e-15


def test_adam_second_step_by_hand():
    params = {"w": np.array([0.0])}
    state = AdamState(lr=0.01)
    diffnet.adam_step(params, {"w": np.array([1.0])}, state)
    diffnet.adam_step(params, {"w": np.array([-2.0])}, state)
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999**2)
    expected = -0.01 * (1 / (1 + 1e-8)) - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(params["w"][0] - expected) <= 1e-15
    assert state.t == 2


def test_adam_zero_gradient_is_identity():
    params = diffnet.init_params(1, seed=3)
    before = {k: v.copy() for k, v in params.items()}
    diffnet.adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, AdamState())
    assert all(np.array_equal(params[k], before[k]) for k in params)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_adam_zero_lr_is_identity(seed):
    rng = np.random.default_rng(seed)
    params = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=5)}
    before = {k: v.copy() for k, v in params.items()}
    state = AdamState(lr=0.0)
    for _ in range(3):
        diffnet.adam_step(params, {k: rng.normal(size=v.shape) for k, v in params.items()}, state)
    assert all(np.array_equal(params[k], before[k]) for k in params)


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-6), min_size=1, max_size=20))
def test_adam_first_step_sign(g):
    g = np.array(g)
    params = {"w": np.zeros_like(g)}
    state = AdamState(lr=1e-3)
    diffnet.adam_step(params, {"w": g}, state)
    assert np.array_equal(np.sign(params["w"]), -np.sign(g))
    assert np.all(state.v["w"] >= 0)


def test_adam_non_finite_gradient_names_parameter():
    params = {"conv2.bias": np.zeros(3), "conv1.bias": np.zeros(2)}
    before = {k: v.copy() for k, v in params.items()}
    with pytest.raises(NonFiniteError, match="conv2.bias"):
        diffnet.adam_step(params, {"conv1.bias": np.ones(2), "conv2.bias": np.array([0.0, np.inf, 1.0])}, AdamState())
    # nothing moved
    assert all(np.array_equal(params[k], before[k]) for k in params)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        diffnet.adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())


# checkpoints


def test_checkpoint_round_trip(tmp_path):
    params = random_params(2, seed=4)
    path = tmp_path / "a.ckpt"
    diffnet.save_checkpoint(path, params)
    loaded = diffnet.load_checkpoint(path)
    assert set(loaded) == set(params)
    for k in params:
        assert loaded[k].shape == params[k].shape
        assert loaded[k].tobytes() == params[k].tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "a.ckpt"
    params = diffnet.init_params(1)
    diffnet.save_checkpoint(path, params)
    data = path.read_bytes()
    assert data[:8] == b"BOXBOOT1"
    total = 8 + sum(4 + len(k) + 12 + 8 * v.size for k, v in params.items())
    assert len(data) == total
    # first record is conv1.bias, stored as (16, 1, 1)
    assert int.from_bytes(data[8:12], "little") == len("conv1.bias")
    assert data[12:22] == b"conv1.bias"
    assert [int.from_bytes(data[22 + 4 * i : 26 + 4 * i], "little") for i in range(3)] == [16, 1, 1]


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    diffnet.save_checkpoint(path, diffnet.init_params(1))
    data = bytearray(path.read_bytes())
    data[0:8] = b"BOXBOOT2"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        diffnet.load_checkpoint(path)


@pytest.mark.parametrize("cut", [1, 7, 100, 2000])
def test_checkpoint_truncated(tmp_path, cut):
    path = tmp_path / "t.ckpt"
    diffnet.save_checkpoint(path, diffnet.init_params(1))
    data = path.read_bytes()
    path.write_bytes(data[:-cut])
    with pytest.raises(CheckpointError):
        diffnet.load_checkpoint(path)
