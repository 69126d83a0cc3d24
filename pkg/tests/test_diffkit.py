import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from alda_rl import diffkit as dk
from conftest import SEEDS, gradient_error, projected


def u(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


# ---------------------------------------------------------------------------
# forward values against hand computation


def test_dense_matches_hand_product():
    x = dk.tensor([[1.0, 2.0]])
    W = dk.tensor([[1.0, 0.0], [0.5, -1.0], [2.0, 3.0]])
    b = dk.tensor([0.0, 1.0, -1.0])
    np.testing.assert_allclose(dk.dense(x, W, b).numpy(), [[1.0, -0.5, 7.0]])


def test_conv2d_valid_cross_correlation():
    x = torch.arange(16, dtype=torch.float32).reshape(1, 1, 4, 4)
    k = dk.tensor([[1.0, 0.0], [0.0, -1.0]], shape=(1, 1, 2, 2))
    out = dk.conv2d(x, k).numpy()[0, 0]
    # x[i, j] - x[i+1, j+1] = -5 everywhere
    np.testing.assert_allclose(out, -5.0 * np.ones((3, 3)))


def test_conv1d_against_loop(rng):
    x, k = u(rng, 2, 3, 5), u(rng, 4, 3, 2)
    out = dk.conv1d(torch.tensor(x), torch.tensor(k)).numpy()
    ref = np.zeros((2, 4, 4))
    for b in range(2):
        for o in range(4):
            for t in range(4):
                ref[b, o, t] = (x[b, :, t:t + 2] * k[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv_T(y)> for the same kernel
    x = torch.tensor(u(rng, 1, 2, 8, 8))
    k = torch.tensor(u(rng, 3, 2, 4, 4))
    y = torch.tensor(u(rng, 1, 3, 4, 4))
    lhs = (dk.conv2d(x, k, stride=2, padding=1) * y).sum()
    rhs = (x * dk.conv_transpose2d(y, k, stride=2, padding=1)).sum()
    assert abs(float(lhs - rhs)) < 1e-10


def test_gelu_tanh_formula():
    x = torch.linspace(-4, 4, 17, dtype=torch.float64)
    ref = 0.5 * x * (1 + torch.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(dk.gelu(x).numpy(), ref.numpy(), atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    s = dk.softmax(torch.tensor(u(rng, 6, 5) * 50), axis=1)
    np.testing.assert_allclose(s.sum(1).numpy(), 1.0, atol=1e-12)


def test_l1_distance_broadcasts_scalar():
    np.testing.assert_allclose(dk.l1_distance(0.5, dk.tensor([-1.0, 0.0, 2.0])).numpy(), [1.5, 0.5, 1.5])


def test_small_hand_examples():
    np.testing.assert_array_equal(dk.dense(dk.tensor([[1.0, 2.0]]), dk.tensor([[1.0, 0.0], [0.0, 1.0]]),
                                           dk.tensor([0.0, 0.0])).numpy(), [[1.0, 2.0]])
    np.testing.assert_array_equal(dk.dense(dk.tensor([[1.0, 1.0]]), dk.tensor([[2.0, 3.0]]),
                                           dk.tensor([1.0])).numpy(), [[6.0]])
    x = torch.rand(1, 1, 3, 3)
    assert torch.equal(dk.conv2d(x, torch.ones(1, 1, 1, 1)), x)
    assert float(dk.conv2d(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3))) == 9.0
    seq = dk.tensor([[[1.0, 2.0, 3.0]]])
    assert torch.equal(dk.conv1d(seq, torch.ones(1, 1, 1)), seq)
    assert float(dk.conv1d(seq, torch.ones(1, 1, 3))) == 6.0
    assert float(dk.gelu(torch.zeros(1))) == 0.0
    np.testing.assert_allclose(dk.softmax(torch.zeros(3)).numpy(), [1 / 3] * 3, atol=1e-7)
    np.testing.assert_allclose(dk.l1_distance(0.9, dk.tensor([-1.0, 0.0, 1.0])).numpy(), [1.9, 0.9, 0.1], atol=1e-6)


def test_backward_of_linear_form_is_broadcast_input():
    W = torch.zeros(3, 2, requires_grad=True)
    x = torch.tensor([[1.0, -2.0]])
    g = dk.backward(dk.dense(x, W).sum(), {"W": W})["W"]
    assert torch.equal(g, x.expand(3, 2))


# ---------------------------------------------------------------------------
# shape and value errors


def test_shape_errors():
    with pytest.raises(dk.ShapeError):
        dk.dense(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(dk.ShapeError):
        dk.conv2d(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4))
    with pytest.raises(dk.ShapeError):
        dk.conv1d(torch.zeros(1, 2, 5), torch.zeros(1, 3, 2))
    with pytest.raises(dk.ShapeError):
        dk.softmax(torch.zeros(2, 2), axis=2)
    with pytest.raises(dk.ShapeError):
        dk.tensor([1.0, 2.0, 3.0], shape=(2, 2))
    with pytest.raises(dk.ShapeError):
        dk.backward(torch.zeros(3, requires_grad=True) * 2, {})


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        dk.tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        dk.tensor([float("inf")])


# ---------------------------------------------------------------------------
# gradients against the finite-difference oracle


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradient(seed):
    r = np.random.default_rng(seed)
    err = gradient_error(lambda p: projected(dk.dense(p["x"], p["W"], p["b"])),
                         {"x": u(r, 4, 8), "W": u(r, 3, 8), "b": u(r, 3)})
    assert err < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradient(seed):
    r = np.random.default_rng(seed)
    err = gradient_error(lambda p: projected(dk.conv2d(p["x"], p["k"], p["b"], stride=2, padding=1)),
                         {"x": u(r, 2, 2, 6, 6), "k": u(r, 3, 2, 4, 4), "b": u(r, 3)})
    assert err < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose2d_gradient(seed):
    r = np.random.default_rng(seed)
    err = gradient_error(lambda p: projected(dk.conv_transpose2d(p["x"], p["k"], p["b"], stride=2, padding=1)),
                         {"x": u(r, 2, 3, 3, 3), "k": u(r, 3, 2, 4, 4), "b": u(r, 2)})
    assert err < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_gradient(seed):
    r = np.random.default_rng(seed)
    err = gradient_error(lambda p: projected(dk.conv1d(p["x"], p["k"], p["b"])),
                         {"x": u(r, 2, 3, 4), "k": u(r, 5, 3, 2), "b": u(r, 5)})
    assert err < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_gelu_gradient(seed):
    r = np.random.default_rng(seed)
    assert gradient_error(lambda p: projected(dk.gelu(p["x"])), {"x": u(r, 5, 7) * 3}) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradient(seed):
    r = np.random.default_rng(seed)
    assert gradient_error(lambda p: projected(dk.softmax(p["x"] * 4, axis=1)), {"x": u(r, 3, 6)}) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_l1_distance_gradient(seed):
    r = np.random.default_rng(seed)
    a, b = u(r, 20), u(r, 20)
    b = np.where(np.abs(a - b) < 0.05, b + 0.2, b)  # keep away from the kink
    err = gradient_error(lambda p: projected(dk.l1_distance(p["a"], p["b"])), {"a": a, "b": b})
    assert err < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_reshape_gradient(seed):
    r = np.random.default_rng(seed)
    assert gradient_error(lambda p: projected(dk.reshape(p["x"], (6, 2)) ** 2), {"x": u(r, 3, 4)}) < 1e-3


def test_stop_gradient_blocks_exactly():
    x = torch.tensor([1.0, -2.0, 3.0], requires_grad=True)
    y = torch.tensor([0.5, 0.5, 0.5], requires_grad=True)
    loss = (dk.stop_gradient(x) * y).sum() + (dk.stop_gradient(x * y) ** 2).sum()
    g = dk.backward(loss, {"x": x, "y": y})
    assert torch.equal(g["x"], torch.zeros(3))
    np.testing.assert_array_equal(g["y"].numpy(), x.detach().numpy())


def test_backward_is_deterministic(rng):
    W = torch.tensor(u(rng, 8, 16), dtype=torch.float32, requires_grad=True)
    x = torch.tensor(u(rng, 32, 16), dtype=torch.float32)

    def grads():
        return dk.backward((dk.gelu(dk.dense(x, W)) ** 2).sum(), {"W": W})["W"]

    assert torch.equal(grads(), grads())


def test_backward_groups_matches_backward(rng):
    a = torch.tensor(u(rng, 3), dtype=torch.float32, requires_grad=True)
    b = torch.tensor(u(rng, 3), dtype=torch.float32, requires_grad=True)
    loss = (a * b).sum() + (a ** 2).sum()
    g = dk.backward_groups(loss, {"one": {"a": a}, "two": {"b": b}})
    ref = dk.backward(loss, {"a": a, "b": b})
    assert torch.equal(g["one"]["a"], ref["a"]) and torch.equal(g["two"]["b"], ref["b"])


def test_finite_difference_of_quadratic():
    g = dk.finite_difference_gradient(lambda p: float((p["x"] ** 2).sum()), {"x": np.array([1.0, -2.0])})
    np.testing.assert_allclose(g["x"], [2.0, -4.0], atol=1e-9)


def test_finite_difference_spec_examples():
    g = dk.finite_difference_gradient(lambda p: float(p["x"][0] ** 2), {"x": np.array([3.0])})
    assert abs(g["x"][0] - 6.0) < 1e-4
    g = dk.finite_difference_gradient(lambda p: 4.2, {"x": np.array([3.0, 1.0])})
    assert np.array_equal(g["x"], np.zeros(2))


@pytest.mark.parametrize("seed", SEEDS)
def test_finite_difference_agrees_with_backward_on_mlp(seed):
    r = np.random.default_rng(seed)
    x = u(r, 4, 5)

    def fn(p):
        h = dk.gelu(dk.dense(torch.as_tensor(x, dtype=p["W1"].dtype), p["W1"], p["b1"]))
        return (dk.dense(h, p["W2"], p["b2"]) ** 2).sum()

    assert gradient_error(fn, {"W1": u(r, 6, 5), "b1": u(r, 6), "W2": u(r, 2, 6), "b2": u(r, 2)}) < 1e-3


def test_finite_difference_rejects_non_finite():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        dk.finite_difference_gradient(lambda p: float(np.log(p["x"][0])), {"x": np.array([0.0005])})


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_moves_by_lr_times_sign():
    store = dk.ParamStore({"w": torch.tensor([1.0, -1.0, 0.5])})
    dk.adam_step(store, {"w": torch.tensor([0.3, -2.0, 1e-3])}, lr=0.01)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(store["w"].detach().numpy(), [0.99, -0.99, 0.49], atol=1e-5)


def test_adam_matches_reference_recurrence(rng):
    p0 = u(rng, 5)
    store = dk.ParamStore({"w": torch.tensor(p0)})
    p0 = store["w"].detach().numpy().astype(np.float64)
    p, m, v = p0.copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 6):
        g = u(rng, 5)
        dk.adam_step(store, {"w": torch.tensor(g)}, lr=0.1, weight_decay=0.05)
        g = g + 2 * 0.05 * p
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(store["w"].detach().numpy(), p, atol=1e-6)  # store is float32


def test_adam_minimises_quadratic():
    store = dk.ParamStore({"x": torch.tensor([0.0])})
    for _ in range(200):
        x = store["x"]
        dk.adam_step(store, dk.backward(((x - 2.0) ** 2).sum(), {"x": x}), lr=0.1)
    assert abs(float(store["x"].detach()) - 2.0) < 1e-2


def test_adam_zero_grad_no_decay_is_identity():
    store = dk.ParamStore({"w": torch.tensor([0.2, -0.7])})
    before = store.snapshot()
    dk.adam_step(store, {"w": torch.zeros(2)}, lr=0.1)
    assert torch.equal(store["w"], before["w"])


def test_adam_rejects_bad_inputs():
    store = dk.ParamStore({"w": torch.zeros(2)})
    with pytest.raises(ValueError):
        dk.adam_step(store, {"w": torch.zeros(2)}, lr=0.0)
    with pytest.raises(dk.ShapeError):
        dk.adam_step(store, {"w": torch.zeros(3)}, lr=0.1)


def test_weight_decay_shrinks_towards_zero():
    store = dk.ParamStore({"w": torch.tensor([1.0, -1.0])})
    for _ in range(50):
        dk.adam_step(store, {"w": torch.zeros(2)}, lr=0.01, weight_decay=0.1)
    assert torch.all(store["w"].abs() < 0.6)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    tensors = {"a/w": torch.tensor(u(rng, 3, 4), dtype=torch.float32), "b": torch.tensor([np.float32(1e-30)])}
    manifest = dk.save_tensors(tmp_path / "params", tensors, meta={"step": 7})
    loaded, meta = dk.load_tensors(manifest, {k: t.shape for k, t in tensors.items()})
    assert meta == {"step": 7}
    for k in tensors:
        assert torch.equal(loaded[k], tensors[k])
    info = json.loads(manifest.read_text())
    assert info["byte_order"] == "little" and info["dtype"] == "float32"
    assert info["total_bytes"] == 13 * 4


def test_checkpoint_shape_mismatch_names_parameter(tmp_path):
    manifest = dk.save_tensors(tmp_path / "p", {"enc/w": torch.zeros(2, 3)})
    with pytest.raises(dk.CheckpointError, match="enc/w"):
        dk.load_tensors(manifest, {"enc/w": (3, 2)})
    with pytest.raises(dk.CheckpointError, match="dec/w"):
        dk.load_tensors(manifest, {"enc/w": (2, 3), "dec/w": (1,)})


def test_checkpoint_truncated_blob(tmp_path):
    manifest = dk.save_tensors(tmp_path / "p", {"w": torch.zeros(4)})
    (tmp_path / "p.bin").write_bytes(b"\0" * 8)
    with pytest.raises(dk.CheckpointError):
        dk.load_tensors(manifest)


def test_param_store_state_round_trip(rng):
    store = dk.ParamStore({"w": torch.tensor(u(rng, 3), dtype=torch.float32)})
    dk.adam_step(store, {"w": torch.ones(3)}, lr=0.1)
    other = dk.ParamStore({"w": torch.zeros(3)})
    other.load_state_tensors("g", store.state_tensors("g"))
    assert other.step == 1 and torch.equal(other["w"], store["w"]) and torch.equal(other.v["w"], store.v["w"])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False, width=32), min_size=1, max_size=20))
def test_adam_step_never_moves_more_than_lr(values):
    g = torch.tensor(values, dtype=torch.float32)
    store = dk.ParamStore({"w": torch.zeros(len(values))})
    dk.adam_step(store, {"w": g}, lr=0.05)
    assert float(store["w"].detach().abs().max()) <= 0.05 + 1e-6
