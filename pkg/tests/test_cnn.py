import numpy as np
import pytest

from astrocnn.cnn import (
    ARCH_3CNN,
    CnnModel,
    ConvLayer,
    ModelFormatError,
    TrainConfig,
    TrainingDiverged,
    build_1cnn,
    build_3cnn,
    build_model,
    decode_model,
    encode_model,
    forward,
    load_model,
    loss_and_gradients,
    save_model,
    train,
)
from astrocnn.dataset import PatchSet

rng = np.random.default_rng(2024)


def patch_set(inputs, targets):
    n = len(inputs)
    return PatchSet(np.asarray(inputs), np.asarray(targets), np.full(n, "toy", dtype=object),
                    np.zeros(n, int), np.zeros(n, int))


def tiny_model(seed=0):
    m = build_model(((1, 2, 3), (2, 2, 3), (2, 1, 3)), seed=seed).astype(np.float64)
    for layer in m.layers:
        layer.biases[:] = 0.1  # keep most ReLUs active
    return m


# ---------------------------------------------------------------- geometry

def test_3cnn_shapes():
    m = build_3cnn(0)
    _, acts = forward(m, np.zeros((32, 32), np.float32), keep_intermediates=True)
    assert [a.shape[1:] for a in acts] == [(64, 23, 23), (16, 18, 18), (1, 14, 14)]
    assert m.receptive_field == (19, 19)


def test_parameter_counts():
    assert build_3cnn().n_params == 1 * 64 * 100 + 64 + 64 * 16 * 36 + 16 + 16 * 25 + 1 == 43745
    assert build_1cnn().n_params == 362


def test_1cnn_same_geometry():
    assert build_1cnn().output_shape(32, 32) == (14, 14)


def test_1cnn_zero_init_and_glorot_option():
    assert not np.any(build_1cnn().layers[0].weights)
    w = build_1cnn(3, init="glorot").layers[0].weights
    bound = np.sqrt(6.0 / (2 * 361))
    assert np.abs(w).max() <= bound and np.any(w)
    with pytest.raises(ValueError):
        build_1cnn(init="ones")


def test_glorot_bounds_and_seed():
    a = build_3cnn(5)
    b = build_3cnn(5)
    for la, lb, (ci, co, k) in zip(a.layers, b.layers, ARCH_3CNN):
        assert np.array_equal(la.weights, lb.weights)
        assert np.abs(la.weights).max() <= np.sqrt(6.0 / ((ci + co) * k * k))
        assert not np.any(la.biases)
    assert not np.array_equal(a.layers[0].weights, build_3cnn(6).layers[0].weights)


def test_channel_chain_validated():
    w1 = np.zeros((4, 1, 3, 3), np.float32)
    w2 = np.zeros((1, 3, 3, 3), np.float32)
    with pytest.raises(ValueError, match="expects 3 channels"):
        CnnModel([ConvLayer(w1, np.zeros(4, np.float32)), ConvLayer(w2, np.zeros(1, np.float32))])


def test_input_smaller_than_receptive_field():
    with pytest.raises(ValueError, match="receptive field"):
        forward(build_3cnn(), np.zeros((18, 40), np.float32))


def test_translation_covariance():
    m = build_3cnn(1)
    img = rng.random((40, 40)).astype(np.float32)
    full = forward(m, img)
    part = forward(m, img[3:35, 5:37])
    np.testing.assert_allclose(part, full[3:17, 5:19], atol=1e-5)


def test_batch_and_single_agree():
    m = build_3cnn(2)
    xs = rng.random((3, 32, 32)).astype(np.float32)
    stacked = forward(m, xs)
    for k in range(3):
        np.testing.assert_allclose(forward(m, xs[k]), stacked[k], atol=1e-6)


# ---------------------------------------------------------------- gradients

def numeric_gradient(model, x, t, h=1e-3):
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp, _ = loss_and_gradients(model, x, t)
            p[i] = old - h
            fm, _ = loss_and_gradients(model, x, t)
            p[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def test_gradient_check():
    # fixed draw whose pre-activations stay clear of the ReLU kinks
    r = np.random.default_rng(2024)
    m = tiny_model()
    x = r.random((2, 12, 12))
    t = r.random((2, 6, 6))
    _, grads = loss_and_gradients(m, x, t)
    analytic = [g for pair in grads for g in pair]
    numeric = numeric_gradient(m, x, t)
    for a, n in zip(analytic, numeric):
        rel = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
        assert rel < 1e-4


def test_duplicated_batch_same_gradient():
    m = tiny_model(1)
    x = rng.random((3, 12, 12))
    t = rng.random((3, 6, 6))
    l1, g1 = loss_and_gradients(m, x, t)
    l2, g2 = loss_and_gradients(m, np.concatenate([x, x]), np.concatenate([t, t]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    for (a, b), (c, d) in zip(g1, g2):
        np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(b, d, rtol=1e-10, atol=1e-14)


def test_perfect_model_has_zero_gradient():
    m = tiny_model(2)
    x = rng.random((4, 12, 12))
    t = forward(m, x)
    loss, grads = loss_and_gradients(m, x, t)
    assert loss == 0.0
    assert all(not np.any(dw) and not np.any(db) for dw, db in grads)


def test_target_shape_checked():
    with pytest.raises(ValueError, match="outputs"):
        loss_and_gradients(build_3cnn(), np.zeros((1, 32, 32)), np.zeros((1, 13, 13)))


# ---------------------------------------------------------------- training

def linear_toy(n=200, seed=0):
    """Targets produced by a fixed 19x19 filter, so the 1-CNN can fit them exactly."""
    r = np.random.default_rng(seed)
    true = build_1cnn(seed, init="glorot")
    x = r.standard_normal((n, 32, 32)).astype(np.float32)
    return true, patch_set(x, forward(true, x))


def test_zero_learning_rate_keeps_weights():
    _, data = linear_toy(60)
    m = build_1cnn(4, init="glorot")
    out, hist = train(m, data, data, TrainConfig(learning_rate=0.0, max_epochs=2, early_stop=False))
    assert out.layers[0].weights.tobytes() == m.layers[0].weights.tobytes()
    assert hist.val_loss[0] == pytest.approx(hist.initial_val_loss, rel=1e-6)


def test_training_decreases_loss():
    _, data = linear_toy(200)
    m = build_1cnn()
    out, hist = train(m, data, data, TrainConfig(learning_rate=0.05, max_epochs=5))
    assert hist.val_loss[-1] < 0.2 * hist.initial_val_loss


def test_input_model_untouched():
    _, data = linear_toy(50)
    m = build_1cnn()
    train(m, data, data, TrainConfig(max_epochs=1))
    assert not np.any(m.layers[0].weights)


def test_early_stopping_returns_previous_snapshot():
    _, data = linear_toy(50)
    losses = iter([2.0, 1.0, 0.5, 0.6, 0.1])
    seen = []

    def val_loss(model):
        seen.append(model.copy())
        return next(losses)

    out, hist = train(build_1cnn(), data, data, TrainConfig(max_epochs=10), val_loss_fn=val_loss)
    assert hist.stopped_early
    assert hist.best_epoch == 2
    assert hist.val_loss == [1.0, 0.5, 0.6]
    # seen[0] is the initial model, seen[k] the model after epoch k
    assert out.layers[0].weights.tobytes() == seen[2].layers[0].weights.tobytes()
    assert out.layers[0].weights.tobytes() != seen[3].layers[0].weights.tobytes()


def test_no_early_stop_runs_all_epochs():
    _, data = linear_toy(50)
    losses = iter([2.0, 1.0, 1.5, 2.0])
    _, hist = train(build_1cnn(), data, data, TrainConfig(max_epochs=3, early_stop=False),
                    val_loss_fn=lambda m: next(losses))
    assert len(hist.val_loss) == 3 and not hist.stopped_early


def full_batch_grad(model, data):
    _, g = loss_and_gradients(model, data.inputs, data.targets)
    return [a for pair in g for a in pair]


def test_momentum_zero_is_plain_sgd():
    _, data = linear_toy(40)
    m0 = build_1cnn(1, init="glorot").astype(np.float64)
    cfg = TrainConfig(learning_rate=0.1, momentum=0.0, batch_size=40, max_epochs=2, early_stop=False)
    out, _ = train(m0, data, data, cfg)
    ref = m0.copy()
    for _ in range(2):
        for p, g in zip(ref.parameters(), full_batch_grad(ref, data)):
            p -= 0.1 * g
    for a, b in zip(out.parameters(), ref.parameters()):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_nesterov_uses_lookahead_gradient():
    _, data = linear_toy(40)
    lr, mu = 0.1, 0.9
    m0 = build_1cnn(1, init="glorot").astype(np.float64)
    cfg = TrainConfig(learning_rate=lr, momentum=mu, batch_size=40, max_epochs=3, early_stop=False)
    out, _ = train(m0, data, data, cfg)
    ref = m0.copy()
    vel = [np.zeros_like(p) for p in ref.parameters()]
    for _ in range(3):
        ahead = ref.copy()
        for p, v in zip(ahead.parameters(), vel):
            p += mu * v
        for p, v, g in zip(ref.parameters(), vel, full_batch_grad(ahead, data)):
            v *= mu
            v -= lr * g
            p += v
    for a, b in zip(out.parameters(), ref.parameters()):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-13)


def test_training_is_bit_reproducible():
    _, data = linear_toy(120)
    cfg = TrainConfig(max_epochs=2, batch_size=25, seed=9)
    a, _ = train(build_3cnn(0), data, data, cfg)
    b, _ = train(build_3cnn(0), data, data, cfg)
    assert encode_model(a) == encode_model(b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    _, data = linear_toy(40)
    with pytest.raises(TrainingDiverged, match="learning rate"):
        train(build_1cnn(), data, data,
              TrainConfig(learning_rate=1e3, batch_size=10, max_epochs=5, early_stop=False))


@pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(momentum=1.0),
                                    dict(batch_size=0), dict(max_epochs=0)])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------- model files

def test_model_roundtrip_and_size(tmp_path):
    m = build_3cnn(3)
    path = tmp_path / "m.cnn"
    save_model(m, path)
    assert path.stat().st_size == 12 + 3 * 17 + 4 * 43745
    back = load_model(path)
    assert encode_model(back) == encode_model(m)
    assert [l.relu for l in back.layers] == [True, True, True]
    x = rng.random((32, 32)).astype(np.float32)
    assert forward(back, x).tobytes() == forward(m, x).tobytes()


def test_1cnn_file_keeps_linear_flag():
    back = decode_model(encode_model(build_1cnn()))
    assert back.layers[0].relu is False


def test_model_bad_magic():
    blob = b"XXXX" + encode_model(build_1cnn())[4:]
    with pytest.raises(ModelFormatError, match="bad magic"):
        decode_model(blob)


def test_model_bad_version():
    blob = bytearray(encode_model(build_1cnn()))
    blob[4] = 7
    with pytest.raises(ModelFormatError, match="version"):
        decode_model(bytes(blob))


@pytest.mark.parametrize("cut", [3, 10, 20, 100])
def test_model_truncated(cut):
    with pytest.raises(ModelFormatError):
        decode_model(encode_model(build_1cnn())[:-cut] if cut > 10 else encode_model(build_1cnn())[:cut])


def test_model_trailing_bytes():
    with pytest.raises(ModelFormatError, match="trailing"):
        decode_model(encode_model(build_1cnn()) + b"\0")


def test_delta_kernel_gives_center_crop():
    w = np.zeros((1, 1, 19, 19), np.float32)
    w[0, 0, 9, 9] = 1.0
    m = CnnModel([ConvLayer(w, np.zeros(1, np.float32), relu=False)])
    x = rng.random((32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward(m, x), x[9:23, 9:23])


def test_all_zero_model_outputs_zero():
    m = build_3cnn(0)
    for layer in m.layers:
        layer.weights[:] = 0
    assert not np.any(forward(m, rng.random((32, 32))))


def test_first_epoch_learns_fixed_blur():
    # a small model learns to undo a fixed 3x3 blur
    r = np.random.default_rng(12)
    blur = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16
    clean = r.random((300, 24, 24))
    blurred = sum(blur[a, b] * np.roll(clean, (a - 1, b - 1), axis=(1, 2))
                  for a in range(3) for b in range(3))
    m = build_model(((1, 4, 5), (4, 4, 3), (4, 1, 3)), seed=0)  # 24x24 -> 16x16
    m.layers[-1].relu = False
    data = patch_set(blurred.astype(np.float32), clean[:, 4:20, 4:20].astype(np.float32))
    _, hist = train(m, data, data, TrainConfig(max_epochs=1))
    assert hist.val_loss[0] < hist.initial_val_loss
