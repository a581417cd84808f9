import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capspoe.capsule_core import DomainError, squash
from capspoe.conv_frontend import (
    PARAM_NAMES,
    ConvStack,
    ConvTrainingError,
    capsules_to_volume,
    conv2d,
    conv2d_transpose,
    conv_out_size,
    decode,
    encode,
    init_stack,
    leaky_relu,
    loss_and_grads,
    reconstruction_loss,
    train_autoencoder,
    volume_to_capsules,
)
from capspoe.numerics import Rng, ShapeError
from capspoe.poe_train import TrainConfig
from capspoe.synthetic import stroke_images
from conftest import digits_28


@pytest.fixture(scope="module")
def full_stack():
    return init_stack(Rng(0))


def naive_conv(x, w, stride):
    k, _, c, f = w.shape
    h, wd, _ = x.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((ho, wo, f))
    for y in range(ho):
        for xx in range(wo):
            patch = x[y * stride : y * stride + k, xx * stride : xx * stride + k]
            for o in range(f):
                out[y, xx, o] = np.sum(patch * w[..., o])
    return out


def test_shapes_for_28(full_stack):
    assert full_stack.hidden_shape == (20, 20, 128)
    assert full_stack.volume_shape == (6, 6, 128)
    vol = encode(np.zeros((28, 28, 1)), full_stack)
    assert vol.shape == (6, 6, 128)
    assert volume_to_capsules(vol).shape == (576, 8)


def test_zero_image_gives_zero_volume(full_stack):
    assert not np.any(encode(np.zeros((28, 28, 1)), full_stack))


def test_decode_zero_volume_is_half(full_stack):
    out = decode(np.zeros((6, 6, 128)), full_stack)
    assert out.shape == (28, 28, 1)
    assert np.all(out == 0.5)


def test_round_trip_shape(full_stack):
    img = digits_28(2)[..., None]
    assert decode(encode(img, full_stack), full_stack).shape == img.shape


def test_conv_out_size():
    assert conv_out_size(28, 9, 1) == 20
    assert conv_out_size(20, 9, 2) == 6
    with pytest.raises(ShapeError):
        conv_out_size(4, 9, 1)


def test_conv_matches_naive():
    rng = Rng(3)
    x = rng.normal((1, 9, 8, 2))
    w = rng.normal((3, 3, 2, 4))
    for stride in (1, 2):
        assert np.allclose(conv2d(x, w, stride)[0], naive_conv(x[0], w, stride), atol=1e-12)


def test_impulse_footprint():
    w = np.zeros((3, 3, 1, 1))
    w[0, 0, 0, 0] = 1.0
    x = np.zeros((1, 7, 7, 1))
    x[0, 3, 4, 0] = 1.0
    out = conv2d(x, w, 1)[0, ..., 0]
    assert out[3, 4] == 1.0
    assert out.sum() == 1.0
    # every output that sees the impulse through a full filter of ones
    ones = np.ones((3, 3, 1, 1))
    seen = conv2d(x, ones, 1)[0, ..., 0]
    assert np.argwhere(seen).tolist() == [[y, xx] for y in range(1, 4) for xx in range(2, 5)]


def test_transpose_stamps_filter():
    rng = Rng(1)
    w = rng.normal((3, 3, 1, 1))
    y = np.zeros((1, 3, 3, 1))
    y[0, 1, 2, 0] = 1.0
    out = conv2d_transpose(y, w, 2, (7, 7))[0, ..., 0]
    expect = np.zeros((7, 7))
    expect[2:5, 4:7] = w[..., 0, 0]
    assert np.array_equal(out, expect)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_transpose_is_adjoint(seed, stride, pad):
    rng = Rng(seed)
    k = 3
    ho = 3
    h = (ho - 1) * stride + k + min(pad, stride - 1)
    x = rng.normal((2, h, h, 2))
    w = rng.normal((k, k, 2, 3))
    y = rng.normal((2, ho, ho, 3))
    lhs = np.sum(conv2d(x, w, stride) * y)
    rhs = np.sum(x * conv2d_transpose(y, w, stride, (h, h)))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_transpose_rejects_bad_size():
    with pytest.raises(ShapeError):
        conv2d_transpose(np.zeros((1, 3, 3, 1)), np.zeros((3, 3, 1, 1)), 2, (10, 10))


def test_leaky_relu_piecewise():
    x = np.array([-2.0, -0.0, 0.0, 3.0])
    assert leaky_relu(x, 0.01).tolist() == [-0.02, 0.0, 0.0, 3.0]


def small_stack(seed=0, channels=8, kernel=3, image=(8, 8, 1)):
    stack = init_stack(Rng(seed), image, channels=channels, kernel=kernel)
    rng = Rng(seed + 1)
    return stack.with_params({n: rng.normal(getattr(stack, n).shape, 0.0, 0.3) for n in PARAM_NAMES})


def test_loss_gradient_matches_finite_differences():
    stack = small_stack(channels=2, kernel=2, image=(5, 5, 1))
    rng = Rng(7)
    imgs = rng.uniform(2 * 25).reshape(2, 5, 5, 1)
    mask = (rng.uniform(2 * 16 * 2).reshape(2, 4, 4, 2) < 0.75) / 0.75
    _, grads = loss_and_grads(imgs, stack, mask)
    eps = 1e-5
    worst = 0.0
    for name in PARAM_NAMES:
        p = getattr(stack, name)
        for k in range(p.size):
            plus, minus = p.copy(), p.copy()
            plus.reshape(-1)[k] += eps
            minus.reshape(-1)[k] -= eps
            lp = loss_and_grads(imgs, stack.with_params({name: plus}), mask)[0]
            lm = loss_and_grads(imgs, stack.with_params({name: minus}), mask)[0]
            fd = (lp - lm) / (2 * eps)
            a = grads[name].reshape(-1)[k]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    assert worst < 1e-4


def test_lr_zero_leaves_weights():
    imgs = stroke_images(16, seed=2, size=8)
    stack = small_stack()
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, seed=1)
    out = train_autoencoder(imgs, cfg, stack=stack)
    for name in PARAM_NAMES:
        assert np.array_equal(getattr(out, name), getattr(stack, name))


@pytest.fixture(scope="module")
def digit_images():
    return digits_28(200)[..., None]


def test_training_reduces_mse(digit_images):
    cfg = TrainConfig(epochs=20, batch_size=20, learning_rate=0.05, l2=0.0, lr_decay=1.0, seed=4)
    history = []
    train_autoencoder(digit_images, cfg, channels=8, kernel=9, on_epoch=lambda e, m: history.append(m["mse"]))
    assert history[-1] < history[0]
    assert history[-1] < history[1]


def test_training_deterministic(digit_images):
    cfg = TrainConfig(epochs=1, batch_size=20, learning_rate=0.05, seed=4)
    a = train_autoencoder(digit_images[:40], cfg, channels=8)
    b = train_autoencoder(digit_images[:40], cfg, channels=8)
    for name in PARAM_NAMES:
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_training_rejects_empty_and_divergence():
    with pytest.raises(ConvTrainingError):
        train_autoencoder(np.zeros((0, 8, 8, 1)), TrainConfig(epochs=1))
    imgs = stroke_images(8, seed=0, size=8)
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=1e300, momentum=0.0, l2=0.0)
    with np.errstate(all="ignore"), pytest.raises(ConvTrainingError):
        train_autoencoder(imgs, cfg, stack=small_stack())


def test_reconstruction_loss_range(full_stack, digit_images):
    loss = reconstruction_loss(digit_images[:4], full_stack)
    assert 0.0 <= loss <= 1.0


def test_stack_validation():
    s = small_stack()
    with pytest.raises(ShapeError):
        s.with_params({"bias1": np.zeros(3)})
    with pytest.raises(ShapeError):
        init_stack(Rng(0), (4, 4, 1), channels=8, kernel=9)
    with pytest.raises(ShapeError):
        encode(np.zeros((9, 9, 1)), s)


def test_capsule_index_layout():
    vol = np.zeros((6, 6, 128))
    vol[2, 3, 8 * 5 : 8 * 6] = np.arange(1.0, 9.0)
    caps = volume_to_capsules(vol)
    idx = (2 * 6 + 3) * 16 + 5
    nz = np.argwhere(np.linalg.norm(caps, axis=-1) > 0).ravel().tolist()
    assert nz == [idx]
    assert np.allclose(caps[idx], squash(np.arange(1.0, 9.0)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_volume_capsule_round_trip(seed):
    vol = Rng(seed).normal((3, 2, 16), 0.0, 2.0)
    back = capsules_to_volume(volume_to_capsules(vol), (3, 2, 16))
    assert np.allclose(back, vol, rtol=1e-9, atol=1e-12)


def test_capsules_to_volume_domain():
    x = np.zeros((2, 8))
    x[0, 0] = 1.0
    with pytest.raises(DomainError):
        capsules_to_volume(x, (1, 1, 16))
    with pytest.raises(ShapeError):
        capsules_to_volume(np.zeros((3, 8)), (1, 1, 16))
    with pytest.raises(ShapeError):
        volume_to_capsules(np.zeros((1, 1, 12)))


def test_dropout_only_in_train_mode(digit_images):
    stack = init_stack(Rng(0), channels=16)
    img = digit_images[0]
    assert np.array_equal(encode(img, stack), encode(img, stack))
    with pytest.raises(ValueError):
        encode(img, stack, train_mode=True)
    assert not np.array_equal(encode(img, stack, train_mode=True, rng=Rng(1)), encode(img, stack))
