"""Two-layer convolutional autoencoder feeding the primary capsules.

Images are float arrays of shape ``(H, W, C)`` (or ``(B, H, W, C)``) with
values in [0, 1]. Filter banks have shape ``(k, k, C_in, C_out)``. The
encoder uses valid convolutions with strides (1, 2); the decoder applies the
same filters transposed, so 28x28 inputs go 28 -> 20 -> 6 and back.

Capsule grouping: the feature volume ``(h, w, c)`` is read in C order and
cut into consecutive runs of 8 channels, so capsule ``(y * w + x) * (c // 8)
+ g`` holds channels ``8g .. 8g+7`` at site ``(y, x)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .capsule_core import squash, unsquash
from .numerics import Rng, ShapeError, sgd_step

logger = logging.getLogger(__name__)

CAPSULE_DIM = 8


class ConvTrainingError(RuntimeError):
    pass


def leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def conv_out_size(n, k, stride):
    if n < k:
        raise ShapeError(f"input size {n} smaller than kernel {k}")
    return (n - k) // stride + 1


def _patches(x, k, stride):
    # (B, H, W, C) -> (B, Ho, Wo, k*k*C), rows ordered (dy, dx, c) like the filters
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, k * k * c)


def conv2d(x, w, stride):
    """Valid cross-correlation of a batch ``(B, H, W, C)`` with ``(k, k, C, F)``."""
    k, _, c, f = w.shape
    if x.shape[-1] != c:
        raise ShapeError(f"input has {x.shape[-1]} channels, filters expect {c}")
    return _patches(x, k, stride) @ w.reshape(k * k * c, f)


def conv2d_transpose(y, w, stride, out_hw):
    """Adjoint of :func:`conv2d`: scatter each output site back through the filters.

    ``out_hw`` fixes the spatial size of the result; it must cover the last
    window, and any extra rows/columns (output padding) receive nothing.
    """
    k, _, c, f = w.shape
    b, ho, wo, fy = y.shape
    if fy != f:
        raise ShapeError(f"volume has {fy} channels, filters produce {f}")
    h, wd = out_hw
    if conv_out_size(h, k, stride) != ho or conv_out_size(wd, k, stride) != wo:
        raise ShapeError(f"output size {out_hw} inconsistent with {ho}x{wo} input, kernel {k}, stride {stride}")
    cols = (y.reshape(-1, f) @ w.reshape(k * k * c, f).T).reshape(b, ho, wo, k, k, c)
    out = np.zeros((b, h, wd, c))
    for dy in range(k):
        for dx in range(k):
            out[:, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride, :] += cols[:, :, :, dy, dx, :]
    return out


def _filter_grad_from_patches(patches, dy):
    # sum over sites of patch^T dy -> (k*k*C, F)
    kkc = patches.shape[-1]
    return patches.reshape(-1, kkc).T @ dy.reshape(-1, dy.shape[-1])


@dataclass
class ConvStack:
    """Filters, biases and fixed hyperparameters of the autoencoder.

    The decoder reuses ``filters2``/``filters1`` transposed and has its own
    biases ``dec_bias2`` (hidden channels) and ``dec_bias1`` (image channels).
    """

    filters1: np.ndarray
    filters2: np.ndarray
    bias1: np.ndarray
    bias2: np.ndarray
    dec_bias2: np.ndarray
    dec_bias1: np.ndarray
    image_shape: tuple
    strides: tuple = (1, 2)
    leaky_slope: float = 0.01
    dropout_rate: float = 0.25

    def __post_init__(self):
        k1, k1b, cin, c1 = self.filters1.shape
        k2, k2b, c1b, c2 = self.filters2.shape
        if k1 != k1b or k2 != k2b:
            raise ShapeError("filters must be square")
        if c1b != c1:
            raise ShapeError(f"channel chain broken: {c1} -> {c1b}")
        if self.image_shape[2] != cin:
            raise ShapeError(f"image has {self.image_shape[2]} channels, filters expect {cin}")
        if self.bias1.shape != (c1,) or self.bias2.shape != (c2,) or self.dec_bias2.shape != (c1,) or self.dec_bias1.shape != (cin,):
            raise ShapeError("bias shapes do not match filter banks")
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.strides = tuple(int(v) for v in self.strides)
        self.hidden_shape  # raises if the image is too small

    @property
    def hidden_shape(self):
        h, w, _ = self.image_shape
        k, s = self.filters1.shape[0], self.strides[0]
        return conv_out_size(h, k, s), conv_out_size(w, k, s), self.filters1.shape[3]

    @property
    def volume_shape(self):
        h, w, _ = self.hidden_shape
        k, s = self.filters2.shape[0], self.strides[1]
        return conv_out_size(h, k, s), conv_out_size(w, k, s), self.filters2.shape[3]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params):
        return replace(self, **params)


PARAM_NAMES = ("filters1", "filters2", "bias1", "bias2", "dec_bias2", "dec_bias1")


def init_stack(rng: Rng, image_shape=(28, 28, 1), channels=128, kernel=9, strides=(1, 2),
               leaky_slope=0.01, dropout_rate=0.25) -> ConvStack:
    """Random filters with std ``1/sqrt(fan_in)``, zero biases."""
    cin = image_shape[2]
    f1 = rng.normal((kernel, kernel, cin, channels), 0.0, 1.0 / np.sqrt(kernel * kernel * cin))
    f2 = rng.normal((kernel, kernel, channels, channels), 0.0, 1.0 / np.sqrt(kernel * kernel * channels))
    return ConvStack(
        filters1=f1,
        filters2=f2,
        bias1=np.zeros(channels),
        bias2=np.zeros(channels),
        dec_bias2=np.zeros(channels),
        dec_bias1=np.zeros(cin),
        image_shape=tuple(image_shape),
        strides=tuple(strides),
        leaky_slope=leaky_slope,
        dropout_rate=dropout_rate,
    )


def _as_batch(img, shape):
    img = np.asarray(img, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4 or img.shape[1:] != tuple(shape):
        raise ShapeError(f"expected images of shape {tuple(shape)}, got {img.shape}")
    return img, single


def _forward(img, stack: ConvStack, mask=None):
    s1, s2 = stack.strides
    a1 = conv2d(img, stack.filters1, s1) + stack.bias1
    h1 = leaky_relu(a1, stack.leaky_slope)
    h1d = h1 * mask if mask is not None else h1
    a2 = conv2d(h1d, stack.filters2, s2) + stack.bias2
    vol = leaky_relu(a2, stack.leaky_slope)
    return a1, h1d, a2, vol


def encode(img, stack: ConvStack, train_mode: bool = False, rng: Rng | None = None):
    """Image(s) to feature volume(s). Dropout is applied only in ``train_mode``."""
    batch, single = _as_batch(img, stack.image_shape)
    mask = None
    if train_mode and stack.dropout_rate > 0:
        if rng is None:
            raise ValueError("train_mode dropout needs an rng")
        mask = dropout_mask(rng, (len(batch),) + stack.hidden_shape, stack.dropout_rate)
    vol = _forward(batch, stack, mask)[3]
    return vol[0] if single else vol


def dropout_mask(rng: Rng, shape, rate):
    keep = 1.0 - rate
    u = rng.uniform(int(np.prod(shape))).reshape(shape)
    return (u < keep) / keep


def _decode_parts(vol, stack: ConvStack):
    s1, s2 = stack.strides
    h, w, _ = stack.hidden_shape
    d2 = conv2d_transpose(vol, stack.filters2, s2, (h, w)) + stack.dec_bias2
    g1 = leaky_relu(d2, stack.leaky_slope)
    d1 = conv2d_transpose(g1, stack.filters1, s1, stack.image_shape[:2]) + stack.dec_bias1
    return d2, g1, d1, _sigmoid(d1)


def decode(vol, stack: ConvStack):
    """Feature volume(s) back to image(s) with pixels in (0, 1)."""
    batch, single = _as_batch(vol, stack.volume_shape)
    out = _decode_parts(batch, stack)[3]
    return out[0] if single else out


def reconstruction_loss(images, stack: ConvStack) -> float:
    images, _ = _as_batch(images, stack.image_shape)
    return float(np.mean((decode(encode(images, stack), stack) - images) ** 2))


def loss_and_grads(images, stack: ConvStack, mask=None):
    """Mean squared pixel error and its gradient for every parameter.

    ``mask`` is an optional dropout multiplier on the first hidden layer.
    """
    images, _ = _as_batch(images, stack.image_shape)
    s1, s2 = stack.strides
    slope = stack.leaky_slope
    f1, f2 = stack.filters1, stack.filters2
    k1, k2 = f1.shape[0], f2.shape[0]

    a1, h1d, a2, vol = _forward(images, stack, mask)
    d2, g1, d1, out = _decode_parts(vol, stack)
    diff = out - images
    loss = float(np.mean(diff**2))

    g_d1 = (2.0 / diff.size) * diff * out * (1.0 - out)
    grads = {"dec_bias1": g_d1.sum(axis=(0, 1, 2))}
    # d1 = convT(g1, f1): d/dg1 is conv2d(g_d1, f1); d/df1 pairs patches of g_d1 with g1
    p_d1 = _patches(g_d1, k1, s1)
    g_g1 = p_d1 @ f1.reshape(-1, f1.shape[3])
    gf1 = _filter_grad_from_patches(p_d1, g1).reshape(f1.shape)
    g_d2 = g_g1 * np.where(d2 >= 0, 1.0, slope)
    grads["dec_bias2"] = g_d2.sum(axis=(0, 1, 2))
    p_d2 = _patches(g_d2, k2, s2)
    g_vol = p_d2 @ f2.reshape(-1, f2.shape[3])
    gf2 = _filter_grad_from_patches(p_d2, vol).reshape(f2.shape)

    g_a2 = g_vol * np.where(a2 >= 0, 1.0, slope)
    grads["bias2"] = g_a2.sum(axis=(0, 1, 2))
    gf2 = gf2 + _filter_grad_from_patches(_patches(h1d, k2, s2), g_a2).reshape(f2.shape)
    g_h1d = conv2d_transpose(g_a2, f2, s2, a1.shape[1:3])
    g_h1 = g_h1d * mask if mask is not None else g_h1d
    g_a1 = g_h1 * np.where(a1 >= 0, 1.0, slope)
    grads["bias1"] = g_a1.sum(axis=(0, 1, 2))
    gf1 = gf1 + _filter_grad_from_patches(_patches(images, k1, s1), g_a1).reshape(f1.shape)
    grads["filters1"] = gf1
    grads["filters2"] = gf2
    return loss, grads


def train_autoencoder(images, cfg, stack: ConvStack | None = None, channels=128, kernel=9, on_epoch=None) -> ConvStack:
    """Fit the autoencoder by minibatch momentum SGD on the pixel MSE.

    Args:
        images: array ``(N, H, W, C)`` in [0, 1].
        cfg: a :class:`capspoe.poe_train.TrainConfig`.
        stack: starting point; a fresh one is drawn from ``cfg.seed`` if None.
        on_epoch: optional ``on_epoch(epoch, {"mse": ..., "lr": ...})``. Epoch 0
            reports the clean reconstruction error of the initial stack; later
            epochs report the running training error (with dropout active).
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ConvTrainingError(f"need a non-empty (N, H, W, C) image array, got shape {images.shape}")
    rng = Rng(cfg.seed)
    if stack is None:
        stack = init_stack(rng, images.shape[1:], channels=channels, kernel=kernel)
    opt = cfg.optimizer()
    if on_epoch is not None:
        on_epoch(0, {"mse": reconstruction_loss(images, stack), "lr": opt.learning_rate})
    n = len(images)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = images[order[start : start + cfg.batch_size]]
            mask = None
            if stack.dropout_rate > 0:
                mask = dropout_mask(rng, (len(batch),) + stack.hidden_shape, stack.dropout_rate)
            loss, grads = loss_and_grads(batch, stack, mask)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise ConvTrainingError(f"non-finite loss or gradient at epoch {epoch}, batch starting {start}")
            total += loss * len(batch)
            # sgd_step ascends, so hand it the negative loss gradient
            params = {name: sgd_step(getattr(stack, name), -grads[name], opt, key=name) for name in PARAM_NAMES}
            stack = stack.with_params(params)
        opt.end_epoch()
        if on_epoch is not None:
            on_epoch(epoch, {"mse": total / n, "lr": opt.learning_rate})
        logger.debug("autoencoder epoch %d: train mse %.6f", epoch, total / n)
    return stack


def volume_to_capsules(vol, capsule_dim: int = CAPSULE_DIM):
    """Cut a volume ``(..., h, w, c)`` into squashed capsules ``(..., h*w*c/8, 8)``."""
    vol = np.asarray(vol, dtype=np.float64)
    if vol.shape[-1] % capsule_dim:
        raise ShapeError(f"{vol.shape[-1]} channels not divisible into capsules of {capsule_dim}")
    lead = vol.shape[:-3]
    h, w, c = vol.shape[-3:]
    return squash(vol.reshape(lead + (h * w * c // capsule_dim, capsule_dim)))


def capsules_to_volume(x, volume_shape):
    """Unsquash capsules and restore the ``(h, w, c)`` layout.

    Raises:
        DomainError: if any capsule has norm >= 1.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = volume_shape
    if x.shape[-2] * x.shape[-1] != h * w * c:
        raise ShapeError(f"{x.shape[-2]} capsules of dim {x.shape[-1]} do not fill a {volume_shape} volume")
    return unsquash(x).reshape(x.shape[:-2] + (h, w, c))
