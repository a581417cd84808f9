"""Contrastive-divergence training of capsule encoders and decoders.

The encoder maps a lower capsule layer to an upper one through routing by
agreement. One training step runs the data forward, sends the squashed
upper capsules back down through the transposed weights with the *same*
routing coefficients, runs that reconstruction forward again, and moves the
weights along the difference of the two gate-weighted outer products.

The decoder is trained the same way with the roles of the layers swapped:
its senders are the upper capsules produced by a frozen encoder and its
receivers are the pre-squash lower capsules.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .capsule_core import (
    DEFAULT_ROUTING_ITERS,
    RoutingState,
    collect,
    route,
    route_reverse,
    SingularEnergyError,
    squash,
    unsquash,
)
from .numerics import Rng, SgdState, ShapeError, sgd_step

logger = logging.getLogger(__name__)

ACTIVITY_THRESHOLD = 0.5
CHUNK = 8  # samples per gradient partial sum; fixed so threading cannot change results


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (empty data, non-finite values)."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    l2: float = 1e-4
    lr_decay: float = 0.98
    routing_iters: int = DEFAULT_ROUTING_ITERS
    seed: int = 0
    init_std: float = 0.01
    activity_threshold: float = ACTIVITY_THRESHOLD
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be at least 1")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def optimizer(self) -> SgdState:
        return SgdState(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            l2=self.l2,
            decay=self.lr_decay,
        )

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        return cls(**{key: type(getattr(defaults, key))(raw) for key, raw in values.items()})


@dataclass
class EncoderModel:
    """Prediction weights of shape ``(n_in, n_out, d_out, d_in)``."""

    w: np.ndarray

    @property
    def shape(self):
        return self.w.shape


@dataclass
class DecoderModel:
    """Decoder weights ``u[j, i]`` of shape ``(n_upper, n_lower, d_lower, d_upper)``.

    Stored sender-major so that the routing helpers apply unchanged: the
    upper capsules are the senders and the lower capsules the receivers.
    """

    u: np.ndarray


@dataclass
class OrientationStats:
    """Directions of upper capsules seen active during training.

    ``sums[j]`` is the sum of unit directions of capsule ``j`` over the
    samples where its length exceeded the activity threshold.
    """

    sums: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, n_out: int, dim: int) -> "OrientationStats":
        return cls(np.zeros((n_out, dim)), np.zeros(n_out))

    def update(self, x_out, threshold: float = ACTIVITY_THRESHOLD):
        norms = np.sqrt(np.sum(x_out * x_out, axis=-1))
        active = norms > threshold
        units = np.where(active[..., None], x_out / np.where(norms > 0, norms, 1.0)[..., None], 0.0)
        self.sums = self.sums + units.reshape(-1, *self.sums.shape).sum(axis=0)
        self.counts = self.counts + active.reshape(-1, self.counts.shape[0]).sum(axis=0)

    @property
    def directions(self) -> np.ndarray:
        n = np.sqrt(np.sum(self.sums**2, axis=-1, keepdims=True))
        return np.where(n > 0, self.sums / np.where(n > 0, n, 1.0), 0.0)


@dataclass
class PositivePhase:
    routing: RoutingState
    z: np.ndarray
    x_out: np.ndarray


@dataclass
class NegativePhase:
    x_rec: np.ndarray
    z_out_rec: np.ndarray
    x_out_rec: np.ndarray
    routing: RoutingState = field(repr=False)


def positive_phase(x, w, routing_iters: int = DEFAULT_ROUTING_ITERS) -> PositivePhase:
    """Route the data forward and squash the upper capsules."""
    routing, z = route(x, w, routing_iters)
    return PositivePhase(routing=routing, z=z, x_out=squash(z))


def negative_phase(routing: RoutingState, x_out, w) -> NegativePhase:
    """One reconstruction sweep with the routing coefficients held fixed."""
    x_rec = squash(route_reverse(x_out, w, routing))
    z_out_rec = collect(x_rec, w, routing.coeffs)
    return NegativePhase(x_rec=x_rec, z_out_rec=z_out_rec, x_out_rec=squash(z_out_rec), routing=routing)


def _gated_outer(coeffs, recv, send):
    # 2 c_ij outer(recv_j, send_i) / (1 + |recv_j|^2), summed over leading batch axes
    scale = 2.0 / (1.0 + np.sum(recv * recv, axis=-1))  # (..., R)
    a = coeffs * scale[..., None, :]  # (..., S, R)
    a = a[..., None] * recv[..., None, :, :]  # (..., S, R, d_out)
    s_count, r_count, d_out = a.shape[-3:]
    d_in = send.shape[-1]
    a = a.reshape(-1, s_count, r_count * d_out)  # (B, S, R*d_out)
    b = send.reshape(-1, s_count, d_in)  # (B, S, d_in)
    # per sender: (R*d_out, B) @ (B, d_in)
    g = np.matmul(np.moveaxis(a, 0, -1), np.moveaxis(b, 0, 1))
    return g.reshape(s_count, r_count, d_out, d_in)


def cd_gradient(x, z, x_rec, z_out_rec, coeffs):
    """Contrastive-divergence update for the weights.

    ``x``/``z`` are the data-side sender capsules and receiver
    pre-activations, ``x_rec``/``z_out_rec`` their reconstructions. Leading
    batch axes are summed. The result has the weights' shape
    ``(n_in, n_out, d_out, d_in)``.
    """
    if isinstance(coeffs, RoutingState):
        coeffs = coeffs.coeffs
    x, z, x_rec, z_out_rec, coeffs = (np.asarray(a, dtype=np.float64) for a in (x, z, x_rec, z_out_rec, coeffs))
    if x.shape != x_rec.shape or z.shape != z_out_rec.shape:
        raise ShapeError("data and reconstruction shapes differ")
    return _gated_outer(coeffs, z, x) - _gated_outer(coeffs, z_out_rec, x_rec)


def data_gradient(x, z, coeffs):
    """Data term of :func:`cd_gradient` alone."""
    if isinstance(coeffs, RoutingState):
        coeffs = coeffs.coeffs
    return _gated_outer(np.asarray(coeffs), np.asarray(z), np.asarray(x))


def _check_dataset(data, name="dataset"):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"{name} must have shape (n_samples, n_caps, dim), got {data.shape}")
    if data.shape[0] == 0:
        raise TrainingError(f"{name} is empty")
    if not np.all(np.isfinite(data)):
        raise TrainingError(f"{name} contains non-finite values")
    return data


def _chunked(fn, items, threads):
    """Apply ``fn`` to fixed-size chunks of ``items``; results come back in chunk order."""
    pieces = [items[k : k + CHUNK] for k in range(0, len(items), CHUNK)]
    if threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, pieces))
    return [fn(p) for p in pieces]


def _check_finite(grad, epoch, batch_no, what):
    if not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise TrainingError(f"non-finite {what} gradient at epoch {epoch}, batch {batch_no}: {bad} bad entries")


def best_capsule_activation(x, w, routing_iters=DEFAULT_ROUTING_ITERS) -> float:
    """Mean over samples of the longest squashed upper capsule."""
    ph = positive_phase(x, w, routing_iters)
    return float(np.mean(np.max(np.sqrt(np.sum(ph.x_out**2, axis=-1)), axis=-1)))


def train_encoder(data, cfg: TrainConfig, n_out: int = 20, d_out: int = 16, on_epoch=None):
    """Train prediction weights by CD-1 with routing-based mixing.

    Args:
        data: squashed lower capsules, shape ``(n_samples, n_in, d_in)``.
        cfg: hyperparameters.
        n_out, d_out: number and dimension of upper capsules.
        on_epoch: optional callback ``on_epoch(epoch, metrics_dict)``;
            epoch 0 reports the initialisation.

    Returns:
        ``(EncoderModel, OrientationStats)``. The stats hold the directions
        from the final epoch's positive phases.
    """
    data = _check_dataset(data)
    n, n_in, d_in = data.shape
    rng = Rng(cfg.seed)
    w = rng.normal((n_in, n_out, d_out, d_in), 0.0, cfg.init_std)
    opt = cfg.optimizer()
    stats = OrientationStats.empty(n_out, d_out)
    if on_epoch is not None:
        on_epoch(0, {"activation": best_capsule_activation(data, w, cfg.routing_iters), "lr": opt.learning_rate})

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        stats = OrientationStats.empty(n_out, d_out)
        act_sum = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            batch = data[order[start : start + cfg.batch_size]]

            def step(xb, w=w):
                pos = positive_phase(xb, w, cfg.routing_iters)
                neg = negative_phase(pos.routing, pos.x_out, w)
                return cd_gradient(xb, pos.z, neg.x_rec, neg.z_out_rec, pos.routing), pos.x_out

            parts = _chunked(step, batch, cfg.threads)
            grad = parts[0][0]
            for g, _ in parts[1:]:
                grad = grad + g
            grad = grad / len(batch)
            _check_finite(grad, epoch, batch_no, "encoder")
            for _, x_out in parts:
                stats.update(x_out, cfg.activity_threshold)
                act_sum += float(np.sum(np.max(np.sqrt(np.sum(x_out**2, axis=-1)), axis=-1)))
            w = sgd_step(w, grad, opt, key="w")
        opt.end_epoch()
        if on_epoch is not None:
            on_epoch(epoch, {"activation": act_sum / n, "lr": opt.learning_rate})
        logger.debug("encoder epoch %d: mean best activation %.6f", epoch, act_sum / n)
    return EncoderModel(w=w), stats


def encode_layer(encoder: EncoderModel, x, routing_iters=DEFAULT_ROUTING_ITERS):
    """Squashed upper capsules for lower layer(s) ``x``."""
    return positive_phase(x, encoder.w, routing_iters).x_out


def decoder_phases(u, x_up, routing_iters=DEFAULT_ROUTING_ITERS):
    """Decoder reconstruction from upper capsules.

    Returns ``(routing, z_rec, x_rec, x_up_rec)``: the decoder coefficients
    (normalised over the upper capsules for each lower capsule), the
    reconstructed lower pre-activations and their squash, and the upper
    capsules re-encoded through the transposed decoder weights.
    """
    routing, z_rec = route(x_up, u, routing_iters)
    x_rec = squash(z_rec)
    x_up_rec = squash(route_reverse(x_rec, u, routing))
    return routing, z_rec, x_rec, x_up_rec


def reconstruction_angle_error(z, z_rec) -> float:
    """Mean of ``1 - cos(z_i, z_rec_i)`` over all lower capsules (zero vectors count as cos 0)."""
    dots = np.sum(z * z_rec, axis=-1)
    den = np.sqrt(np.sum(z * z, axis=-1) * np.sum(z_rec * z_rec, axis=-1))
    cos = np.where(den > 0, dots / np.where(den > 0, den, 1.0), 0.0)
    return float(np.mean(1.0 - cos))


def _decoder_data(data, encoder, routing_iters):
    z_lower = unsquash(data)
    x_up = encode_layer(encoder, data, routing_iters)
    return z_lower, x_up


def train_decoder(data, encoder: EncoderModel, cfg: TrainConfig, on_epoch=None) -> DecoderModel:
    """Learn decoder weights with the encoder frozen.

    The data pair for lower capsule ``i`` and upper capsule ``j`` is the
    unsquashed input ``z_i`` and the encoder output ``x_j``; the model pair
    is the decoder's own reconstruction ``z_rec_i`` with the re-encoded
    ``x_rec_j``. Both terms are gated by the decoder routing coefficients.
    """
    data = _check_dataset(data)
    n, n_in, d_in = data.shape
    w = np.asarray(encoder.w)
    if w.shape[0] != n_in or w.shape[3] != d_in:
        raise ShapeError(f"encoder weights {w.shape} do not match data {data.shape}")
    n_out, d_out = w.shape[1], w.shape[2]
    z_lower, x_up = _decoder_data(data, encoder, cfg.routing_iters)

    rng = Rng(cfg.seed)
    u = rng.normal((n_out, n_in, d_in, d_out), 0.0, cfg.init_std)
    opt = cfg.optimizer()

    def angle(u):
        _, z_rec, _, _ = decoder_phases(u, x_up, cfg.routing_iters)
        return reconstruction_angle_error(z_lower, z_rec)

    if on_epoch is not None:
        on_epoch(0, {"angle_error": angle(u), "lr": opt.learning_rate})

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        err_sum = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]

            def step(sel, u=u):
                routing, z_rec, _, x_up_rec = decoder_phases(u, x_up[sel], cfg.routing_iters)
                g = cd_gradient(x_up[sel], z_lower[sel], x_up_rec, z_rec, routing)
                err = reconstruction_angle_error(z_lower[sel], z_rec) * len(sel)
                return g, err

            parts = _chunked(step, idx, cfg.threads)
            grad = parts[0][0]
            for g, err in parts[1:]:
                grad = grad + g
            grad = grad / len(idx)
            err_sum += sum(err for _, err in parts)
            _check_finite(grad, epoch, batch_no, "decoder")
            u = sgd_step(u, grad, opt, key="u")
        opt.end_epoch()
        if on_epoch is not None:
            on_epoch(epoch, {"angle_error": err_sum / n, "lr": opt.learning_rate})
    return DecoderModel(u=u)


def sample_capsule_input(stats, rng: Rng, capsule_index: int, dim: int, restricted: bool = False):
    """Gaussian draw for one upper capsule, optionally folded onto the visited hemisphere."""
    g = rng.normal(dim)
    if restricted:
        if stats is None or stats.counts[capsule_index] <= 0:
            raise TrainingError(f"no orientation statistics for capsule {capsule_index}; cannot restrict sampling")
        if float(np.dot(g, stats.directions[capsule_index])) < 0:
            g = -g
    return g


def decode_capsules(decoder: DecoderModel, x_up, routing_iters=DEFAULT_ROUTING_ITERS):
    """Route squashed upper capsules through the decoder; returns squashed lower capsules."""
    _, z_rec = route(x_up, decoder.u, routing_iters)
    return squash(z_rec)


def generate(decoder: DecoderModel, stats, rng: Rng, capsule_index: int, restricted: bool = False,
             routing_iters=DEFAULT_ROUTING_ITERS):
    """Sample a lower capsule layer from a single upper capsule.

    Capsule ``capsule_index`` receives a standard normal draw (folded onto
    the training hemisphere when ``restricted``), every other upper capsule
    is zero. The draw is squashed and routed through the decoder. The
    returned layer is squashed (norms < 1), ready for
    :func:`capspoe.conv_frontend.capsules_to_volume`, which unsquashes it.

    Returns:
        ``(layer, noise)``.
    """
    n_up, _, _, d_up = decoder.u.shape
    if not 0 <= capsule_index < n_up:
        raise IndexError(f"capsule index {capsule_index} out of range for {n_up} capsules")
    g = sample_capsule_input(stats, rng, capsule_index, d_up, restricted)
    x_up = np.zeros((n_up, d_up))
    x_up[capsule_index] = g
    return decode_capsules(decoder, squash(x_up), routing_iters), g


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: tuple  # (i, j, row, col)
    analytic: float
    numeric: float
    eps: float
    n_checked: int
    rel_errors: np.ndarray = field(repr=False, default=None)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def _log_marginal_extended(x, w, coeffs):
    # sum_j log(1 + |z_j|^2) in extended precision; the float64 rounding of this
    # O(1) sum is comparable to the change an eps=1e-6 step produces in small entries
    z = np.einsum("ij,ijoc,ic->jo", coeffs, w, x)
    return np.sum(np.log1p(np.sum(z * z, axis=-1)))


def gradcheck(w, x, eps: float = 1e-6, routing_iters=DEFAULT_ROUTING_ITERS, floor: float = 1e-8) -> GradcheckReport:
    """Compare the data term of the CD update with central differences.

    The finite differences are taken of ``sum_j log(1 + |z_j|^2)`` with the
    routing coefficients frozen at their routed values, evaluated in
    ``np.longdouble`` so that cancellation does not swamp small entries (on
    platforms where ``longdouble`` is plain float64 the check is noisier).
    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    w = np.array(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    routing, z = route(x, w, routing_iters)
    if np.any(np.sum(z * z, axis=-1) == 0):
        raise SingularEnergyError("zero collective prediction; gradient check undefined")
    analytic = data_gradient(x, z, routing)
    xl, cl = x.astype(np.longdouble), routing.coeffs.astype(np.longdouble)
    wl = w.astype(np.longdouble)
    step = np.longdouble(eps)
    numeric = np.empty_like(w)
    flat = wl.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        up = _log_marginal_extended(xl, wl, cl)
        flat[k] = old - step
        down = _log_marginal_extended(xl, wl, cl)
        flat[k] = old
        numeric.reshape(-1)[k] = float((up - down) / (2 * step))
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / den
    k = int(np.argmax(rel))
    worst = tuple(int(v) for v in np.unravel_index(k, w.shape))
    return GradcheckReport(
        max_rel_error=float(rel.reshape(-1)[k]),
        worst=worst,
        analytic=float(analytic.reshape(-1)[k]),
        numeric=float(numeric.reshape(-1)[k]),
        eps=eps,
        n_checked=flat.size,
        rel_errors=rel,
    )
