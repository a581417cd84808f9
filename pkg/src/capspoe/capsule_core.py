"""Capsule math: squashing, routing by agreement and the capsule energy model.

Array conventions used throughout the package:

* a capsule layer is an array of shape ``(..., n_caps, dim)``; leading axes
  are batch axes;
* prediction weights are an array of shape ``(n_in, n_out, d_out, d_in)``
  where ``w[i, j]`` maps lower capsule ``i`` to a prediction for upper
  capsule ``j``;
* routing coefficients have shape ``(..., n_in, n_out)`` and are normalised
  over the *input* axis, ``coeffs[..., :, j].sum() == 1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

DEFAULT_ROUTING_ITERS = 3
MAX_ENUMERATION = 12


class DomainError(ValueError):
    """Input outside the domain of a map (e.g. unsquash of a norm >= 1)."""


class SingularEnergyError(ValueError):
    """A firing capsule has a zero collective prediction, so log 0 appears."""


@dataclass
class RoutingState:
    logits: np.ndarray
    coeffs: np.ndarray
    n_iters: int


def _norms(v):
    return np.sqrt(np.sum(v * v, axis=-1, keepdims=True))


def squash(z):
    """Map vectors into the open unit ball, keeping their direction.

    ``squash(0)`` is defined as 0.
    """
    z = np.asarray(z, dtype=np.float64)
    n = _norms(z)
    safe = np.where(n > 0, n, 1.0)
    # |z|^2/(1+|z|^2) / |z| rewritten as 1/(1/|z| + |z|) so huge norms do not overflow
    scale = np.where(n > 0, 1.0 / (1.0 / safe + safe), 0.0)
    return z * scale


def unsquash(x):
    """Inverse of :func:`squash` on the open unit ball.

    Raises:
        DomainError: if some capsule has norm >= 1.
    """
    x = np.asarray(x, dtype=np.float64)
    n = _norms(x)
    if np.any(n >= 1.0):
        raise DomainError(f"unsquash needs norms < 1, got max {float(n.max())}")
    safe = np.where(n > 0, n, 1.0)
    # |z| = sqrt(n/(1-n)), so z = x * sqrt(n/(1-n)) / n = x / sqrt(n (1-n))
    scale = np.where(n > 0, 1.0 / np.sqrt(safe * (1.0 - n)), 0.0)
    return x * scale


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def squash_magnitude_as_sigmoid(z):
    """Squashed length written as ``sigmoid(log |z|^2)``; 0 for ``z == 0``."""
    z = np.asarray(z, dtype=np.float64)
    sq = np.sum(z * z, axis=-1)
    with np.errstate(divide="ignore"):
        return np.where(sq > 0, sigmoid(np.log(np.where(sq > 0, sq, 1.0))), 0.0)


def _check_weights(x, w):
    if w.ndim != 4:
        raise ShapeError(f"weights must be (n_in, n_out, d_out, d_in), got {w.shape}")
    if x.shape[-2:] != (w.shape[0], w.shape[3]):
        raise ShapeError(f"layer {x.shape} does not match weights {w.shape}")


def predictions(x, w):
    """Per-pair predictions ``w[i, j] @ x[i]``, shape ``(..., n_in, n_out, d_out)``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_weights(x, w)
    n_in, n_out, d_out, d_in = w.shape
    # one (1 x d_in) @ (d_in x n_out*d_out) product per (sample, lower capsule)
    wt = np.swapaxes(w.reshape(n_in, n_out * d_out, d_in), -1, -2)
    u = np.matmul(x[..., None, :], wt)
    u = u.reshape(x.shape[:-2] + (n_in, n_out, d_out))
    return u


def softmax_over_inputs(logits):
    shifted = logits - logits.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-2, keepdims=True)


def cosine_agreement(u, z, u_norms=None):
    """Cosine between each prediction ``u[..., i, j]`` and ``z[..., j]``.

    Pairs where either vector is zero contribute 0.
    """
    if u_norms is None:
        u_norms = np.sqrt(np.einsum("...ijo,...ijo->...ij", u, u))
    dots = np.einsum("...ijo,...jo->...ij", u, z)
    denom = u_norms * np.sqrt(np.einsum("...jo,...jo->...j", z, z))[..., None, :]
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def _weighted_sum(coeffs, u):
    # sum_i c[..., i, j] u[..., i, j, :] as a batched (1 x I) @ (I x d) product per j
    ct = np.swapaxes(coeffs, -1, -2)[..., None, :]
    return np.matmul(ct, np.swapaxes(u, -3, -2))[..., 0, :]


def route(x, w, n_iters: int = DEFAULT_ROUTING_ITERS):
    """Routing by agreement with cosine agreement.

    Logits start at zero. Each iteration normalises them over the inputs,
    forms the collective predictions and adds the cosine agreement to the
    logits. The returned coefficients are the ones that produced the
    returned pre-activations; squashing is left to the caller.

    Returns:
        ``(RoutingState, z)`` with ``z`` of shape ``(..., n_out, d_out)``.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be at least 1")
    u = predictions(x, w)
    u_norms = np.sqrt(np.einsum("...ijo,...ijo->...ij", u, u))
    logits = np.zeros(u.shape[:-1])
    for it in range(n_iters):
        c = softmax_over_inputs(logits)
        z = _weighted_sum(c, u)
        if it + 1 < n_iters:
            logits = logits + cosine_agreement(u, z, u_norms)
    return RoutingState(logits=logits, coeffs=c, n_iters=n_iters), z


def collect(x, w, coeffs):
    """Forward pass with frozen coefficients: ``z_j = sum_i c_ij w_ij x_i``."""
    u = predictions(x, w)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != u.shape[:-1]:
        raise ShapeError(f"coefficients {coeffs.shape} do not match predictions {u.shape[:-1]}")
    return _weighted_sum(coeffs, u)


def route_reverse(x_out, w, coeffs):
    """Transport upper capsules back down: ``sum_j c_ij w_ij^T x_out_j``.

    ``coeffs`` may be a :class:`RoutingState` or a bare array; it must be
    the one used on the forward pass.
    """
    if isinstance(coeffs, RoutingState):
        coeffs = coeffs.coeffs
    x_out = np.asarray(x_out, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if w.ndim != 4 or x_out.shape[-2:] != (w.shape[1], w.shape[2]):
        raise ShapeError(f"upper layer {x_out.shape} does not match weights {w.shape}")
    if coeffs.shape[-2:] != w.shape[:2] or coeffs.shape[:-2] != x_out.shape[:-2]:
        raise ShapeError(f"coefficients {coeffs.shape} do not match weights {w.shape}")
    # scale upper capsules by the gates first, then one matmul per lower capsule:
    # out[b, i, c] = sum_{j,o} w[i, j, o, c] * (c[b, i, j] x_out[b, j, o])
    n_in, n_out, d_out, d_in = w.shape
    batch = x_out.shape[:-2]
    gated = coeffs[..., None] * x_out[..., None, :, :]  # (..., I, J, O)
    gated = gated.reshape((-1, n_in, n_out * d_out))
    wt = w.reshape(n_in, n_out * d_out, d_in)
    out = np.matmul(np.moveaxis(gated, 0, 1), wt)  # (I, B, d_in)
    return np.moveaxis(out, 0, 1).reshape(batch + (n_in, d_in))


def _log_sq_norms(z):
    n = np.sqrt(np.sum(z * z, axis=-1))
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(np.maximum(n, 0.0)), n


def energy(x, firing, w, coeffs):
    """Energy ``-sum_j firing_j log |z_j|^2`` of a single configuration.

    Raises:
        SingularEnergyError: if a firing capsule has ``|z_j| < 1e-300``.
    """
    if isinstance(coeffs, RoutingState):
        coeffs = coeffs.coeffs
    z = collect(x, w, coeffs)
    firing = np.asarray(firing, dtype=np.float64)
    if firing.shape != z.shape[-2:-1]:
        raise ShapeError(f"firing vector {firing.shape} vs {z.shape[-2]} capsules")
    if not np.all((firing == 0) | (firing == 1)):
        raise ValueError("firing vector must be binary")
    log_sq, n = _log_sq_norms(z)
    on = firing == 1
    if np.any(n[on] < 1e-300):
        raise SingularEnergyError("a firing capsule has a zero collective prediction")
    return -float(np.sum(log_sq[on]))


def conditional_firing_prob(x, w, coeffs, j: int):
    """Probability that upper capsule ``j`` is on given the lower layer."""
    if isinstance(coeffs, RoutingState):
        coeffs = coeffs.coeffs
    z = collect(x, w, coeffs)
    if not 0 <= j < z.shape[-2]:
        raise IndexError(f"capsule index {j} out of range for {z.shape[-2]} capsules")
    sq = float(np.sum(z[j] ** 2))
    return sq / (1.0 + sq)


def log_unnormalized_marginal(x, w, coeffs):
    """``sum_j log(1 + |z_j|^2)``: the log of the firing-summed Boltzmann weight."""
    if isinstance(coeffs, RoutingState):
        coeffs = coeffs.coeffs
    z = collect(x, w, coeffs)
    return np.sum(np.log1p(np.sum(z * z, axis=-1)), axis=-1)


def unnormalized_marginal(x, w, coeffs):
    """``prod_j (1 + |z_j|^2)``, accumulated in log space."""
    return np.exp(log_unnormalized_marginal(x, w, coeffs))


def firing_vectors(n: int):
    return [tuple(bits) for bits in itertools.product((0, 1), repeat=n)]


def brute_force_joint(x, w, coeffs):
    """Exact distribution over firing vectors by enumerating all ``2^J``.

    Weights are ``exp(-energy)`` with the lower layer held fixed, normalised
    with a log-sum-exp. Returns a dict from bit tuples to probabilities.
    """
    if isinstance(coeffs, RoutingState):
        coeffs = coeffs.coeffs
    n_out = np.asarray(w).shape[1]
    if n_out > MAX_ENUMERATION:
        raise ValueError(f"refusing to enumerate 2^{n_out} firing vectors (limit 2^{MAX_ENUMERATION})")
    configs = firing_vectors(n_out)
    neg_e = np.array([-energy(x, bits, w, coeffs) for bits in configs])
    top = neg_e.max()
    weights = np.exp(neg_e - top)
    probs = weights / weights.sum()
    return dict(zip(configs, probs))
