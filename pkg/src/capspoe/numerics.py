"""Dense linear algebra helpers, the seeded generator and the momentum optimizer.

Vectors and matrices are plain float64 numpy arrays. The generator wraps
numpy's PCG64 bit generator and only consumes its raw 64-bit output, whose
stream is frozen across numpy releases and platforms. Uniforms and normals
are derived from those words here (53-bit mantissa fill, Box-Muller), so the
sampled values do not depend on numpy's distribution code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_TWO_POW_M53 = 1.0 / 9007199254740992.0  # 2**-53


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent."""


def matvec(m, v):
    """Matrix-vector product with an explicit shape check."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1:
        raise ShapeError(f"matvec expects a matrix and a vector, got {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {m.shape[0]}x{m.shape[1]} matrix with length-{v.shape[0]} vector")
    return m @ v


class Rng:
    """Reproducible random source.

    Args:
        seed: non-negative integer below 2**64.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64).reshape(n)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each word."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return gaussian_sample(self, n, mean, std).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of random keys; ties are impossible in practice and
        # resolved by index if they happen
        return np.argsort(self.raw(n), kind="stable")


def gaussian_sample(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw ``n`` i.i.d. normals with the Box-Muller transform.

    Each pair of outputs consumes two words; an odd ``n`` discards the last
    sine term.
    """
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    u1 = 1.0 - u[:, 0]  # (0, 1], keeps log finite
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u[:, 1]
    out = np.empty((pairs, 2))
    out[:, 0] = radius * np.cos(theta)
    out[:, 1] = radius * np.sin(theta)
    return mean + std * out.reshape(-1)[:n]


@dataclass
class SgdState:
    """Momentum SGD state for a set of named parameters.

    ``decay`` is applied to ``learning_rate`` by :meth:`end_epoch`.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    l2: float = 0.0
    decay: float = 1.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")

    def end_epoch(self):
        self.learning_rate *= self.decay


def sgd_step(param, grad, state: SgdState, key: str = "param") -> np.ndarray:
    """One ascent step: ``v = momentum*v + (grad - l2*param); param + lr*v``.

    ``grad`` is the direction to climb (a log-likelihood gradient); callers
    minimising a loss pass its negative. Returns a new array.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ShapeError(f"sgd_step: param {param.shape} vs grad {grad.shape}")
    v = state.velocity.get(key)
    if v is None:
        v = np.zeros_like(param)
    elif v.shape != param.shape:
        raise ShapeError(f"sgd_step: velocity {v.shape} vs param {param.shape}")
    v = state.momentum * v + (grad - state.l2 * param)
    state.velocity[key] = v
    return param + state.learning_rate * v
