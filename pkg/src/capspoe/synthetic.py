"""Small synthetic datasets for tests, demos and smoke runs."""

from __future__ import annotations

import numpy as np

from .capsule_core import squash
from .numerics import Rng


def two_prototypes(n_caps: int = 4, dim: int = 4, length: float = 1.5):
    """Two capsule patterns whose flattened vectors are orthogonal.

    Capsule ``i`` of the first pattern points along axis ``i % dim``; in the
    second it points along axis ``(i + dim // 2) % dim``.
    """
    if dim < 2:
        raise ValueError("need dim >= 2 for orthogonal prototypes")
    eye = np.eye(dim)
    a = np.stack([eye[i % dim] for i in range(n_caps)]) * length
    b = np.stack([eye[(i + dim // 2) % dim] for i in range(n_caps)]) * length
    return a, b


def two_prototype_dataset(n: int, seed: int = 0, n_caps: int = 4, dim: int = 4, noise: float = 0.1):
    """Squashed noisy copies of two orthogonal prototype layers.

    Returns:
        ``(data, labels)`` with ``data`` of shape ``(n, n_caps, dim)``; the
        labels say which prototype each sample came from and are only used
        for diagnostics.
    """
    rng = Rng(seed)
    protos = np.stack(two_prototypes(n_caps, dim))
    labels = (rng.uniform(n) < 0.5).astype(int)
    data = protos[labels] + rng.normal((n, n_caps, dim), 0.0, noise)
    return squash(data), labels


def stroke_images(n: int, seed: int = 0, size: int = 28):
    """Grey images of one or two random thick line segments on black.

    A dependency-free stand-in for handwriting-like data; values in [0, 1]
    with shape ``(n, size, size, 1)``.
    """
    rng = Rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((n, size, size))
    for k in range(n):
        strokes = 1 + int(rng.uniform(1)[0] < 0.5)
        img = np.zeros((size, size))
        for _ in range(strokes):
            p = 4 + rng.uniform(4).reshape(2, 2) * (size - 8)
            width = 1.0 + 1.5 * rng.uniform(1)[0]
            d = p[1] - p[0]
            t = np.clip(((xx - p[0, 0]) * d[0] + (yy - p[0, 1]) * d[1]) / max(float(d @ d), 1e-9), 0.0, 1.0)
            dist = np.hypot(xx - (p[0, 0] + t * d[0]), yy - (p[0, 1] + t * d[1]))
            img = np.maximum(img, np.clip(width + 0.5 - dist, 0.0, 1.0))
        out[k] = img
    return out[..., None]
