"""Regenerate the bundled 64-image IDX file from scikit-learn's 8x8 digits.

Each digit is upsampled 3x (bilinear) to 24x24 and centred on a 28x28 canvas.
"""

import sys
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

from capspoe.data_io import write_idx_images


def digits_28(n, start=0):
    digits = load_digits().images[start : start + n] / 16.0
    out = np.zeros((len(digits), 28, 28))
    for k, d in enumerate(digits):
        out[k, 2:26, 2:26] = np.clip(zoom(d, 3, order=1), 0.0, 1.0)
    return out


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/capspoe/data/tiny-images-idx3-ubyte"
    write_idx_images(digits_28(64), target)
    print(f"wrote {target}")
